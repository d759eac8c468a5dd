"""Energy minimization for a thin tube standing on a thin plate.

The package solves the scaled 3D elastic problems of the coupled structure
and their three reduced limit models (selected by the ratio of plate
thickness to tube cross-section area), computes the relaxation envelopes the
limit densities require, and runs the convergence studies tying both levels
together.
"""

from .envelopes import (EnvelopeMemo, EnvelopeQuery, EnvelopeResult, cell_qcw,
                        cell_qcw_full, convex_envelope, convex_envelope_full,
                        cross_convex_1d_check, envelope_scaling_commute,
                        radial_envelope_oracle, reduced_W0, reduced_W1,
                        verify_envelope_chain)
from .forces import (DivergenceLoads, EpsForces, FormulaField, ForceSystem,
                     RegimeConfig, check_compatibility, divergence_work,
                     divergence_work_eps, forces_from_H, green_residual,
                     limit_load, reduced_loads, scale_forces, work_a,
                     work_a_raw, work_b, work_b_raw)
from .material import (CustomDensity, EnergyDensity, GrowthReport, PWellDist,
                       QuadraticConvex, RadialQuartic, check_p_growth,
                       density_from_name, scaled_density_a, scaled_density_b)
from .mesh import (DeformationState, Geometry, HexMesh, IntervalMesh,
                   MeshResolution, MultiStructureMesh, TriMesh,
                   annulus_p_capacity, apply_junction, apply_junction_adjoint,
                   average_bbar_a, average_bbar_b, build_multistructure,
                   dump_node_field, junction_trace)
from .solvers import (EpsRow, GammaReport, RigidityReport, SolveOptions,
                      eps_energy, gamma_study, limit_energy,
                      limit_energy_lplus, rigidity_check, solve_eps,
                      solve_limit, solve_string)
from .tensor import (WellSet, dist_to_wells, dist_to_wells_batch,
                     join_columns, nearest_well_point,
                     nearest_well_point_batch, project_rotation,
                     project_rotation_batch, random_rotation, split_columns,
                     svd3)

__version__ = "0.1.0"
