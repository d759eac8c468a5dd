"""Energy minimization drivers.

Three layers:
  * eps_energy / solve_eps: the scaled 3D problems on the coupled hex meshes,
    quasi-Newton over free nodes with eliminated boundary data and junction.
  * limit_energy / solve_limit / solve_string: the reduced limit problems,
    alternating between nodal deformation steps (L-BFGS with envelope-theorem
    gradients) and pointwise minimization over the averaged-gradient fields.
  * gamma_study: the convergence experiment tying the two together.

Every reported minimum of a nonconvex energy is an upper value: descent with
multistart cannot certify global optimality, so reports carry the last energy
decrease as the infimizing slack rho and a converged flag, and studies never
drop unconverged rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .envelopes import (EnvelopeMemo, EnvelopeQuery, cell_qcw_full,
                        convex_envelope_full, lamination_minimize,
                        reduced_W0_full)
from .forces import (EpsForces, ForceSystem, RegimeConfig, limit_load,
                     reduced_loads, scale_forces, work_a_raw, work_b_raw)
from .material import EnergyDensity
from .mesh import (DeformationState, Geometry, IntervalMesh, MeshResolution,
                   MultiStructureMesh, apply_junction_adjoint, average_bbar_a,
                   average_bbar_b, build_multistructure, junction_trace)
from .tensor import WellSet, dist_to_wells_batch, project_rotation

__all__ = [
    "SolveOptions",
    "GammaReport",
    "EpsRow",
    "eps_energy",
    "solve_eps",
    "limit_energy",
    "limit_energy_lplus",
    "solve_limit",
    "solve_string",
    "rigidity_check",
    "RigidityReport",
    "gamma_study",
]


@dataclass(frozen=True)
class SolveOptions:
    """Iteration budgets and tolerances shared by the solvers."""

    max_outer: int = 12
    tol: float = 1e-8           # relative energy-decrease stopping tolerance
    lbfgs_maxiter: int = 500
    psi_maxiter: int = 60       # deformation half-step budget (limit solves)
    maxls: int = 40
    restarts: int = 4           # extra random starts for nonconvex eps solves
    rho_threshold: float = 1e-6  # reporting threshold for the infimizing slack
    bbar_budget: int = 6        # descent steps per pointwise bbar problem
    envelope_points: int = 6
    envelope_multistart: int = 6
    cell_multistart: int = 2
    cell_n: int = 2
    envelope_tol: float = 1e-6
    quantum: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_outer < 1 or self.lbfgs_maxiter < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.quantum < 0.0:
            raise ValueError("memo quantum must be nonnegative")

    def cw_query(self, W, target) -> EnvelopeQuery:
        return EnvelopeQuery(W, target, n_points=self.envelope_points,
                             multistart=self.envelope_multistart,
                             cell_n=self.cell_n, tolerance=self.envelope_tol,
                             seed=self.seed)

    def qcw_query(self, W, target) -> EnvelopeQuery:
        return EnvelopeQuery(W, target, n_points=self.envelope_points,
                             multistart=self.cell_multistart,
                             cell_n=self.cell_n, tolerance=self.envelope_tol,
                             seed=self.seed)


@dataclass
class EpsRow:
    r: float
    h: float
    energy: float
    converged: bool
    rho: float
    bbar_a_norm: float
    bbar_b_norm: float
    dist_bbar_a: float
    dist_bbar_b: float
    dist_psi_a: float
    dist_psi_b: float
    extra: dict = field(default_factory=dict)


@dataclass
class GammaReport:
    regime: str
    p: float
    rows: list
    limit_energy: float
    limit_converged: bool
    limit_summary: dict

    def __post_init__(self):
        rs = [row.r for row in self.rows]
        if any(b >= a for a, b in zip(rs, rs[1:])):
            raise ValueError("report rows must be ordered by decreasing r")


# ---------------------------------------------------------------------------
# scaled 3D energy
# ---------------------------------------------------------------------------

def _scaled_gradients_a(psi_a, ms, r):
    G = ms.hexA.center_gradient(psi_a)
    F = G.copy()
    F[..., :2] /= r
    return F


def _scaled_gradients_b(psi_b, ms, h):
    G = ms.hexB.center_gradient(psi_b)
    F = G.copy()
    F[..., 2] /= h
    return F


def _check_finite(vals, side):
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise ValueError(
            f"energy is not finite at {side}-side element {tuple(bad)}")


def eps_energy(state: DeformationState, W: EnergyDensity, epsf: EpsForces,
               ms: MultiStructureMesh, cfg: RegimeConfig,
               eps_index: int) -> float:
    """Total scaled energy at one epsilon level.

    pref_a (F_a - L_a) + pref_b (F_b - L_b) with (pref_a, pref_b) = (1, h/r^2)
    for lplus/linf and (r^2/h, 1) for lzero, elastic parts by one-point hex
    quadrature of the scaled gradients.
    """
    r, h = cfg.eps(eps_index)
    Fa_dens = W.evaluate_batch(
        _scaled_gradients_a(state.psi_a, ms, r).reshape(-1, 3, 3))
    _check_finite(Fa_dens.reshape(ms.hexA.ncells), "a")
    Fa = ms.hexA.cell_volume * float(Fa_dens.sum())
    Fb_dens = W.evaluate_batch(
        _scaled_gradients_b(state.psi_b, ms, h).reshape(-1, 3, 3))
    _check_finite(Fb_dens.reshape(ms.hexB.ncells), "b")
    Fb = ms.hexB.cell_volume * float(Fb_dens.sum())
    La = work_a_raw(state.psi_a, epsf, ms)
    Lb = work_b_raw(state.psi_b, epsf, ms, h)
    if cfg.regime == "lzero":
        return (r**2 / h) * (Fa - La) + (Fb - Lb)
    return (Fa - La) + (h / r**2) * (Fb - Lb)


def _assemble_load_a(epsf: EpsForces, ms: MultiStructureMesh) -> np.ndarray:
    """Nodal vector la with sum(la * psi_a) == work_a_raw(psi_a) exactly."""
    hexA = ms.hexA
    la = np.zeros(hexA.node_shape)
    centers = hexA.cell_centers.reshape(-1, 3)
    fcell = (hexA.cell_volume / 8.0) * epsf.fa_eps(centers).reshape(
        hexA.ncells + (3,))
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                la[di:di + hexA.ncells[0], dj:dj + hexA.ncells[1],
                   dk:dk + hexA.ncells[2]] += fcell

    fc, area, normals = hexA.lateral_faces()
    g = (area[:, None] / (4.0 * epsf.r)) * epsf.ga_eps(fc, normals)
    nx, ny, nz = hexA.ncells
    blocks = [g[: ny * nz].reshape(ny, nz, 3),
              g[ny * nz: 2 * ny * nz].reshape(ny, nz, 3),
              g[2 * ny * nz: 2 * ny * nz + nx * nz].reshape(nx, nz, 3),
              g[2 * ny * nz + nx * nz:].reshape(nx, nz, 3)]
    walls = [la[0], la[-1], la[:, 0], la[:, -1]]
    for wall, blk in zip(walls, blocks):
        for du in (0, 1):
            for dv in (0, 1):
                wall[du:du + blk.shape[0], dv:dv + blk.shape[1]] += blk
    return la


def _assemble_load_b(epsf: EpsForces, ms: MultiStructureMesh,
                     h_eps: float) -> np.ndarray:
    """Nodal vector lb with sum(lb * psi_b) == work_b_raw(psi_b) exactly."""
    hexB = ms.hexB
    lb = np.zeros(hexB.node_shape)
    centers = hexB.cell_centers.reshape(-1, 3)
    fcell = (hexB.cell_volume / 8.0) * epsf.fb_eps(centers).reshape(
        hexB.ncells + (3,))
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                lb[di:di + hexB.ncells[0], dj:dj + hexB.ncells[1],
                   dk:dk + hexB.ncells[2]] += fcell

    from .forces import _footprint_quadrature, _out_column_mask
    out = _out_column_mask(ms)
    nb = hexB.ncells[0]
    c2 = hexB.face_centers("top").reshape(-1, 2)
    area = hexB.h[0] * hexB.h[1]
    gtop = np.zeros((nb, nb, 3))
    gbot = np.zeros((nb, nb, 3))
    gtop.reshape(-1, 3)[out] = (area / 4.0) * epsf.gplus_eps(c2[out]) / h_eps
    gbot.reshape(-1, 3)[out] = (area / 4.0) * epsf.gminus_eps_out(c2[out]) / h_eps
    for du in (0, 1):
        for dv in (0, 1):
            lb[du:du + nb, dv:dv + nb, -1] += gtop
            lb[du:du + nb, dv:dv + nb, 0] += gbot

    # footprint bottom density enters through the junction-cell interpolation
    _, fp_pts, wfp = _footprint_quadrature(ms)
    gfp = (wfp / (4.0 * h_eps)) * epsf.gminus_eps_fp(fp_pts)
    na = ms.resolution.na
    gfp = gfp.reshape(na, na, 3)
    node_acc = np.zeros((na + 1, na + 1, 3))
    for du in (0, 1):
        for dv in (0, 1):
            node_acc[du:du + na, dv:dv + na] += gfp
    ij, w = ms.junction_flat()
    i, j = ij[:, 0], ij[:, 1]
    contrib = node_acc.reshape(-1, 3)
    bot = lb[:, :, 0]
    np.add.at(bot, (i, j), w[:, 0, None] * contrib)
    np.add.at(bot, (i + 1, j), w[:, 1, None] * contrib)
    np.add.at(bot, (i, j + 1), w[:, 2, None] * contrib)
    np.add.at(bot, (i + 1, j + 1), w[:, 3, None] * contrib)
    return lb


def _clamped_identity(ms: MultiStructureMesh, r: float, h: float):
    psi_a = ms.hexA.nodes.copy()
    psi_a[..., :2] *= r
    psi_b = ms.hexB.nodes.copy()
    psi_b[..., 2] *= h
    return psi_a, psi_b


def solve_eps(W: EnergyDensity, fs: ForceSystem, ms: MultiStructureMesh,
              cfg: RegimeConfig, eps_index: int, opts: SolveOptions):
    """Minimize the scaled 3D energy over free nodes.

    Boundary data (tube top, plate lateral) is eliminated, the tube bottom
    layer is slaved to the plate top through the junction map, and descent
    starts from the clamped-identity extension, the natural state. Nonconvex
    densities get opts.restarts extra seeded random starts.
    Returns (state, energy, diagnostics).
    """
    r, h = cfg.eps(eps_index)
    if abs(r - ms.r_eps) > 1e-14:
        raise ValueError(f"mesh was built for r={ms.r_eps}, not {r}")
    epsf = scale_forces(fs, cfg, eps_index)
    pref_a, pref_b = (1.0, h / r**2)
    if cfg.regime == "lzero":
        pref_a, pref_b = (r**2 / h, 1.0)

    la = _assemble_load_a(epsf, ms)
    lb = _assemble_load_b(epsf, ms, h)

    maskA = np.ones(ms.hexA.node_shape[:3], dtype=bool)
    maskA[:, :, -1] = False   # prescribed tube top
    maskA[:, :, 0] = False    # junction slaves
    maskB = np.ones(ms.hexB.node_shape[:3], dtype=bool)
    maskB[0] = maskB[-1] = False
    maskB[:, 0] = maskB[:, -1] = False  # prescribed plate lateral boundary
    nA = int(maskA.sum()) * 3

    psi_a0, psi_b0 = _clamped_identity(ms, r, h)

    def unpack(x):
        pa = psi_a0.copy()
        pb = psi_b0.copy()
        pa[maskA] = x[:nA].reshape(-1, 3)
        pb[maskB] = x[nA:].reshape(-1, 3)
        pa[:, :, 0, :] = junction_trace(ms, pb)
        return pa, pb

    def objective(x):
        pa, pb = unpack(x)
        Fa_scaled = _scaled_gradients_a(pa, ms, r)
        vals = W.evaluate_batch(Fa_scaled.reshape(-1, 3, 3))
        _check_finite(vals.reshape(ms.hexA.ncells), "a")
        E = pref_a * (ms.hexA.cell_volume * float(vals.sum())
                      - float(np.sum(la * pa)))
        gW = W.gradient_batch(Fa_scaled.reshape(-1, 3, 3)).reshape(
            ms.hexA.ncells + (3, 3))
        S = gW * ms.hexA.cell_volume
        S[..., :2] /= r
        ga = pref_a * (ms.hexA.center_gradient_adjoint(S) - la)

        Fb_scaled = _scaled_gradients_b(pb, ms, h)
        vals = W.evaluate_batch(Fb_scaled.reshape(-1, 3, 3))
        _check_finite(vals.reshape(ms.hexB.ncells), "b")
        E += pref_b * (ms.hexB.cell_volume * float(vals.sum())
                       - float(np.sum(lb * pb)))
        gW = W.gradient_batch(Fb_scaled.reshape(-1, 3, 3)).reshape(
            ms.hexB.ncells + (3, 3))
        S = gW * ms.hexB.cell_volume
        S[..., 2] /= h
        gb = pref_b * (ms.hexB.center_gradient_adjoint(S) - lb)

        ga, gb_extra = apply_junction_adjoint(ms, ga)
        gb += gb_extra
        return E, np.concatenate([ga[maskA].ravel(), gb[maskB].ravel()])

    x0 = np.concatenate([psi_a0[maskA].ravel(), psi_b0[maskB].ravel()])
    starts = [x0]
    if not W.is_convex:
        rng = np.random.default_rng(opts.seed)
        for _ in range(opts.restarts):
            starts.append(x0 + 0.05 * rng.standard_normal(x0.shape))

    best = None
    for x_init in starts:
        tracker = {"best": np.inf, "drop": 0.0}

        def tracked(x):
            E, g = objective(x)
            if E < tracker["best"]:
                if np.isfinite(tracker["best"]):
                    tracker["drop"] = tracker["best"] - E
                tracker["best"] = E
            return E, g

        res = minimize(tracked, x_init, jac=True, method="L-BFGS-B",
                       options={"maxiter": opts.lbfgs_maxiter,
                                "maxls": opts.maxls, "ftol": opts.tol,
                                "gtol": 1e-12})
        diag = {
            "converged": bool(res.success),
            "rho": tracker["drop"],
            "nit": int(res.nit),
            "grad_norm": float(np.max(np.abs(res.jac))),
        }
        if best is None or res.fun < best[1]:
            best = (res.x, float(res.fun), diag)

    x, E, diag = best
    pa, pb = unpack(x)
    state = DeformationState(psi_a=pa, psi_b=pb,
                             bbar_a=average_bbar_a(pa, r, ms),
                             bbar_b=average_bbar_b(pb, h, ms))
    diag["restarts_used"] = len(starts) - 1
    return state, E, diag


# ---------------------------------------------------------------------------
# limit energies
# ---------------------------------------------------------------------------

class _EnvelopeOracle:
    """Memoized value+gradient access to the two envelope estimates."""

    def __init__(self, W, opts: SolveOptions, memo: EnvelopeMemo | None = None):
        self.W = W
        self.opts = opts
        self.memo = memo if memo is not None else EnvelopeMemo(opts.quantum)

    def cw(self, target, exact=False):
        if exact:
            res = convex_envelope_full(self.opts.cw_query(self.W, target))
            return res.value, res.gradient

        def compute(rep):
            res = convex_envelope_full(self.opts.cw_query(self.W, rep))
            return res.value, res.gradient
        return self.memo.lookup("cw", target, compute)

    def qcw(self, target, exact=False):
        if exact:
            res = cell_qcw_full(self.opts.qcw_query(self.W, target))
            return res.value, res.gradient

        def compute(rep):
            res = cell_qcw_full(self.opts.qcw_query(self.W, rep))
            return res.value, res.gradient
        return self.memo.lookup("qcw", target, compute)


def _beam_elastic(state, oracle, geom, ms, exact=False, want_grad=False):
    iv = ms.interval
    abar = geom.abar
    dpsi = iv.derivative(state.psi_a)
    total = 0.0
    g_bbar = np.zeros((iv.n, 3, 2))
    g_dpsi = np.zeros((iv.n, 3))
    for i in range(iv.n):
        M = np.concatenate([state.bbar_a[i] / abar, dpsi[i][:, None]], axis=1)
        v, g = oracle.cw(M, exact=exact)
        total += iv.dz * abar * v
        if want_grad:
            g_bbar[i] = iv.dz * g[:, :2]
            g_dpsi[i] = iv.dz * abar * g[:, 2]
    if want_grad:
        return total, g_bbar, g_dpsi
    return total


def _membrane_elastic(state, oracle, ms, exact=False, want_grad=False):
    tri = ms.tri
    gpsi = tri.gradient(state.psi_b)
    total = 0.0
    g_gpsi = np.zeros((tri.n_tris, 3, 2))
    g_bbar = np.zeros((tri.n_tris, 3))
    for t in range(tri.n_tris):
        M = np.concatenate([gpsi[t], state.bbar_b[t][:, None]], axis=1)
        v, g = oracle.qcw(M, exact=exact)
        total += tri.areas[t] * v
        if want_grad:
            g_gpsi[t] = tri.areas[t] * g[:, :2]
            g_bbar[t] = tri.areas[t] * g[:, 2]
    if want_grad:
        return total, g_gpsi, g_bbar
    return total


def limit_energy(cfg: RegimeConfig, state: DeformationState, W: EnergyDensity,
                 fs: ForceSystem, geom: Geometry, ms: MultiStructureMesh,
                 opts: SolveOptions | None = None,
                 oracle: _EnvelopeOracle | None = None,
                 exact: bool = True) -> float:
    """Limit energy of the regime: envelope-relaxed elastic parts minus the
    limit load (which already carries the junction term sign for lplus)."""
    opts = opts if opts is not None else SolveOptions()
    oracle = oracle if oracle is not None else _EnvelopeOracle(W, opts)
    _fill_frozen(cfg, state, geom, ms)
    E = 0.0
    if cfg.regime in ("lplus", "linf"):
        E += _beam_elastic(state, oracle, geom, ms, exact=exact)
    if cfg.regime == "lplus":
        E += cfg.ell * _membrane_elastic(state, oracle, ms, exact=exact)
    elif cfg.regime == "lzero":
        E += _membrane_elastic(state, oracle, ms, exact=exact)
    return E - limit_load(cfg, state, fs, geom, ms)


def limit_energy_lplus(state: DeformationState, W: EnergyDensity,
                       fs: ForceSystem, geom: Geometry, ell: float,
                       ms: MultiStructureMesh,
                       opts: SolveOptions | None = None) -> float:
    """The coupled limit energy at finite positive thickness ratio ell."""
    r0, h0 = 1.0, ell
    cfg = RegimeConfig("lplus", p=W.p, ell=ell, eps_sequence=[(r0, h0)])
    return limit_energy(cfg, state, W, fs, geom, ms, opts)


def _fill_frozen(cfg, state, geom, ms):
    """Populate the rigid body of the regime with its limit fields."""
    iv, tri = ms.interval, ms.tri
    if cfg.regime == "linf":
        if state.psi_b is None:
            state.psi_b = np.concatenate(
                [tri.points, np.zeros((len(tri.points), 1))], axis=1)
        if state.bbar_b is None:
            state.bbar_b = np.tile([0.0, 0.0, 1.0], (tri.n_tris, 1))
    if cfg.regime == "lzero":
        if state.psi_a is None:
            state.psi_a = np.stack(
                [np.zeros(iv.n + 1), np.zeros(iv.n + 1), iv.nodes], axis=1)
        if state.bbar_a is None:
            state.bbar_a = np.tile(geom.abar * np.eye(3)[:, :2], (iv.n, 1, 1))


def _limit_init(cfg, geom, ms) -> DeformationState:
    iv, tri = ms.interval, ms.tri
    state = DeformationState()
    state.psi_a = np.stack(
        [np.zeros(iv.n + 1), np.zeros(iv.n + 1), iv.nodes], axis=1)
    state.bbar_a = np.tile(geom.abar * np.eye(3)[:, :2], (iv.n, 1, 1))
    state.psi_b = np.concatenate(
        [tri.points, np.zeros((len(tri.points), 1))], axis=1)
    state.bbar_b = np.tile([0.0, 0.0, 1.0], (tri.n_tris, 1))
    return state


def _armijo_point_min(fn, x0, budget):
    """A few steps of Armijo projected gradient on a small smooth problem.

    fn(x) -> (value, grad). Returns the best point found; never worse than x0.
    """
    x = np.asarray(x0, dtype=float).copy()
    v, g = fn(x)
    t = 1.0
    for _ in range(budget):
        moved = False
        for _ in range(12):
            cand = x - t * g
            vc, gc = fn(cand)
            if vc < v - 1e-4 * t * float(g @ g):
                x, v, g = cand, vc, gc
                t = min(t * 1.5, 1e3)
                moved = True
                break
            t *= 0.5
        if not moved:
            break
    return x, v


def _bbar_step_beam(state, oracle, fs, geom, ms, opts):
    """Pointwise minimization over bbar_a per segment; keeps improvements.

    Returns the exact total energy decrease (dz times the pointwise gains).
    """
    iv = ms.interval
    abar = geom.abar
    dpsi = iv.derivative(state.psi_a)
    Ga = fs.Ga(iv.mid)[:, :, :2]
    delta = 0.0
    for i in range(iv.n):
        zeta = dpsi[i]

        def fn(x):
            b = x.reshape(3, 2)
            M = np.concatenate([b / abar, zeta[:, None]], axis=1)
            v, g = oracle.cw(M, exact=True)
            return abar * v - float(np.sum(Ga[i] * b)), (g[:, :2] - Ga[i]).ravel()

        x0 = state.bbar_a[i].ravel()
        v0 = fn(x0)[0]
        if oracle.W.is_convex:
            res = minimize(fn, x0, jac=True, method="L-BFGS-B",
                           options={"maxiter": 80})
            x, v = res.x, float(res.fun)
        else:
            x, v = _armijo_point_min(fn, x0, opts.bbar_budget)
        if v < v0:
            state.bbar_a[i] = x.reshape(3, 2)
            delta += iv.dz * (v - v0)
    return delta


def _bbar_step_membrane(state, oracle, fs, ms, opts):
    """Returns the total area-weighted decrease (without the regime factor)."""
    tri = ms.tri
    gpsi = tri.gradient(state.psi_b)
    Gb = fs.Gb(tri.centroids)
    delta = 0.0
    for t in range(tri.n_tris):
        def fn(x):
            M = np.concatenate([gpsi[t], x[:, None]], axis=1)
            v, g = oracle.qcw(M, exact=True)
            return v - float(Gb[t] @ x), g[:, 2] - Gb[t]

        x0 = state.bbar_b[t]
        v0 = fn(x0)[0]
        if oracle.W.is_convex:
            res = minimize(fn, x0, jac=True, method="L-BFGS-B",
                           options={"maxiter": 80})
            x, v = res.x, float(res.fun)
        else:
            x, v = _armijo_point_min(fn, x0, opts.bbar_budget)
        if v < v0:
            state.bbar_b[t] = x
            delta += tri.areas[t] * (v - v0)
    return delta


def solve_limit(cfg: RegimeConfig, W: EnergyDensity, fs: ForceSystem,
                geom: Geometry, ms: MultiStructureMesh, opts: SolveOptions):
    """Alternating minimization of the limit energy.

    Half-steps: (i) pointwise descent over the averaged-gradient fields, each
    a small envelope-composed problem started from the incumbent and kept
    only if it improves; (ii) L-BFGS over free deformation nodes with
    memoized envelope gradients, kept only if the exact energy improves.
    linf freezes the plate at its rigid limit, lzero the beam.
    Returns (state, energy, diagnostics).
    """
    oracle = _EnvelopeOracle(W, opts)
    state = _limit_init(cfg, geom, ms)
    iv, tri = ms.interval, ms.tri
    couple_junction = cfg.regime == "lplus" and cfg.p > 2.0

    solve_beam = cfg.regime in ("lplus", "linf")
    solve_plate = cfg.regime in ("lplus", "lzero")
    plate_factor = cfg.ell if cfg.regime == "lplus" else 1.0

    free_b = np.ones(len(tri.points), dtype=bool)
    free_b[tri.boundary_nodes] = False
    nfb = int(free_b.sum()) * 3

    reduced = reduced_loads(fs, geom)
    fbar_a, gbar_a, fbar_b = reduced
    zm = iv.mid
    beam_nodal_load = np.zeros((iv.n + 1, 3))
    if solve_beam:
        mid_load = iv.dz * (fbar_a(zm) + gbar_a(zm))
        beam_nodal_load[:-1] += 0.5 * mid_load
        beam_nodal_load[1:] += 0.5 * mid_load
    memb_nodal_load = np.zeros((len(tri.points), 3))
    if solve_plate:
        ct = tri.centroids
        dens = tri.areas[:, None] * (fbar_b(ct) + fs.gb_plus(ct)
                                     - fs.gb_minus(ct)) / 3.0
        for k in range(3):
            np.add.at(memb_nodal_load, tri.tris[:, k], plate_factor * dens)
    Ghat0 = geom.abar * fs.Ghat(np.zeros((1, 2)))[0]

    def pack(state):
        xs = []
        if solve_beam:
            lo = 0 if (cfg.regime == "lplus" and not couple_junction) else 1
            xs.append(state.psi_a[lo:-1].ravel())
        if solve_plate:
            xs.append(state.psi_b[free_b].ravel())
        return np.concatenate(xs) if xs else np.zeros(0)

    def unpack(x, state):
        pos = 0
        if solve_beam:
            lo = 0 if (cfg.regime == "lplus" and not couple_junction) else 1
            n = (iv.n + 1 - lo - 1) * 3
            state.psi_a[lo:-1] = x[pos:pos + n].reshape(-1, 3)
            pos += n
        if solve_plate:
            state.psi_b[free_b] = x[pos:pos + nfb].reshape(-1, 3)
        if couple_junction:
            state.psi_a[0] = state.psi_b[tri.origin_node]
        elif cfg.regime == "linf":
            state.psi_a[0] = 0.0

    def psi_objective(x, st):
        unpack(x, st)
        E = 0.0
        g_a = np.zeros((iv.n + 1, 3))
        g_bnod = np.zeros((len(tri.points), 3))
        if solve_beam:
            Eb, _, g_dpsi = _beam_elastic(st, oracle, geom, ms,
                                          exact=False, want_grad=True)
            E += Eb - float(np.sum(beam_nodal_load * st.psi_a))
            g_a += iv.derivative_adjoint(g_dpsi) - beam_nodal_load
            if cfg.regime == "lplus":
                E += float(Ghat0 @ st.psi_a[0])
                g_a[0] += Ghat0
        if solve_plate:
            Em, g_gpsi, _ = _membrane_elastic(st, oracle, ms,
                                              exact=False, want_grad=True)
            E += plate_factor * Em - float(np.sum(memb_nodal_load * st.psi_b))
            g_bnod += plate_factor * tri.gradient_adjoint(g_gpsi) \
                - memb_nodal_load
        if couple_junction:
            g_bnod[tri.origin_node] += g_a[0]
            g_a[0] = 0.0
        parts = []
        if solve_beam:
            lo = 0 if (cfg.regime == "lplus" and not couple_junction) else 1
            parts.append(g_a[lo:-1].ravel())
        if solve_plate:
            parts.append(g_bnod[free_b].ravel())
        return E, np.concatenate(parts) if parts else np.zeros(0)

    def exact_energy(st):
        return limit_energy(cfg, st, W, fs, geom, ms, opts, oracle, exact=True)

    E = exact_energy(state)
    converged = False
    for _ in range(opts.max_outer):
        E_prev = E
        if solve_beam:
            E += _bbar_step_beam(state, oracle, fs, geom, ms, opts)
        if solve_plate:
            E += plate_factor * _bbar_step_membrane(state, oracle, fs, ms, opts)

        trial = state.copy()
        x0 = pack(trial)
        if x0.size:
            res = minimize(psi_objective, x0, args=(trial,), jac=True,
                           method="L-BFGS-B",
                           options={"maxiter": opts.psi_maxiter,
                                    "maxls": opts.maxls, "ftol": 1e-12})
            unpack(res.x, trial)
            E_trial = exact_energy(trial)
            if E_trial < E:
                state, E = trial, E_trial
        if abs(E_prev - E) < opts.tol * max(1.0, abs(E)):
            converged = True
            break

    diag = {"converged": converged, "rho": abs(E_prev - E),
            "envelope_hits": oracle.memo.hits,
            "envelope_misses": oracle.memo.misses}
    return state, E, diag


# ---------------------------------------------------------------------------
# string-only problems
# ---------------------------------------------------------------------------

class _W0Envelope:
    """1D convexification of the fiber-reduced density.

    The reduced density is memoized on quantized arguments for nonconvex
    densities, where it dominates cost; the convex case is evaluated exactly
    (partial minimization of a convex function is smooth enough for clean
    quasi-Newton convergence, and cheap).
    """

    def __init__(self, W, opts: SolveOptions):
        self.W = W
        self.opts = opts
        self.memo = EnvelopeMemo(opts.quantum)

    def _w0(self, zeta):
        def compute(rep):
            v, b, g = reduced_W0_full(self.W, rep.ravel(),
                                      multistart=self.opts.envelope_multistart,
                                      seed=self.opts.seed)
            return v, g
        if self.W.is_convex:
            return compute(np.asarray(zeta, dtype=float))
        return self.memo.lookup("w0", zeta, compute)

    def cw0(self, zeta):
        """Upper estimate of the convexified reduced density at zeta in R^3."""
        def fn_batch(P):
            return np.array([self._w0(p)[0] for p in P])

        def grad_batch(P):
            return np.stack([self._w0(p)[1] for p in P])

        if self.W.is_convex:
            v, g = self._w0(np.asarray(zeta, dtype=float))
            return v, g
        rng = np.random.default_rng(self.opts.seed)
        zeta = np.asarray(zeta, dtype=float)
        N = 4
        starts = []
        nz = np.linalg.norm(zeta)
        if nz < 1.0:
            D = zeta / nz if nz > 1e-14 else np.array([0.0, 0.0, 1.0])
            c = float(D @ zeta)
            P = np.tile(zeta, (N, 1))
            P[0], P[1] = D, -D
            lam = np.zeros(N)
            lam[0], lam[1] = (1 + c) / 2, (1 - c) / 2
            starts.append((P, lam))
        for d in range(3):
            E = np.zeros(3)
            E[d] = 1.0 + nz
            P = np.tile(zeta, (N, 1))
            P[0], P[1] = zeta + E, zeta - E
            lam = np.zeros(N)
            lam[0] = lam[1] = 0.5
            starts.append((P, lam))
        while len(starts) < self.opts.envelope_multistart:
            starts.append((zeta + rng.standard_normal((N, 3)),
                           np.full(N, 1.0 / N)))
        E, gbar, _, _ = lamination_minimize(
            fn_batch, grad_batch, zeta, starts, self.opts.envelope_tol,
            100, 4.0 * (1.0 + nz))
        v_direct, g_direct = self._w0(zeta)
        if E < v_direct - 1e-12:
            return E, gbar
        return v_direct, g_direct


def solve_string(W: EnergyDensity, fs: ForceSystem, geom: Geometry,
                 opts: SolveOptions, with_bending: bool = True,
                 n: int = 64):
    """String problem with both ends pinned to the straight data.

    with_bending: alternate over (bbar_a, psi_a) for the moment-coupled
    density; without: minimize the fiber with the convexified reduced density
    (valid comparison when the lateral moment field vanishes).
    Returns (state, energy, diagnostics).
    """
    iv = IntervalMesh(n, geom.L)
    abar = geom.abar
    fbar_a, gbar_a, _ = reduced_loads(fs, geom)
    zm = iv.mid
    mid_load = iv.dz * (fbar_a(zm) + gbar_a(zm))
    nodal_load = np.zeros((iv.n + 1, 3))
    nodal_load[:-1] += 0.5 * mid_load
    nodal_load[1:] += 0.5 * mid_load

    psi0 = np.stack([np.zeros(n + 1), np.zeros(n + 1), iv.nodes], axis=1)

    if with_bending:
        opts_local = opts
        oracle = _EnvelopeOracle(W, opts_local)
        state = DeformationState(
            psi_a=psi0.copy(),
            bbar_a=np.tile(abar * np.eye(3)[:, :2], (n, 1, 1)))
        Ga = fs.Ga(zm)[:, :, :2]

        def exact_energy(st):
            E = _beam_elastic(st, oracle, geom,
                              _StringMesh(iv), exact=True)
            E -= float(np.sum(nodal_load * st.psi_a))
            E -= iv.dz * float(np.sum(Ga * st.bbar_a))
            return E

        def psi_objective(x, st):
            st.psi_a[1:-1] = x.reshape(-1, 3)
            Eb, _, g_dpsi = _beam_elastic(st, oracle, geom, _StringMesh(iv),
                                          exact=False, want_grad=True)
            E = Eb - float(np.sum(nodal_load * st.psi_a)) \
                - iv.dz * float(np.sum(Ga * st.bbar_a))
            g = iv.derivative_adjoint(g_dpsi) - nodal_load
            return E, g[1:-1].ravel()

        E = exact_energy(state)
        converged = False
        for _ in range(opts.max_outer):
            E_prev = E
            E += _bbar_step_beam(state, oracle, fs, geom, _StringMesh(iv),
                                 opts)
            trial = state.copy()
            res = minimize(psi_objective, trial.psi_a[1:-1].ravel(),
                           args=(trial,), jac=True, method="L-BFGS-B",
                           options={"maxiter": opts.psi_maxiter,
                                    "ftol": 1e-12})
            trial.psi_a[1:-1] = res.x.reshape(-1, 3)
            E_trial = exact_energy(trial)
            if E_trial < E:
                state, E = trial, E_trial
            if abs(E_prev - E) < opts.tol * max(1.0, abs(E)):
                converged = True
                break
        return state, E, {"converged": converged}

    w0 = _W0Envelope(W, opts)

    def objective(x):
        psi = psi0.copy()
        psi[1:-1] = x.reshape(-1, 3)
        dpsi = iv.derivative(psi)
        E = -float(np.sum(nodal_load * psi))
        g_dpsi = np.zeros((n, 3))
        for i in range(n):
            v, g = w0.cw0(dpsi[i])
            E += iv.dz * abar * v
            g_dpsi[i] = iv.dz * abar * g
        grad = iv.derivative_adjoint(g_dpsi) - nodal_load
        return E, grad[1:-1].ravel()

    res = minimize(objective, psi0[1:-1].ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": opts.lbfgs_maxiter, "ftol": 1e-12,
                            "gtol": 1e-9})
    psi = psi0.copy()
    psi[1:-1] = res.x.reshape(-1, 3)
    state = DeformationState(psi_a=psi)
    return state, float(res.fun), {"converged": bool(res.success)}


class _StringMesh:
    """Minimal mesh adapter exposing just the interval to the beam helpers."""

    def __init__(self, interval: IntervalMesh):
        self.interval = interval


# ---------------------------------------------------------------------------
# rigidity diagnostic
# ---------------------------------------------------------------------------

@dataclass
class RigidityReport:
    M_best: np.ndarray
    lhs: float            # volume integral of |D - M|^p
    rhs_distance: float   # volume integral of dist(D, wells)^p
    ratio: float


def rigidity_check(state: DeformationState, ms: MultiStructureMesh,
                   K: WellSet, scale: float, side: str = "a",
                   p: float = 2.0) -> RigidityReport:
    """Best-constant-rotation comparison of a scaled gradient field.

    Diagnostic only: the constant in the rigidity inequality is unknown, so
    the report carries both integrals and their ratio, never an assertion.
    """
    if side == "a":
        D = _scaled_gradients_a(state.psi_a, ms, scale).reshape(-1, 3, 3)
        vol = ms.hexA.cell_volume
    elif side == "b":
        D = _scaled_gradients_b(state.psi_b, ms, scale).reshape(-1, 3, 3)
        vol = ms.hexB.cell_volume
    else:
        raise ValueError("side must be 'a' or 'b'")

    Dbar = D.mean(axis=0)
    R = project_rotation(Dbar)
    candidates = [R]
    if K.is_double:
        candidates.append(K.delta * R)

    def lhs_at(M):
        return vol * float(np.sum(
            np.linalg.norm(D - M, axis=(1, 2)) ** p))

    best_M, best_lhs = None, np.inf
    for M0 in candidates:
        s = np.linalg.norm(M0[:, 0])

        def obj(w):
            Rw = _rotation_from_vector(w) @ (M0 / s)
            return lhs_at(s * Rw)

        res = minimize(obj, np.zeros(3), method="Nelder-Mead",
                       options={"maxiter": 120, "xatol": 1e-8, "fatol": 1e-12})
        for M in (M0, s * (_rotation_from_vector(res.x) @ (M0 / s))):
            val = lhs_at(M)
            if val < best_lhs:
                best_M, best_lhs = M, val

    rhs = vol * float(np.sum(dist_to_wells_batch(D, K, p)))
    if rhs > 1e-300:
        ratio = best_lhs / rhs
    else:
        ratio = 0.0 if best_lhs <= 1e-300 else np.inf
    return RigidityReport(M_best=best_M, lhs=best_lhs, rhs_distance=rhs,
                          ratio=ratio)


def _rotation_from_vector(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w)
    if th < 1e-14:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * (Kx @ Kx)


# ---------------------------------------------------------------------------
# the convergence study
# ---------------------------------------------------------------------------

def _lp_norm(diff, weights, p):
    return float(np.sum(weights * np.abs(diff) ** p) ** (1.0 / p))


def gamma_study(cfg: RegimeConfig, W: EnergyDensity, fs: ForceSystem,
                geom: Geometry, opts: SolveOptions,
                resolution: MeshResolution | None = None) -> GammaReport:
    """Solve every epsilon problem and the limit problem, and report energy
    gaps plus distances of the extracted averaged fields to the limit state.
    Unconverged rows are flagged, never dropped."""
    if cfg.n_eps < 3:
        raise ValueError("the study needs at least 3 epsilon entries")
    res = resolution if resolution is not None else MeshResolution()
    p = cfg.p

    ms0 = build_multistructure(geom, res, cfg.eps(0)[0])
    limit_state, E_limit, limit_diag = solve_limit(cfg, W, fs, geom, ms0, opts)

    rows = []
    for i in range(cfg.n_eps):
        r, h = cfg.eps(i)
        ms = build_multistructure(geom, res, r)
        state, E_eps, diag = solve_eps(W, fs, ms, cfg, i, opts)

        ba = state.bbar_a  # (nza, 3, 2) per tube layer
        bb = state.bbar_b  # (nb, nb, 3) per plate column
        zsA = ms.hexA.zs
        zcA = 0.5 * (zsA[:-1] + zsA[1:])
        wA = ms.hexA.h[2]

        iv = ms0.interval
        seg = np.minimum((zcA / iv.dz).astype(int), iv.n - 1)
        ba_lim = limit_state.bbar_a[seg] if limit_state.bbar_a is not None \
            else np.tile(geom.abar * np.eye(3)[:, :2], (len(seg), 1, 1))
        dist_ba = _lp_norm(np.linalg.norm(ba - ba_lim, axis=(1, 2)), wA, p)

        psiA_mean = state.psi_a.mean(axis=(0, 1))  # (nza+1, 3)
        if limit_state.psi_a is not None:
            lim_at = np.stack([np.interp(zsA, iv.nodes, limit_state.psi_a[:, k])
                               for k in range(3)], axis=1)
        else:
            lim_at = np.stack([np.zeros_like(zsA), np.zeros_like(zsA), zsA],
                              axis=1)
        wnode = np.full(len(zsA), wA)
        wnode[0] = wnode[-1] = wA / 2.0
        dist_psia = _lp_norm(np.linalg.norm(psiA_mean - lim_at, axis=1),
                             wnode, p)

        colc = ms.hexB.face_centers("top").reshape(-1, 2)
        wB = ms.hexB.h[0] * ms.hexB.h[1]
        if limit_state.bbar_b is not None:
            idx = ms0.tri.locate(colc)
            bb_lim = limit_state.bbar_b[idx]
        else:
            bb_lim = np.tile([0.0, 0.0, 1.0], (len(colc), 1))
        dist_bb = _lp_norm(np.linalg.norm(bb.reshape(-1, 3) - bb_lim, axis=1),
                           wB, p)

        psiB_mean = state.psi_b.mean(axis=2)  # (nb+1, nb+1, 3)
        nodes2d = ms.hexB.nodes[:, :, 0, :2].reshape(-1, 2)
        if limit_state.psi_b is not None:
            lim_b = ms0.tri.interpolate(limit_state.psi_b, nodes2d)
        else:
            lim_b = np.concatenate([nodes2d, np.zeros((len(nodes2d), 1))],
                                   axis=1)
        dist_psib = _lp_norm(
            np.linalg.norm(psiB_mean.reshape(-1, 3) - lim_b, axis=1), wB, p)

        extra = {}
        if cfg.regime == "linf":
            c = ms.hexB.cell_centers.reshape(-1, 3)
            vals = _cell_center_field(state.psi_b)
            ref = np.concatenate([c[:, :2], np.zeros((len(c), 1))], axis=1)
            extra["plate_psi_norm"] = _lp_norm(
                np.linalg.norm(vals - ref, axis=1), ms.hexB.cell_volume, p)
            G3 = ms.hexB.center_gradient(state.psi_b)[..., 2].reshape(-1, 3)
            extra["plate_grad3_norm"] = _lp_norm(
                np.linalg.norm(G3 / h - [0, 0, 1.0], axis=1),
                ms.hexB.cell_volume, p)
        if cfg.regime == "lzero":
            Ga = ms.hexA.center_gradient(state.psi_a)[..., :2].reshape(-1, 3, 2)
            extra["beam_grad_norm"] = _lp_norm(
                np.linalg.norm(Ga / r - np.eye(3)[:, :2], axis=(1, 2)),
                ms.hexA.cell_volume, p)

        rows.append(EpsRow(
            r=r, h=h, energy=E_eps, converged=diag["converged"],
            rho=diag["rho"],
            bbar_a_norm=_lp_norm(np.linalg.norm(ba, axis=(1, 2)), wA, p),
            bbar_b_norm=_lp_norm(np.linalg.norm(bb.reshape(-1, 3), axis=1),
                                 wB, p),
            dist_bbar_a=dist_ba, dist_bbar_b=dist_bb,
            dist_psi_a=dist_psia, dist_psi_b=dist_psib, extra=extra))

    summary = {
        "converged": limit_diag["converged"],
        "psi_a_end": None if limit_state.psi_a is None
        else limit_state.psi_a[-1].tolist(),
        "psi_a_origin": None if limit_state.psi_a is None
        else limit_state.psi_a[0].tolist(),
    }
    return GammaReport(regime=cfg.regime, p=p, rows=rows,
                       limit_energy=E_limit,
                       limit_converged=limit_diag["converged"],
                       limit_summary=summary)


def _cell_center_field(field):
    s = field[:-1] + field[1:]
    s = s[:, :-1] + s[:, 1:]
    s = s[:, :, :-1] + s[:, :, 1:]
    return (s / 8.0).reshape(-1, 3)
