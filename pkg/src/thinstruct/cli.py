"""Command line interface.

Subcommands: solve-eps, solve-limit, gamma-study, envelope, check-invariants,
capacity. Configuration is a strict TOML file; unknown keys or sections are
rejected and every violation is reported, not just the first. Outputs are CSV
tables and JSON summaries under the configured directory, plus a manifest
carrying the config hash so each artifact is traceable to its inputs. The
same config and seed reproduce CSVs bit for bit: floats are written with a
fixed format and timings live only in the manifest.

Exit codes: 0 success, 2 config error, 3 solver non-convergence,
4 invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4

FMT = "%.12g"  # fixed float formatting keeps CSV output reproducible


class ConfigError(Exception):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class RunConfig:
    regime_cfg: object      # RegimeConfig
    density: object         # EnergyDensity
    geometry: object        # Geometry
    resolution: object      # MeshResolution
    forces: object          # ForceSystem
    divergence: object      # DivergenceLoads | None
    solver: object          # SolveOptions
    out_dir: str
    seed: int
    envelope_targets: list
    envelope_radii: list
    capacity_cases: list
    config_sha256: str


def _check_keys(block: dict, allowed: set, where: str, bad: list):
    for key in block:
        if key not in allowed:
            bad.append(f"[{where}] unknown key {key!r} "
                       f"(allowed: {sorted(allowed)})")


def _formula_field(spec, shape, dim, where, bad):
    """Build a closed-form field from a config table."""
    from .forces import FormulaField
    if spec is None:
        return FormulaField.zero(shape)
    if not isinstance(spec, dict):
        bad.append(f"[{where}] must be a table")
        return FormulaField.zero(shape)
    _check_keys(spec, {"kind", "value", "const", "lin", "amp", "k", "phase"},
                where, bad)
    kind = spec.get("kind", "constant")
    try:
        if kind == "zero":
            return FormulaField.zero(shape)
        if kind == "constant":
            import numpy as np
            value = np.asarray(spec["value"], dtype=float)
            if value.shape != shape:
                bad.append(f"[{where}] value shape {value.shape} != {shape}")
                return FormulaField.zero(shape)
            return FormulaField.constant(value)
        if kind == "affine":
            import numpy as np
            const = np.asarray(spec.get("const", np.zeros(shape)), dtype=float)
            lin = np.asarray(spec["lin"], dtype=float)
            if lin.shape != shape + (dim,):
                bad.append(f"[{where}] lin shape {lin.shape} != {shape + (dim,)}")
                return FormulaField.zero(shape)
            return FormulaField.affine(const, lin)
        if kind == "sine":
            import numpy as np
            amp = np.asarray(spec["amp"], dtype=float)
            k = np.asarray(spec["k"], dtype=float)
            if amp.shape != shape or k.shape != (dim,):
                bad.append(f"[{where}] sine shapes must be {shape} and ({dim},)")
                return FormulaField.zero(shape)
            return FormulaField.sine(amp, k, float(spec.get("phase", 0.0)),
                                     const=spec.get("const"))
        bad.append(f"[{where}] unknown field kind {kind!r}")
    except KeyError as exc:
        bad.append(f"[{where}] missing key {exc}")
    except (TypeError, ValueError) as exc:
        bad.append(f"[{where}] {exc}")
    return FormulaField.zero(shape)


def _eps_from_rule(regime, p, ell, r_values, bad):
    """h per regime: lplus h = ell*r^2, linf h = r^(1/(p+1)), lzero h = r^(p+3)."""
    eps = []
    for r in r_values:
        r = float(r)
        if regime == "lplus":
            if ell is None:
                bad.append("[regime] lplus rule needs ell")
                return []
            eps.append((r, ell * r * r))
        elif regime == "linf":
            eps.append((r, r ** (1.0 / (p + 1.0))))
        else:
            eps.append((r, r ** (p + 3.0)))
    return eps


def parse_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Strict parse; collects every violation before failing."""
    with open(path, "rb") as fh:
        raw_bytes = fh.read()
    try:
        data = tomllib.loads(raw_bytes.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax: {exc}"])
    sha = hashlib.sha256(raw_bytes).hexdigest()
    return build_run_config(data, sha, overrides or {})


def build_run_config(data: dict, sha: str, overrides: dict) -> RunConfig:
    from .forces import DivergenceLoads, ForceSystem, RegimeConfig
    from .material import density_from_name
    from .mesh import Geometry, MeshResolution
    from .solvers import SolveOptions

    bad: list[str] = []
    allowed_sections = {"regime", "density", "geometry", "forces", "mesh",
                        "solver", "output", "envelope", "capacity",
                        "divergence"}
    _check_keys(data, allowed_sections, "config", bad)

    reg = dict(data.get("regime", {}))
    _check_keys(reg, {"regime", "p", "ell", "eps", "r_values"}, "regime", bad)
    regime = overrides.get("regime", reg.get("regime"))
    p = reg.get("p")
    ell = reg.get("ell")
    if regime not in ("lplus", "linf", "lzero"):
        bad.append(f"[regime] regime must be lplus/linf/lzero, got {regime!r}")
    if not isinstance(p, (int, float)) or not 1.0 < float(p) < float("inf"):
        bad.append(f"[regime] p must be a number in (1, inf), got {p!r}")

    eps = None
    if "eps" in reg and "r_values" in reg:
        bad.append("[regime] give either eps or r_values, not both")
    elif "eps" in reg:
        try:
            eps = [(float(r), float(h)) for r, h in reg["eps"]]
        except (TypeError, ValueError):
            bad.append("[regime] eps must be a list of [r, h] pairs")
    elif "r_values" in reg and regime in ("lplus", "linf", "lzero") \
            and isinstance(p, (int, float)):
        eps = _eps_from_rule(regime, float(p), ell, reg["r_values"], bad)
    else:
        bad.append("[regime] needs eps pairs or an r_values rule")

    regime_cfg = None
    if not bad:
        try:
            regime_cfg = RegimeConfig(regime=regime, p=float(p),
                                      eps_sequence=eps,
                                      ell=None if ell is None else float(ell))
        except (TypeError, ValueError) as exc:
            bad.append(f"[regime] {exc}")
    elif eps is not None and regime in ("lplus", "linf", "lzero") \
            and isinstance(p, (int, float)):
        # still try, to surface regime/p mismatches alongside other errors
        try:
            RegimeConfig(regime=regime, p=float(p), eps_sequence=eps,
                         ell=None if ell is None else float(ell))
        except (TypeError, ValueError) as exc:
            bad.append(f"[regime] {exc}")

    dens = dict(data.get("density", {}))
    _check_keys(dens, {"kind", "C", "p", "delta", "double_well"},
                "density", bad)
    density = None
    kind = dens.pop("kind", None)
    if kind is None:
        bad.append("[density] missing kind")
    else:
        # the well-distance density inherits the regime exponent by default
        if "p" not in dens and isinstance(p, (int, float)) \
                and str(kind).replace("-", "_") == "p_well_dist":
            dens["p"] = float(p)
        try:
            density = density_from_name(str(kind), **dens)
        except (TypeError, ValueError) as exc:
            bad.append(f"[density] {exc}")

    geo = dict(data.get("geometry", {}))
    _check_keys(geo, {"sa", "sb", "L"}, "geometry", bad)
    geometry = None
    try:
        geometry = Geometry(sa=float(geo.get("sa", 0.25)),
                            sb=float(geo.get("sb", 1.0)),
                            L=float(geo.get("L", 1.0)))
    except (TypeError, ValueError) as exc:
        bad.append(f"[geometry] {exc}")

    mesh = dict(data.get("mesh", {}))
    _check_keys(mesh, {"na", "nza", "nb", "nhb", "n_interval"}, "mesh", bad)
    resolution = None
    try:
        resolution = MeshResolution(**{k: int(v) for k, v in mesh.items()})
    except (TypeError, ValueError) as exc:
        bad.append(f"[mesh] {exc}")

    frc = dict(data.get("forces", {}))
    vector_specs = {"fa": 3, "ga": 3, "fb": 3, "gb_plus": 2, "gb_minus": 2,
                    "Gb": 2, "ghat_minus": 2, "Ghat": 2}
    _check_keys(frc, set(vector_specs) | {"Ga"}, "forces", bad)
    fields = {}
    for name, dim in vector_specs.items():
        fields[name] = _formula_field(frc.get(name), (3,), dim,
                                      f"forces.{name}", bad)
    fields["Ga"] = _formula_field(frc.get("Ga"), (3, 3), 1, "forces.Ga", bad)
    divergence = None
    if "divergence" in data:
        dv = dict(data["divergence"])
        _check_keys(dv, {"Ha_alpha", "Ha_3", "Hb_alpha", "Hb_3"},
                    "divergence", bad)
        try:
            divergence = DivergenceLoads(
                Ha_alpha=_formula_field(dv.get("Ha_alpha"), (3, 2), 1,
                                        "divergence.Ha_alpha", bad),
                Ha_3=_formula_field(dv.get("Ha_3"), (3,), 3,
                                    "divergence.Ha_3", bad),
                Hb_alpha=_formula_field(dv.get("Hb_alpha"), (3, 2), 3,
                                        "divergence.Hb_alpha", bad),
                Hb_3=_formula_field(dv.get("Hb_3"), (3,), 2,
                                    "divergence.Hb_3", bad))
        except (TypeError, ValueError) as exc:
            bad.append(f"[divergence] {exc}")
    forces = None
    try:
        forces = ForceSystem(divergence=divergence, **fields)
    except (TypeError, ValueError) as exc:
        bad.append(f"[forces] {exc}")

    sol = dict(data.get("solver", {}))
    allowed_solver = {"max_outer", "tol", "lbfgs_maxiter", "psi_maxiter",
                      "maxls", "restarts", "rho_threshold", "bbar_budget",
                      "envelope_points", "envelope_multistart",
                      "cell_multistart", "cell_n", "envelope_tol", "quantum",
                      "seed"}
    _check_keys(sol, allowed_solver, "solver", bad)
    seed = int(overrides.get("seed", sol.get("seed", 0)))
    sol["seed"] = seed
    solver = None
    try:
        solver = SolveOptions(**{k: v for k, v in sol.items()
                                 if k in allowed_solver})
    except (TypeError, ValueError) as exc:
        bad.append(f"[solver] {exc}")

    out = dict(data.get("output", {}))
    _check_keys(out, {"dir"}, "output", bad)
    out_dir = str(overrides.get("out", out.get("dir", "out")))

    env = dict(data.get("envelope", {}))
    _check_keys(env, {"targets", "radii"}, "envelope", bad)
    targets = env.get("targets", [])
    radii = [float(t) for t in env.get("radii", [])]
    for t in targets:
        if len(t) != 9:
            bad.append("[envelope] each target needs 9 entries (row-major 3x3)")
            break

    cap = dict(data.get("capacity", {}))
    _check_keys(cap, {"cases", "fem_resolution"}, "capacity", bad)
    cases = [(float(c[0]), float(c[1]), int(cap.get("fem_resolution", 400)))
             for c in cap.get("cases", [])]

    if bad:
        raise ConfigError(bad)
    return RunConfig(regime_cfg=regime_cfg, density=density,
                     geometry=geometry, resolution=resolution, forces=forces,
                     divergence=divergence, solver=solver, out_dir=out_dir,
                     seed=seed, envelope_targets=targets,
                     envelope_radii=radii, capacity_cases=cases,
                     config_sha256=sha)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([FMT % v if isinstance(v, float) else v
                             for v in row])


def _write_manifest(out_dir, cfg: RunConfig, subcommand: str, artifacts,
                    timings):
    import numpy
    import scipy

    from . import __version__
    manifest = {
        "subcommand": subcommand,
        "config_sha256": cfg.config_sha256,
        "seed": cfg.seed,
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
        },
        "timings_s": timings,
        "artifacts": sorted(artifacts),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_solve_eps(cfg: RunConfig, eps_index: int):
    from .mesh import build_multistructure, dump_node_field
    from .solvers import solve_eps
    t0 = time.perf_counter()
    r, h = cfg.regime_cfg.eps(eps_index)
    ms = build_multistructure(cfg.geometry, cfg.resolution, r)
    state, energy, diag = solve_eps(cfg.density, cfg.forces, ms,
                                    cfg.regime_cfg, eps_index, cfg.solver)
    arts = []
    pa = os.path.join(cfg.out_dir, "psi_a.csv")
    dump_node_field(pa, ms.hexA.nodes.reshape(-1, 3),
                    state.psi_a.reshape(-1, 3))
    arts.append("psi_a.csv")
    pb = os.path.join(cfg.out_dir, "psi_b.csv")
    dump_node_field(pb, ms.hexB.nodes.reshape(-1, 3),
                    state.psi_b.reshape(-1, 3))
    arts.append("psi_b.csv")
    summary = {"r": r, "h": h, "energy": energy,
               "converged": diag["converged"], "rho": diag["rho"],
               "nit": diag["nit"], "grad_norm": diag["grad_norm"]}
    _dump_json(os.path.join(cfg.out_dir, "solve_eps.json"), summary)
    arts.append("solve_eps.json")
    _write_manifest(cfg.out_dir, cfg, "solve-eps", arts,
                    {"total": time.perf_counter() - t0})
    if not diag["converged"]:
        print("solve-eps did not converge", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_solve_limit(cfg: RunConfig):
    from .mesh import build_multistructure, dump_node_field
    from .solvers import solve_limit
    t0 = time.perf_counter()
    import numpy as np
    r0 = cfg.regime_cfg.eps(0)[0]
    ms = build_multistructure(cfg.geometry, cfg.resolution, r0)
    state, energy, diag = solve_limit(cfg.regime_cfg, cfg.density, cfg.forces,
                                      cfg.geometry, ms, cfg.solver)
    arts = []
    iv = ms.interval
    coords_a = np.stack([np.zeros(iv.n + 1), np.zeros(iv.n + 1), iv.nodes],
                        axis=1)
    dump_node_field(os.path.join(cfg.out_dir, "limit_psi_a.csv"), coords_a,
                    state.psi_a)
    arts.append("limit_psi_a.csv")
    pts3 = np.concatenate([ms.tri.points,
                           np.zeros((len(ms.tri.points), 1))], axis=1)
    dump_node_field(os.path.join(cfg.out_dir, "limit_psi_b.csv"), pts3,
                    state.psi_b)
    arts.append("limit_psi_b.csv")
    summary = {"energy": energy, "converged": diag["converged"],
               "rho": diag["rho"]}
    _dump_json(os.path.join(cfg.out_dir, "solve_limit.json"), summary)
    arts.append("solve_limit.json")
    _write_manifest(cfg.out_dir, cfg, "solve-limit", arts,
                    {"total": time.perf_counter() - t0})
    if not diag["converged"]:
        print("solve-limit did not converge", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_gamma_study(cfg: RunConfig):
    from .solvers import gamma_study
    t0 = time.perf_counter()
    report = gamma_study(cfg.regime_cfg, cfg.density, cfg.forces,
                         cfg.geometry, cfg.solver, cfg.resolution)
    extra_keys = sorted({k for row in report.rows for k in row.extra})
    header = ["row", "r", "h", "energy", "gap", "converged", "rho",
              "bbar_a_norm", "bbar_b_norm", "dist_bbar_a", "dist_bbar_b",
              "dist_psi_a", "dist_psi_b"] + extra_keys
    rows = []
    for row in report.rows:
        rows.append(["eps", row.r, row.h, row.energy,
                     abs(row.energy - report.limit_energy),
                     int(row.converged), row.rho, row.bbar_a_norm,
                     row.bbar_b_norm, row.dist_bbar_a, row.dist_bbar_b,
                     row.dist_psi_a, row.dist_psi_b]
                    + [row.extra.get(k, "") for k in extra_keys])
    rows.append(["limit", "", "", report.limit_energy, 0.0,
                 int(report.limit_converged)] + [""] * (7 + len(extra_keys)))
    path = os.path.join(cfg.out_dir, "gamma_report.csv")
    _write_csv(path, header, rows)
    arts = ["gamma_report.csv"]
    _write_manifest(cfg.out_dir, cfg, "gamma-study", arts,
                    {"total": time.perf_counter() - t0})
    bad = (not report.limit_converged) \
        or any(not row.converged for row in report.rows)
    if bad:
        print("gamma-study: at least one solve did not converge",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_envelope(cfg: RunConfig):
    import numpy as np

    from .envelopes import (EnvelopeQuery, cell_qcw, convex_envelope,
                            radial_envelope_oracle)
    t0 = time.perf_counter()
    W = cfg.density
    targets = [np.asarray(t, dtype=float).reshape(3, 3)
               for t in cfg.envelope_targets]
    radial = getattr(W, "kind", "") == "radial_quartic"
    for t in cfg.envelope_radii:
        targets.append(t * np.eye(3) / np.sqrt(3.0))
    if not targets:
        raise ConfigError(["[envelope] no targets or radii configured"])

    opts = cfg.solver
    rows = []
    for i, T in enumerate(targets):
        q = EnvelopeQuery(W, T, n_points=opts.envelope_points,
                          multistart=opts.envelope_multistart,
                          cell_n=opts.cell_n, tolerance=opts.envelope_tol,
                          seed=cfg.seed)
        ce = convex_envelope(q)
        qc = cell_qcw(q)
        direct = W.evaluate(T)
        row = [i, direct, ce, qc]
        if radial:
            row.append(radial_envelope_oracle(float(np.linalg.norm(T))))
        rows.append(row)
    header = ["index", "W", "convex_envelope", "cell_qcw"]
    if radial:
        header.append("radial_oracle")
    path = os.path.join(cfg.out_dir, "envelope_values.csv")
    _write_csv(path, header, rows)
    _write_manifest(cfg.out_dir, cfg, "envelope", ["envelope_values.csv"],
                    {"total": time.perf_counter() - t0})
    return EXIT_OK


def _cmd_capacity(cfg: RunConfig):
    import math

    from .mesh import annulus_p_capacity
    t0 = time.perf_counter()
    cases = cfg.capacity_cases or [(2.0, math.exp(-2.0), 400),
                                   (1.5, 0.01, 400), (1.2, 0.05, 400)]
    rows = []
    worst = 0.0
    for p, r, n in cases:
        closed, fem = annulus_p_capacity(p, r, fem_resolution=n)
        rel = abs(fem - closed) / abs(closed)
        worst = max(worst, rel)
        rows.append([p, r, closed, fem, rel])
    path = os.path.join(cfg.out_dir, "capacity.csv")
    _write_csv(path, ["p", "r", "closed_form", "fem", "rel_error"], rows)
    _write_manifest(cfg.out_dir, cfg, "capacity", ["capacity.csv"],
                    {"total": time.perf_counter() - t0})
    if worst > 0.02:
        print(f"capacity: FEM estimate off by {worst:.3%} (> 2%)",
              file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _cmd_check_invariants(cfg: RunConfig):
    """Property suite on the configured density/geometry/regime."""
    import numpy as np

    from .envelopes import verify_envelope_chain
    from .forces import ForceSystem, scale_forces, work_a, work_a_raw
    from .mesh import (DeformationState, annulus_p_capacity,
                       average_bbar_a, build_multistructure, junction_trace)
    from .solvers import eps_energy, limit_energy, _limit_init

    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    checks = []

    def record(name, ok, detail):
        checks.append({"name": name, "ok": bool(ok), "detail": detail})

    zero = ForceSystem.zero()
    rc = cfg.regime_cfg
    worst = 0.0
    for i in range(rc.n_eps):
        r, h = rc.eps(i)
        ms = build_multistructure(cfg.geometry, cfg.resolution, r)
        psi_a = ms.hexA.nodes.copy()
        psi_a[..., :2] *= r
        psi_b = ms.hexB.nodes.copy()
        psi_b[..., 2] *= h
        state = DeformationState(psi_a=psi_a, psi_b=psi_b)
        E = eps_energy(state, cfg.density, scale_forces(zero, rc, i), ms, rc, i)
        worst = max(worst, abs(E))
    record("natural-state-eps-energy-zero", worst <= 1e-12, worst)

    ms = build_multistructure(cfg.geometry, cfg.resolution, rc.eps(0)[0])
    st = _limit_init(rc, cfg.geometry, ms)
    E = limit_energy(rc, st, cfg.density, zero, cfg.geometry, ms, cfg.solver)
    record("natural-state-limit-energy-zero", abs(E) <= 1e-12, abs(E))

    samples = [np.eye(3) + 0.8 * rng.standard_normal((3, 3))
               for _ in range(4)]
    chain = verify_envelope_chain(cfg.density, samples, tol=1e-6,
                                  n_points=cfg.solver.envelope_points,
                                  multistart=cfg.solver.envelope_multistart,
                                  cell_n=2, seed=cfg.seed)
    record("envelope-chain", chain.ok, chain.violations)

    epsf = scale_forces(_random_forces(rng), rc, 0)
    psi_a = ms.hexA.nodes.copy()
    psi_a[..., :2] *= ms.r_eps
    psi_a += 0.1 * np.stack([
        ms.hexA.nodes[..., 0] * ms.hexA.nodes[..., 2],
        ms.hexA.nodes[..., 1] ** 2,
        ms.hexA.nodes[..., 2] ** 2,
    ], axis=-1)
    ba = average_bbar_a(psi_a, ms.r_eps, ms)
    gap = abs(work_a(psi_a, ba, epsf, ms) - work_a_raw(psi_a, epsf, ms))
    record("tube-work-identity", gap <= 1e-10, gap)

    closed, fem = annulus_p_capacity(1.5, 0.01, fem_resolution=200)
    rel = abs(fem - closed) / closed
    record("capacity-closed-form", rel <= 0.02, rel)

    psi_b = ms.hexB.nodes.copy()
    psi_b[..., 2] *= rc.eps(0)[1]
    tr = junction_trace(ms, psi_b)
    tr2 = junction_trace(ms, psi_b)
    record("junction-deterministic", np.array_equal(tr, tr2), 0.0)

    ok = all(c["ok"] for c in checks)
    payload = {"ok": ok, "checks": checks}
    _dump_json(os.path.join(cfg.out_dir, "invariants_report.json"), payload)
    _write_manifest(cfg.out_dir, cfg, "check-invariants",
                    ["invariants_report.json"],
                    {"total": time.perf_counter() - t0})
    if not ok:
        for c in checks:
            if not c["ok"]:
                print(f"invariant failed: {c['name']} ({c['detail']})",
                      file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _random_forces(rng):
    from .forces import FormulaField, ForceSystem
    vec = lambda: FormulaField.constant(0.1 * rng.standard_normal(3))
    return ForceSystem(fa=vec(), ga=vec(),
                       Ga=FormulaField.constant(0.1 * rng.standard_normal((3, 3))))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thinstruct",
        description="Scaled and limit energy minimization for a tube-on-plate "
                    "structure.")
    parser.add_argument("subcommand",
                        choices=["solve-eps", "solve-limit", "gamma-study",
                                 "envelope", "check-invariants", "capacity"])
    parser.add_argument("--config", required=True, help="TOML config path")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--threads", type=int,
                        help="best-effort thread cap for numeric backends")
    parser.add_argument("--eps-index", type=int, default=0,
                        help="epsilon entry for solve-eps")
    parser.add_argument("--regime", choices=["lplus", "linf", "lzero"],
                        help="regime override (revalidated)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.regime is not None:
        overrides["regime"] = args.regime
    try:
        cfg = parse_config(args.config, overrides)
    except FileNotFoundError:
        print(f"config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        if args.subcommand == "solve-eps":
            if not (0 <= args.eps_index < cfg.regime_cfg.n_eps):
                print(f"--eps-index out of range [0, {cfg.regime_cfg.n_eps})",
                      file=sys.stderr)
                return EXIT_CONFIG
            return _cmd_solve_eps(cfg, args.eps_index)
        if args.subcommand == "solve-limit":
            return _cmd_solve_limit(cfg)
        if args.subcommand == "gamma-study":
            if cfg.regime_cfg.n_eps < 3:
                print("gamma-study needs at least 3 epsilon entries",
                      file=sys.stderr)
                return EXIT_CONFIG
            return _cmd_gamma_study(cfg)
        if args.subcommand == "envelope":
            return _cmd_envelope(cfg)
        if args.subcommand == "check-invariants":
            return _cmd_check_invariants(cfg)
        return _cmd_capacity(cfg)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
