"""Applied-load system: closed-form force fields, the three thickness-scaling
regimes, discrete work functionals on the fixed domains, reduced loads, the
limit load functionals, and the divergence-form load alternative.

Conventions. The tube fields live on the fixed cylinder (cross section times
(0,L)) whose physical in-plane size is r_eps; the plate fields live on the
fixed slab (cross section times (-1,0)) of physical thickness h_eps. All
surface loads on the plate top act only outside the junction footprint
(r_eps times the closed tube cross section); the footprint bottom carries its
own pair (ghat_minus, Ghat). The matrix field Ga is stored as a function of
x3 and applied only as Ga(x3) @ nu on the lateral tube surface, never as a
free vector field.

The work functionals come in raw form (epsilon densities integrated against
the state) and expanded form (base fields plus averaged-gradient terms plus
the junction term). The two are algebraically equal when both sides use the
same quadrature points and the state satisfies the junction interpolation
relation; tests assert agreement to 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Geometry, HexMesh, MultiStructureMesh

__all__ = [
    "FormulaField",
    "DivergenceLoads",
    "ForceSystem",
    "RegimeConfig",
    "EpsForces",
    "scale_forces",
    "reduced_loads",
    "work_a",
    "work_a_raw",
    "work_b",
    "work_b_raw",
    "limit_load",
    "divergence_work",
    "divergence_work_eps",
    "forces_from_H",
    "green_residual",
    "check_compatibility",
]

REGIMES = ("lplus", "linf", "lzero")


@dataclass(frozen=True)
class FormulaField:
    """Closed-form field: constant + linear + sinusoidal term.

    value(x) = const + lin . x + sin_amp * sin(sin_k . x + sin_phase)
    on points of dimension d (d=1 for fields of x3 alone, 2 for cross-section
    fields, 3 for bulk fields). shape is the value shape, e.g. (3,) or (3,3).
    """

    shape: tuple
    const: np.ndarray
    lin: np.ndarray | None = None
    sin_amp: np.ndarray | None = None
    sin_k: np.ndarray | None = None
    sin_phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "const",
                           np.broadcast_to(np.asarray(self.const, float),
                                           self.shape).copy())
        for name in ("lin", "sin_amp", "sin_k"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        if (self.sin_amp is None) != (self.sin_k is None):
            raise ValueError("sin_amp and sin_k must be given together")

    @classmethod
    def zero(cls, shape=(3,)):
        return cls(shape=shape, const=np.zeros(shape))

    @classmethod
    def constant(cls, value):
        value = np.asarray(value, dtype=float)
        return cls(shape=value.shape, const=value)

    @classmethod
    def affine(cls, const, lin):
        const = np.asarray(const, dtype=float)
        return cls(shape=const.shape, const=const, lin=lin)

    @classmethod
    def sine(cls, amp, k, phase=0.0, const=None):
        amp = np.asarray(amp, dtype=float)
        c = np.zeros(amp.shape) if const is None else const
        return cls(shape=amp.shape, const=c, sin_amp=amp, sin_k=k,
                   sin_phase=phase)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        out = np.tile(self.const, (n,) + (1,) * len(self.shape))
        if self.lin is not None:
            out += np.einsum("...d,nd->n...", self.lin, pts)
        if self.sin_amp is not None:
            s = np.sin(pts @ self.sin_k + self.sin_phase)
            out += s.reshape((n,) + (1,) * len(self.shape)) * self.sin_amp
        return out


@dataclass(frozen=True)
class DivergenceLoads:
    """Divergence-form loads with the separated structure built into the type:
    the in-plane tube block depends on x3 only and the vertical plate block on
    x_alpha only. Ha_alpha(z)->(N,3,2), Ha_3(x)->(N,3), Hb_alpha(x)->(N,3,2),
    Hb_3(x_alpha)->(N,3)."""

    Ha_alpha: FormulaField
    Ha_3: FormulaField
    Hb_alpha: FormulaField
    Hb_3: FormulaField

    def __post_init__(self):
        if self.Ha_alpha.shape != (3, 2) or self.Hb_alpha.shape != (3, 2):
            raise ValueError("in-plane blocks must have shape (3, 2)")
        if self.Ha_3.shape != (3,) or self.Hb_3.shape != (3,):
            raise ValueError("vertical blocks must have shape (3,)")
        # the separated structure: Ha_alpha is a field of x3 (1D argument),
        # Hb_3 of x_alpha (2D argument)
        if self.Ha_alpha.lin is not None and self.Ha_alpha.lin.shape[-1] != 1:
            raise ValueError("Ha_alpha must depend on x3 only")
        if self.Hb_3.lin is not None and self.Hb_3.lin.shape[-1] != 2:
            raise ValueError("Hb_3 must depend on x_alpha only")

    @classmethod
    def zero(cls):
        return cls(Ha_alpha=FormulaField.zero((3, 2)),
                   Ha_3=FormulaField.zero((3,)),
                   Hb_alpha=FormulaField.zero((3, 2)),
                   Hb_3=FormulaField.zero((3,)))


@dataclass(frozen=True)
class ForceSystem:
    """Base load fields; the epsilon scalings are applied by scale_forces."""

    fa: FormulaField = field(default_factory=FormulaField.zero)
    ga: FormulaField = field(default_factory=FormulaField.zero)
    Ga: FormulaField = field(default_factory=lambda: FormulaField.zero((3, 3)))
    fb: FormulaField = field(default_factory=FormulaField.zero)
    gb_plus: FormulaField = field(default_factory=FormulaField.zero)
    gb_minus: FormulaField = field(default_factory=FormulaField.zero)
    Gb: FormulaField = field(default_factory=FormulaField.zero)
    ghat_minus: FormulaField = field(default_factory=FormulaField.zero)
    Ghat: FormulaField = field(default_factory=FormulaField.zero)
    divergence: DivergenceLoads | None = None

    def __post_init__(self):
        if self.Ga.shape != (3, 3):
            raise ValueError("Ga must be a 3x3 matrix field of x3")
        for name in ("fa", "ga", "fb", "gb_plus", "gb_minus", "Gb",
                     "ghat_minus", "Ghat"):
            if getattr(self, name).shape != (3,):
                raise ValueError(f"{name} must be a vector field")

    @classmethod
    def zero(cls):
        return cls()


@dataclass(frozen=True)
class RegimeConfig:
    """Scaling regime, growth exponent, and the epsilon sequence (r, h) pairs."""

    regime: str
    p: float
    eps_sequence: tuple
    ell: float | None = None
    boundary_data: str = "clamped-identity"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not (1.0 < self.p < np.inf):
            raise ValueError(f"growth exponent must satisfy 1 < p < inf, got {self.p}")
        if self.boundary_data not in ("clamped-identity", "custom"):
            raise ValueError(f"unknown boundary data kind {self.boundary_data!r}")
        eps = tuple((float(r), float(h)) for r, h in self.eps_sequence)
        object.__setattr__(self, "eps_sequence", eps)
        if not eps:
            raise ValueError("eps_sequence must not be empty")
        for r, h in eps:
            if r <= 0.0 or h <= 0.0:
                raise ValueError(f"eps entries must be positive, got (r={r}, h={h})")
        rs = [r for r, _ in eps]
        if any(r2 >= r1 for r1, r2 in zip(rs, rs[1:])):
            raise ValueError("eps_sequence must be strictly decreasing in r")
        if self.regime == "lplus":
            if self.ell is None or self.ell <= 0.0:
                raise ValueError("lplus regime needs a finite ratio ell = h/r^2 > 0")
            for i, (r, h) in enumerate(eps):
                if abs(h - self.ell * r * r) > 1e-12 * max(1.0, abs(h)):
                    raise ValueError(
                        f"lplus regime requires h = ell*r^2 exactly; entry {i} "
                        f"has h={h}, ell*r^2={self.ell * r * r}")
        elif self.regime == "linf":
            if not (self.p > 2.0):
                raise ValueError(f"linf regime assumes p > 2 (got p={self.p})")
            ratio = [h ** (self.p + 1.0) / r**2 for r, h in eps]
            if any(b <= a for a, b in zip(ratio, ratio[1:])):
                raise ValueError(
                    "linf regime requires h^(p+1)/r^2 to increase strictly "
                    f"along the sequence, got {ratio}")
        else:
            if not (self.p <= 2.0):
                raise ValueError(f"lzero regime assumes 1 < p <= 2 (got p={self.p})")
            ratio = [h / r ** (self.p + 2.0) for r, h in eps]
            if any(b >= a for a, b in zip(ratio, ratio[1:])):
                raise ValueError(
                    "lzero regime requires h/r^(p+2) to decrease strictly "
                    f"along the sequence, got {ratio}")

    @property
    def n_eps(self) -> int:
        return len(self.eps_sequence)

    def eps(self, i: int):
        if not (0 <= i < self.n_eps):
            raise IndexError(f"eps index {i} out of range [0, {self.n_eps})")
        return self.eps_sequence[i]

    def scale_a(self, i: int) -> float:
        r, h = self.eps(i)
        return h / r**2 if self.regime == "lzero" else 1.0

    def scale_b(self, i: int) -> float:
        r, h = self.eps(i)
        return r**2 / h if self.regime == "linf" else 1.0


@dataclass(frozen=True)
class EpsForces:
    """Epsilon-level load densities for one entry of the sequence."""

    fs: ForceSystem
    regime: str
    r: float
    h: float
    s_a: float
    s_b: float

    def fa_eps(self, pts):
        return self.s_a * self.fs.fa(pts)

    def ga_eps(self, pts, normals):
        """Lateral density r*ga + Ga(x3) @ nu, evaluated at surface points."""
        Ga = self.fs.Ga(pts[:, 2])
        Gnu = np.einsum("nij,nj->ni", Ga, normals)
        return self.s_a * (self.r * self.fs.ga(pts) + Gnu)

    def fb_eps(self, pts):
        return self.s_b * self.fs.fb(pts)

    def gplus_eps(self, pts2d):
        """Top density h*gb_plus + Gb, supported outside the footprint."""
        return self.s_b * (self.h * self.fs.gb_plus(pts2d) + self.fs.Gb(pts2d))

    def gminus_eps_out(self, pts2d):
        return -self.s_b * (self.h * self.fs.gb_minus(pts2d) + self.fs.Gb(pts2d))

    def gminus_eps_fp(self, pts2d):
        return -self.s_b * (self.h * self.fs.ghat_minus(pts2d) + self.fs.Ghat(pts2d))


def scale_forces(fs: ForceSystem, cfg: RegimeConfig, eps_index: int) -> EpsForces:
    r, h = cfg.eps(eps_index)
    return EpsForces(fs=fs, regime=cfg.regime, r=r, h=h,
                     s_a=cfg.scale_a(eps_index), s_b=cfg.scale_b(eps_index))


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------

def _cell_center_values(field: np.ndarray) -> np.ndarray:
    """Trilinear value at hex cell centers: mean of the 8 corner nodes."""
    s = field[:-1] + field[1:]
    s = s[:, :-1] + s[:, 1:]
    s = s[:, :, :-1] + s[:, :, 1:]
    return s / 8.0


def _face_center_values(layer: np.ndarray) -> np.ndarray:
    """Bilinear value at face centers of an (n+1, m+1, 3) node layer."""
    s = layer[:-1] + layer[1:]
    return (s[:, :-1] + s[:, 1:]) / 4.0


def _footprint_quadrature(ms: MultiStructureMesh):
    """Mapped tube-grid quadrature of the junction footprint r_eps * omega_a.

    Points are the shrunk bottom-cell centers of the tube mesh, each with
    weight r^2 * (tube cell area); this resolves the footprint exactly even
    when it is smaller than a single plate cell.
    """
    hexA = ms.hexA
    c2d = hexA.face_centers("bottom").reshape(-1, 2)
    pts = ms.r_eps * c2d
    w = ms.r_eps**2 * hexA.h[0] * hexA.h[1]
    return c2d, pts, w


def _fp_corner_interp(ms: MultiStructureMesh, psi_b: np.ndarray, layer: int):
    """Footprint trace of a plate node layer through the junction map.

    Returns per bottom-cell values: the mean over the cell's 4 corner nodes
    of the junction interpolation into the given plate layer. For the top
    layer this equals the eliminated tube bottom trace at cell centers.
    """
    ij, w = ms.junction_flat()
    vals = ms.hexB.interp_layer(psi_b, layer, ij, w)
    n = ms.resolution.na + 1
    return _face_center_values(vals.reshape(n, n, 3)).reshape(-1, 3)


def _out_column_mask(ms: MultiStructureMesh) -> np.ndarray:
    """Plate columns whose centers lie outside the closed footprint."""
    c = ms.hexB.face_centers("top").reshape(-1, 2)
    lim = ms.r_eps * ms.geometry.sa
    inside = (np.abs(c[:, 0]) <= lim) & (np.abs(c[:, 1]) <= lim)
    return ~inside


def _check_hex_field(psi: np.ndarray, hexmesh: HexMesh, name: str):
    if psi.shape != hexmesh.node_shape:
        raise ValueError(
            f"{name} shape {psi.shape} does not match mesh nodes {hexmesh.node_shape}")


# ---------------------------------------------------------------------------
# tube work
# ---------------------------------------------------------------------------

def work_a(psi_a: np.ndarray, bbar_a_eps: np.ndarray, epsf: EpsForces,
           ms: MultiStructureMesh) -> float:
    """Tube load work in expanded form:
    s_a * (int fa.psi + int_S ga.psi + int_0^L Ga : (bbar_a | 0))."""
    hexA = ms.hexA
    _check_hex_field(psi_a, hexA, "psi_a")
    if bbar_a_eps.shape != (hexA.ncells[2], 3, 2):
        raise ValueError("bbar_a_eps must hold one 3x2 block per tube layer")
    fs = epsf.fs

    centers = hexA.cell_centers.reshape(-1, 3)
    vals = _cell_center_values(psi_a).reshape(-1, 3)
    body = hexA.cell_volume * np.sum(fs.fa(centers) * vals)

    fc, fa_area, _ = hexA.lateral_faces()
    surf_vals = _lateral_face_values(psi_a, hexA)
    surf = np.sum(fa_area[:, None] * fs.ga(fc) * surf_vals)

    zc = 0.5 * (hexA.zs[:-1] + hexA.zs[1:])
    Ga = fs.Ga(zc)  # (nz, 3, 3)
    moment = hexA.h[2] * np.sum(Ga[:, :, :2] * bbar_a_eps)

    return epsf.s_a * (body + surf + moment)


def work_a_raw(psi_a: np.ndarray, epsf: EpsForces,
               ms: MultiStructureMesh) -> float:
    """Tube load work from the epsilon densities:
    int fa_eps.psi + (1/r) int_S ga_eps.psi."""
    hexA = ms.hexA
    _check_hex_field(psi_a, hexA, "psi_a")
    centers = hexA.cell_centers.reshape(-1, 3)
    vals = _cell_center_values(psi_a).reshape(-1, 3)
    body = hexA.cell_volume * np.sum(epsf.fa_eps(centers) * vals)

    fc, fa_area, normals = hexA.lateral_faces()
    surf_vals = _lateral_face_values(psi_a, hexA)
    g = epsf.ga_eps(fc, normals)
    surf = np.sum(fa_area[:, None] * g * surf_vals) / epsf.r
    return body + surf


def _lateral_face_values(psi: np.ndarray, hexmesh: HexMesh) -> np.ndarray:
    """Field values at lateral face centers, ordered like lateral_faces()."""
    walls = [psi[0], psi[-1], psi[:, 0], psi[:, -1]]
    return np.vstack([_face_center_values(w).reshape(-1, 3) for w in walls])


# ---------------------------------------------------------------------------
# plate work
# ---------------------------------------------------------------------------

def work_b(psi_b: np.ndarray, bbar_b_eps: np.ndarray, psi_a_trace: np.ndarray,
           epsf: EpsForces, ms: MultiStructureMesh, r_eps: float,
           h_eps: float) -> float:
    """Plate load work in the expanded (junction-separated) form:

    s_b * ( int fb.psi
          + int_out (gb_plus.psi_top - gb_minus.psi_bot) + int_out Gb.bbar_b
          - int_fp ghat_minus.psi_bot
          - (r^2/h) int_tube_section Ghat(r .).psi_a(.,0)
          + int_fp Ghat.bbar_b )

    psi_a_trace is the tube bottom node layer; when it satisfies the junction
    relation the Ghat terms recombine and the value equals work_b_raw exactly.
    """
    hexB = ms.hexB
    _check_hex_field(psi_b, hexB, "psi_b")
    nb = hexB.ncells[0]
    if bbar_b_eps.shape != (nb, nb, 3):
        raise ValueError("bbar_b_eps must hold one vector per plate column")
    na1 = ms.resolution.na + 1
    if psi_a_trace.shape != (na1, na1, 3):
        raise ValueError("psi_a_trace must be the tube bottom node layer")
    fs = epsf.fs

    centers = hexB.cell_centers.reshape(-1, 3)
    vals = _cell_center_values(psi_b).reshape(-1, 3)
    body = hexB.cell_volume * np.sum(fs.fb(centers) * vals)

    out = _out_column_mask(ms)
    c2 = hexB.face_centers("top").reshape(-1, 2)[out]
    area = hexB.h[0] * hexB.h[1]
    top = hexB.face_layer_mean(psi_b, -1).reshape(-1, 3)[out]
    bot = hexB.face_layer_mean(psi_b, 0).reshape(-1, 3)[out]
    bb = bbar_b_eps.reshape(-1, 3)[out]
    surf_out = area * np.sum(fs.gb_plus(c2) * top - fs.gb_minus(c2) * bot
                             + fs.Gb(c2) * bb)

    ca, fp_pts, wfp = _footprint_quadrature(ms)
    bot_fp = _fp_corner_interp(ms, psi_b, 0)
    top_fp = _fp_corner_interp(ms, psi_b, -1)
    bb_fp = (top_fp - bot_fp) / h_eps
    trace = _face_center_values(psi_a_trace).reshape(-1, 3)
    Ghat = fs.Ghat(fp_pts)
    surf_fp = wfp * np.sum(-fs.ghat_minus(fp_pts) * bot_fp + Ghat * bb_fp)
    area_a = ms.hexA.h[0] * ms.hexA.h[1]
    junction = -(r_eps**2 / h_eps) * area_a * np.sum(Ghat * trace)

    return epsf.s_b * (body + surf_out + surf_fp + junction)


def work_b_raw(psi_b: np.ndarray, epsf: EpsForces, ms: MultiStructureMesh,
               h_eps: float) -> float:
    """Plate load work from the epsilon densities:
    int fb_eps.psi + (1/h)(int_top gplus_eps.psi_top + int_bot gminus_eps.psi_bot)."""
    hexB = ms.hexB
    _check_hex_field(psi_b, hexB, "psi_b")
    centers = hexB.cell_centers.reshape(-1, 3)
    vals = _cell_center_values(psi_b).reshape(-1, 3)
    body = hexB.cell_volume * np.sum(epsf.fb_eps(centers) * vals)

    out = _out_column_mask(ms)
    c2 = hexB.face_centers("top").reshape(-1, 2)[out]
    area = hexB.h[0] * hexB.h[1]
    top = hexB.face_layer_mean(psi_b, -1).reshape(-1, 3)[out]
    bot = hexB.face_layer_mean(psi_b, 0).reshape(-1, 3)[out]
    surf = area * np.sum(epsf.gplus_eps(c2) * top)
    surf += area * np.sum(epsf.gminus_eps_out(c2) * bot)

    _, fp_pts, wfp = _footprint_quadrature(ms)
    bot_fp = _fp_corner_interp(ms, psi_b, 0)
    surf += wfp * np.sum(epsf.gminus_eps_fp(fp_pts) * bot_fp)
    return body + surf / h_eps


# ---------------------------------------------------------------------------
# reduced and limit loads
# ---------------------------------------------------------------------------

def reduced_loads(fs: ForceSystem, geom: Geometry, n: int = 32):
    """Cross-section averages as callables of the reduced coordinates.

    fbar_a(z) integrates fa over the tube section, gbar_a(z) integrates ga
    over its boundary, fbar_b(x_alpha) integrates fb over the plate fiber;
    all by composite midpoint rule with n stations per direction.
    """
    sa = geom.sa
    t = (np.arange(n) + 0.5) / n
    xs = -sa + 2.0 * sa * t
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    sec = np.stack([X.ravel(), Y.ravel()], axis=1)
    w_sec = (2.0 * sa / n) ** 2

    edge = 2.0 * sa / n
    bd = np.vstack([
        np.stack([xs, np.full(n, -sa)], axis=1),
        np.stack([xs, np.full(n, sa)], axis=1),
        np.stack([np.full(n, -sa), xs], axis=1),
        np.stack([np.full(n, sa), xs], axis=1),
    ])

    zf = -1.0 + t
    w_z = 1.0 / n

    def fbar_a(z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        pts = np.concatenate([
            np.tile(sec, (len(z), 1)),
            np.repeat(z, len(sec))[:, None],
        ], axis=1)
        vals = fs.fa(pts).reshape(len(z), len(sec), 3)
        return w_sec * vals.sum(axis=1)

    def gbar_a(z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        pts = np.concatenate([
            np.tile(bd, (len(z), 1)),
            np.repeat(z, len(bd))[:, None],
        ], axis=1)
        vals = fs.ga(pts).reshape(len(z), len(bd), 3)
        return edge * vals.sum(axis=1)

    def fbar_b(x_alpha):
        x_alpha = np.atleast_2d(np.asarray(x_alpha, dtype=float))
        pts = np.concatenate([
            np.repeat(x_alpha, len(zf), axis=0),
            np.tile(zf, len(x_alpha))[:, None],
        ], axis=1)
        vals = fs.fb(pts).reshape(len(x_alpha), len(zf), 3)
        return w_z * vals.sum(axis=1)

    return fbar_a, gbar_a, fbar_b


def _beam_load(state, fs, geom, ms, reduced):
    fbar_a, gbar_a, _ = reduced
    iv = ms.interval
    zm = iv.mid
    psi_m = 0.5 * (state.psi_a[:-1] + state.psi_a[1:])
    dens = np.sum((fbar_a(zm) + gbar_a(zm)) * psi_m)
    Ga = fs.Ga(zm)
    dens += np.sum(Ga[:, :, :2] * state.bbar_a)
    return iv.dz * dens


def _membrane_load(state, fs, ms, reduced):
    _, _, fbar_b = reduced
    tri = ms.tri
    ct = tri.centroids
    psi_c = state.psi_b[tri.tris].mean(axis=1)
    dens = (fbar_b(ct) + fs.gb_plus(ct) - fs.gb_minus(ct)) * psi_c \
        + fs.Gb(ct) * state.bbar_b
    return float(np.sum(tri.areas[:, None] * dens))


def limit_load(cfg: RegimeConfig, state, fs: ForceSystem, geom: Geometry,
               ms: MultiStructureMesh) -> float:
    """Load functional of the limit model; subtracted from the elastic part.

    lplus couples both reduced bodies and carries the junction term
    -abar * Ghat(0) . psi_a(0) (so the energy gains it with a plus sign);
    linf keeps only the string unknowns and adds the frozen plate work;
    lzero keeps only the membrane unknowns and adds the frozen beam work.
    """
    reduced = reduced_loads(fs, geom)
    iv = ms.interval
    tri = ms.tri
    if cfg.regime == "lplus":
        _require(state.psi_a is not None and state.bbar_a is not None,
                 "lplus limit state needs psi_a and bbar_a")
        _require(state.psi_b is not None and state.bbar_b is not None,
                 "lplus limit state needs psi_b and bbar_b")
        total = _beam_load(state, fs, geom, ms, reduced)
        total += cfg.ell * _membrane_load(state, fs, ms, reduced)
        Ghat0 = fs.Ghat(np.zeros((1, 2)))[0]
        total -= geom.abar * float(Ghat0 @ state.psi_a[0])
        return total
    if cfg.regime == "linf":
        _require(state.psi_a is not None and state.bbar_a is not None,
                 "linf limit state needs psi_a and bbar_a")
        total = _beam_load(state, fs, geom, ms, reduced)
        _, _, fbar_b = reduced
        ct = tri.centroids
        fb2 = fbar_b(ct)[:, :2] + fs.gb_plus(ct)[:, :2] - fs.gb_minus(ct)[:, :2]
        frozen = np.sum(fb2 * ct, axis=1) + fs.Gb(ct)[:, 2]
        total += float(np.sum(tri.areas * frozen))
        return total
    _require(state.psi_b is not None and state.bbar_b is not None,
             "lzero limit state needs psi_b and bbar_b")
    total = _membrane_load(state, fs, ms, reduced)
    fbar_a, gbar_a, _ = reduced
    zm = iv.mid
    fa3 = fbar_a(zm)[:, 2] + gbar_a(zm)[:, 2]
    Ga = fs.Ga(zm)
    frozen = fa3 * zm + geom.abar * (Ga[:, 0, 0] + Ga[:, 1, 1])
    total += iv.dz * float(np.sum(frozen))
    return total


def _require(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# divergence-form loads
# ---------------------------------------------------------------------------

def divergence_work(dl: DivergenceLoads, state, cfg: RegimeConfig,
                    geom: Geometry, ms: MultiStructureMesh) -> float:
    """Limit divergence-form load:
    int_0^L Ha_alpha : bbar_a + int_tube Ha_3 . psi_a'
    + int_plate Hb_alpha : grad psi_b + int_section Hb_3 . bbar_b.
    Frozen bodies contribute through their rigid limit fields."""
    iv = ms.interval
    tri = ms.tri
    zm = iv.mid

    if cfg.regime in ("lplus", "linf"):
        bbar_a = state.bbar_a
        dpsi = iv.derivative(state.psi_a)
    else:
        bbar_a = np.tile(geom.abar * np.eye(3)[:, :2], (iv.n, 1, 1))
        dpsi = np.tile(np.array([0.0, 0.0, 1.0]), (iv.n, 1))

    term1 = iv.dz * float(np.sum(dl.Ha_alpha(zm) * bbar_a))

    sec = ms.hexA.face_centers("bottom").reshape(-1, 2)
    w_sec = ms.hexA.h[0] * ms.hexA.h[1]
    pts = np.concatenate([
        np.tile(sec, (iv.n, 1)),
        np.repeat(zm, len(sec))[:, None],
    ], axis=1)
    Ha3 = dl.Ha_3(pts).reshape(iv.n, len(sec), 3)
    term2 = iv.dz * w_sec * float(np.sum(Ha3.sum(axis=1) * dpsi))

    if cfg.regime in ("lplus", "lzero"):
        gpsi = tri.gradient(state.psi_b)
        bbar_b = state.bbar_b
    else:
        gpsi = np.tile(np.eye(3)[:, :2], (tri.n_tris, 1, 1))
        bbar_b = np.tile(np.array([0.0, 0.0, 1.0]), (tri.n_tris, 1))

    zb = 0.5 * (ms.hexB.zs[:-1] + ms.hexB.zs[1:])
    dzb = ms.hexB.h[2]
    ct = tri.centroids
    pts_b = np.concatenate([
        np.repeat(ct, len(zb), axis=0),
        np.tile(zb, len(ct))[:, None],
    ], axis=1)
    Hb = dl.Hb_alpha(pts_b).reshape(len(ct), len(zb), 3, 2).sum(axis=1) * dzb
    term3 = float(np.sum(tri.areas[:, None, None] * Hb * gpsi))

    term4 = float(np.sum(tri.areas[:, None] * dl.Hb_3(ct) * bbar_b))
    return term1 + term2 + term3 + term4


def divergence_work_eps(dl: DivergenceLoads, psi_a: np.ndarray,
                        psi_b: np.ndarray, ms: MultiStructureMesh,
                        r_eps: float, h_eps: float) -> float:
    """Raw quadrature of H against the scaled gradients on both bodies."""
    hexA, hexB = ms.hexA, ms.hexB
    _check_hex_field(psi_a, hexA, "psi_a")
    _check_hex_field(psi_b, hexB, "psi_b")

    G = hexA.center_gradient(psi_a).reshape(-1, 3, 3)
    c = hexA.cell_centers.reshape(-1, 3)
    Ha = np.concatenate([dl.Ha_alpha(c[:, 2]),
                         dl.Ha_3(c)[:, :, None]], axis=2)
    Gs = G.copy()
    Gs[:, :, :2] /= r_eps
    tube = hexA.cell_volume * float(np.sum(Ha * Gs))

    G = hexB.center_gradient(psi_b).reshape(-1, 3, 3)
    c = hexB.cell_centers.reshape(-1, 3)
    Hb = np.concatenate([dl.Hb_alpha(c),
                         dl.Hb_3(c[:, :2])[:, :, None]], axis=2)
    Gs = G.copy()
    Gs[:, :, 2] /= h_eps
    plate = hexB.cell_volume * float(np.sum(Hb * Gs))
    return tube + plate


def forces_from_H(H: np.ndarray, hexmesh: HexMesh):
    """Classical loads of a nodal matrix field: f = -row divergence of H at
    nodes (central differences inside, one-sided at the boundary) and g = H nu
    at boundary face centers. Returns (f, faces) with faces a list of
    (centers, areas, g) per wall."""
    if H.shape != hexmesh.node_shape[:3] + (3, 3):
        raise ValueError("H must be a nodal 3x3 field on the mesh")
    f = np.zeros(hexmesh.node_shape)
    for j in range(3):
        f -= np.gradient(H[..., j], hexmesh.h[j], axis=j)

    faces = []
    area_xy = hexmesh.h[0] * hexmesh.h[1]
    area_xz = hexmesh.h[0] * hexmesh.h[2]
    area_yz = hexmesh.h[1] * hexmesh.h[2]
    specs = [
        (H[0], hexmesh.nodes[0], np.array([-1.0, 0, 0]), area_yz),
        (H[-1], hexmesh.nodes[-1], np.array([1.0, 0, 0]), area_yz),
        (H[:, 0], hexmesh.nodes[:, 0], np.array([0, -1.0, 0]), area_xz),
        (H[:, -1], hexmesh.nodes[:, -1], np.array([0, 1.0, 0]), area_xz),
        (H[:, :, 0], hexmesh.nodes[:, :, 0], np.array([0, 0, -1.0]), area_xy),
        (H[:, :, -1], hexmesh.nodes[:, :, -1], np.array([0, 0, 1.0]), area_xy),
    ]
    for Hw, Xw, nu, area in specs:
        s = Hw[:-1] + Hw[1:]
        Hc = (s[:, :-1] + s[:, 1:]) / 4.0
        s = Xw[:-1] + Xw[1:]
        Xc = (s[:, :-1] + s[:, 1:]) / 4.0
        g = Hc.reshape(-1, 3, 3) @ nu
        faces.append((Xc.reshape(-1, 3), np.full(g.shape[0], area), g))
    return f, faces


def green_residual(H: np.ndarray, hexmesh: HexMesh, theta, grad_theta) -> float:
    """|int H : grad theta - int f . theta - sum_faces int g . theta| for a
    smooth test field theta with analytic gradient."""
    f, faces = forces_from_H(H, hexmesh)
    c = hexmesh.cell_centers.reshape(-1, 3)
    Hc = _cell_center_values(H.reshape(H.shape[:3] + (9,))).reshape(-1, 3, 3)
    lhs = hexmesh.cell_volume * float(np.sum(Hc * grad_theta(c)))
    fc = _cell_center_values(f).reshape(-1, 3)
    body = hexmesh.cell_volume * float(np.sum(fc * theta(c)))
    surf = 0.0
    for centers, areas, g in faces:
        surf += float(np.sum(areas[:, None] * g * theta(centers)))
    return abs(lhs - body - surf)


def check_compatibility(fs: ForceSystem, cfg: RegimeConfig, eps_index: int,
                        ms: MultiStructureMesh, tol: float = 1e-10) -> bool:
    """Vanishing total resultant of the epsilon-level loads on the physical
    structure, evaluated on the fixed domains with Jacobians r^2 (tube
    volume), r (tube lateral surface), h (plate volume), 1 (plate faces)."""
    epsf = scale_forces(fs, cfg, eps_index)
    r, h = epsf.r, epsf.h
    hexA, hexB = ms.hexA, ms.hexB

    c = hexA.cell_centers.reshape(-1, 3)
    R = r**2 * hexA.cell_volume * epsf.fa_eps(c).sum(axis=0)

    fc, area, normals = hexA.lateral_faces()
    R += r * (area[:, None] * epsf.ga_eps(fc, normals)).sum(axis=0)

    c = hexB.cell_centers.reshape(-1, 3)
    R += h * hexB.cell_volume * epsf.fb_eps(c).sum(axis=0)

    out = _out_column_mask(ms)
    c2 = hexB.face_centers("top").reshape(-1, 2)[out]
    ab = hexB.h[0] * hexB.h[1]
    R += ab * epsf.gplus_eps(c2).sum(axis=0)
    R += ab * epsf.gminus_eps_out(c2).sum(axis=0)

    _, fp_pts, wfp = _footprint_quadrature(ms)
    R += wfp * epsf.gminus_eps_fp(fp_pts).sum(axis=0)
    return bool(np.max(np.abs(R)) <= tol)
