"""Fixed-domain discretizations for the tube-on-plate structure.

The tube domain (0,L)-cylinder over a square cross section and the plate
domain (square times (-1,0)) are meshed with uniform tensor hexahedra; the
reduced models live on an interval mesh (string) and a graded triangulation
of the plate cross section (membrane). The epsilon-dependent coupling is a
master-slave map: each bottom node of the tube mesh is interpolated
bilinearly from the plate top face at the shrunk position r_eps * x_alpha.

Hex gradients use the trilinear shape-function gradient at the cell center
(one-point quadrature): the average of the four parallel edge differences
per direction. Both meshes are immutable after construction; assembly uses
vectorized numpy reductions, so sums are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Geometry",
    "MeshResolution",
    "HexMesh",
    "IntervalMesh",
    "TriMesh",
    "MultiStructureMesh",
    "DeformationState",
    "build_multistructure",
    "apply_junction",
    "apply_junction_adjoint",
    "average_bbar_a",
    "average_bbar_b",
    "annulus_p_capacity",
    "dump_node_field",
]


@dataclass(frozen=True)
class Geometry:
    """Square cross sections (half-widths sa < sb, both centered) and tube length L."""

    sa: float = 0.25
    sb: float = 1.0
    L: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.sa < self.sb):
            raise ValueError(
                f"cross sections need 0 < sa < sb, got sa={self.sa}, sb={self.sb}")
        if self.L <= 0.0:
            raise ValueError(f"tube length must be positive, got {self.L}")

    @property
    def abar(self) -> float:
        """Cross-section area of the tube, (2 sa)^2."""
        return (2.0 * self.sa) ** 2


@dataclass(frozen=True)
class MeshResolution:
    na: int = 8       # tube cells per cross-section axis
    nza: int = 16     # tube cells along the axis
    nb: int = 24      # plate cells per in-plane axis
    nhb: int = 6      # plate cells through the thickness
    n_interval: int = 64

    def __post_init__(self):
        for name in ("na", "nza", "nb", "nhb", "n_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class HexMesh:
    """Uniform tensor hex mesh of a box, with one-point-quadrature gradients."""

    def __init__(self, lo, hi, ncells):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.ncells = tuple(int(n) for n in ncells)
        nx, ny, nz = self.ncells
        self.h = (self.hi - self.lo) / np.array([nx, ny, nz])
        self.xs = self.lo[0] + self.h[0] * np.arange(nx + 1)
        self.ys = self.lo[1] + self.h[1] * np.arange(ny + 1)
        self.zs = self.lo[2] + self.h[2] * np.arange(nz + 1)
        self.nodes = np.stack(
            np.meshgrid(self.xs, self.ys, self.zs, indexing="ij"), axis=-1)
        self.cell_volume = float(np.prod(self.h))
        cx = 0.5 * (self.xs[:-1] + self.xs[1:])
        cy = 0.5 * (self.ys[:-1] + self.ys[1:])
        cz = 0.5 * (self.zs[:-1] + self.zs[1:])
        self.cell_centers = np.stack(
            np.meshgrid(cx, cy, cz, indexing="ij"), axis=-1)

    @property
    def node_shape(self):
        nx, ny, nz = self.ncells
        return (nx + 1, ny + 1, nz + 1, 3)

    def total_volume(self) -> float:
        return self.cell_volume * int(np.prod(self.ncells))

    def center_gradient(self, field: np.ndarray) -> np.ndarray:
        """Cell-center gradient of a nodal (..,3) field: (nx,ny,nz,3,3) columns d1,d2,d3."""
        A = field[1:] - field[:-1]
        B = A[:, :-1] + A[:, 1:]
        G1 = (B[:, :, :-1] + B[:, :, 1:]) / (4.0 * self.h[0])
        A = field[:, 1:] - field[:, :-1]
        B = A[:-1] + A[1:]
        G2 = (B[:, :, :-1] + B[:, :, 1:]) / (4.0 * self.h[1])
        A = field[:, :, 1:] - field[:, :, :-1]
        B = A[:-1] + A[1:]
        G3 = (B[:, :-1] + B[:, 1:]) / (4.0 * self.h[2])
        return np.stack([G1, G2, G3], axis=-1)

    def center_gradient_adjoint(self, S: np.ndarray) -> np.ndarray:
        """Adjoint of center_gradient: scatter (nx,ny,nz,3,3) sensitivities to nodes."""
        nx, ny, nz = self.ncells
        out = np.zeros(self.node_shape)

        T = S[..., 0] / (4.0 * self.h[0])
        B = np.zeros((nx, ny, nz + 1, 3))
        B[:, :, :-1] += T
        B[:, :, 1:] += T
        A = np.zeros((nx, ny + 1, nz + 1, 3))
        A[:, :-1] += B
        A[:, 1:] += B
        out[1:] += A
        out[:-1] -= A

        T = S[..., 1] / (4.0 * self.h[1])
        B = np.zeros((nx, ny, nz + 1, 3))
        B[:, :, :-1] += T
        B[:, :, 1:] += T
        A = np.zeros((nx + 1, ny, nz + 1, 3))
        A[:-1] += B
        A[1:] += B
        out[:, 1:] += A
        out[:, :-1] -= A

        T = S[..., 2] / (4.0 * self.h[2])
        B = np.zeros((nx, ny + 1, nz, 3))
        B[:, :-1] += T
        B[:, 1:] += T
        A = np.zeros((nx + 1, ny + 1, nz, 3))
        A[:-1] += B
        A[1:] += B
        out[:, :, 1:] += A
        out[:, :, :-1] -= A
        return out

    def face_layer_mean(self, field: np.ndarray, k: int) -> np.ndarray:
        """Per-column mean of the 4 nodes of each face in node layer k: (nx,ny,3)."""
        L = field[:, :, k]
        return 0.25 * (L[:-1, :-1] + L[1:, :-1] + L[:-1, 1:] + L[1:, 1:])

    def locate_face_cells(self, points: np.ndarray):
        """In-plane cell indices and bilinear weights for points (N,2).

        Returns (ij (N,2) int, w (N,4)) with corner order
        (i,j), (i+1,j), (i,j+1), (i+1,j+1). Points clipped into the box.
        """
        pts = np.asarray(points, dtype=float)
        nx, ny = self.ncells[0], self.ncells[1]
        fx = np.clip((pts[:, 0] - self.lo[0]) / self.h[0], 0.0, nx - 1e-12)
        fy = np.clip((pts[:, 1] - self.lo[1]) / self.h[1], 0.0, ny - 1e-12)
        i = np.minimum(fx.astype(int), nx - 1)
        j = np.minimum(fy.astype(int), ny - 1)
        xi = fx - i
        eta = fy - j
        w = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta),
                      (1 - xi) * eta, xi * eta], axis=1)
        return np.stack([i, j], axis=1), w

    def interp_layer(self, field: np.ndarray, k: int, ij: np.ndarray,
                     w: np.ndarray) -> np.ndarray:
        """Bilinear interpolation in node layer k with precomputed cells/weights."""
        L = field[:, :, k]
        i, j = ij[:, 0], ij[:, 1]
        return (w[:, 0, None] * L[i, j] + w[:, 1, None] * L[i + 1, j]
                + w[:, 2, None] * L[i, j + 1] + w[:, 3, None] * L[i + 1, j + 1])

    def lateral_faces(self):
        """Quadrature for the 4 side walls: (centers (M,3), areas (M,), normals (M,3))."""
        nx, ny, nz = self.ncells
        cy = 0.5 * (self.ys[:-1] + self.ys[1:])
        cx = 0.5 * (self.xs[:-1] + self.xs[1:])
        cz = 0.5 * (self.zs[:-1] + self.zs[1:])
        centers, areas, normals = [], [], []
        for x0, nrm in ((self.lo[0], [-1, 0, 0]), (self.hi[0], [1, 0, 0])):
            Y, Z = np.meshgrid(cy, cz, indexing="ij")
            C = np.stack([np.full(Y.size, x0), Y.ravel(), Z.ravel()], axis=1)
            centers.append(C)
            areas.append(np.full(C.shape[0], self.h[1] * self.h[2]))
            normals.append(np.tile(nrm, (C.shape[0], 1)).astype(float))
        for y0, nrm in ((self.lo[1], [0, -1, 0]), (self.hi[1], [0, 1, 0])):
            X, Z = np.meshgrid(cx, cz, indexing="ij")
            C = np.stack([X.ravel(), np.full(X.size, y0), Z.ravel()], axis=1)
            centers.append(C)
            areas.append(np.full(C.shape[0], self.h[0] * self.h[2]))
            normals.append(np.tile(nrm, (C.shape[0], 1)).astype(float))
        return np.vstack(centers), np.concatenate(areas), np.vstack(normals)

    def face_centers(self, k_cellface: str):
        """In-plane face-center coordinates (nx, ny, 2) of the top or bottom face."""
        cx = 0.5 * (self.xs[:-1] + self.xs[1:])
        cy = 0.5 * (self.ys[:-1] + self.ys[1:])
        X, Y = np.meshgrid(cx, cy, indexing="ij")
        if k_cellface not in ("top", "bottom"):
            raise ValueError("face must be 'top' or 'bottom'")
        return np.stack([X, Y], axis=-1)


class IntervalMesh:
    """Uniform mesh of (0, L) with n segments; midpoint quadrature."""

    def __init__(self, n: int, L: float):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = int(n)
        self.L = float(L)
        self.nodes = np.linspace(0.0, L, n + 1)
        self.mid = 0.5 * (self.nodes[:-1] + self.nodes[1:])
        self.dz = L / n

    def derivative(self, field: np.ndarray) -> np.ndarray:
        return (field[1:] - field[:-1]) / self.dz

    def derivative_adjoint(self, S: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n + 1,) + S.shape[1:])
        out[1:] += S / self.dz
        out[:-1] -= S / self.dz
        return out


def _graded_axis(sb: float) -> np.ndarray:
    """Symmetric axis with three grading levels toward 0: 21 nodes on [-sb, sb]."""
    half = np.concatenate([
        np.linspace(0.0, sb / 16.0, 4),
        np.linspace(sb / 16.0, sb / 4.0, 4)[1:],
        np.linspace(sb / 4.0, sb, 5)[1:],
    ])
    return np.concatenate([-half[::-1], half[1:]])


class TriMesh:
    """Graded triangulation of the plate cross section, origin as a node."""

    def __init__(self, sb: float):
        self.sb = float(sb)
        self.axis = _graded_axis(self.sb)
        m = self.axis.size
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        self.points = np.stack([X.ravel(), Y.ravel()], axis=1)
        tris = []
        for i in range(m - 1):
            for j in range(m - 1):
                a = i * m + j
                b = (i + 1) * m + j
                c = (i + 1) * m + j + 1
                d = i * m + j + 1
                tris.append((a, b, c))
                tris.append((a, c, d))
        self.tris = np.array(tris, dtype=int)
        p = self.points
        e1 = p[self.tris[:, 1]] - p[self.tris[:, 0]]
        e2 = p[self.tris[:, 2]] - p[self.tris[:, 0]]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.areas = 0.5 * np.abs(det)
        E = np.stack([e1, e2], axis=1)  # rows are the edge vectors
        self.Einv = np.linalg.inv(E)
        self.centroids = (p[self.tris[:, 0]] + p[self.tris[:, 1]]
                          + p[self.tris[:, 2]]) / 3.0
        self.m = m
        half = (m - 1) // 2
        self.origin_node = half * m + half
        onb = (np.abs(self.points[:, 0]) >= self.sb - 1e-12) \
            | (np.abs(self.points[:, 1]) >= self.sb - 1e-12)
        self.boundary_nodes = np.nonzero(onb)[0]

    @property
    def n_tris(self) -> int:
        return self.tris.shape[0]

    def gradient(self, field: np.ndarray) -> np.ndarray:
        """P1 gradient per triangle of a nodal (Np, d) field: (Nt, d, 2)."""
        dV = np.stack([field[self.tris[:, 1]] - field[self.tris[:, 0]],
                       field[self.tris[:, 2]] - field[self.tris[:, 0]]], axis=1)
        g = np.einsum("tke,ted->tkd", self.Einv, dV)  # (Nt, 2, d)
        return np.transpose(g, (0, 2, 1))

    def gradient_adjoint(self, S: np.ndarray) -> np.ndarray:
        """Adjoint of gradient: (Nt, d, 2) sensitivities to nodal (Np, d)."""
        s = np.transpose(S, (0, 2, 1))  # (Nt, 2, d)
        dV_adj = np.einsum("tek,ted->tkd", self.Einv, s)  # (Nt, 2, d)
        out = np.zeros((self.points.shape[0], S.shape[1]))
        np.add.at(out, self.tris[:, 1], dV_adj[:, 0])
        np.add.at(out, self.tris[:, 2], dV_adj[:, 1])
        np.add.at(out, self.tris[:, 0], -dV_adj[:, 0] - dV_adj[:, 1])
        return out

    def node_values(self, fn) -> np.ndarray:
        return np.asarray(fn(self.points))

    def locate(self, pts: np.ndarray) -> np.ndarray:
        """Triangle index containing each point (clipped to the square)."""
        pts = np.asarray(pts, dtype=float)
        m = self.m
        out = np.empty(pts.shape[0], dtype=int)
        for k, (x, y) in enumerate(np.clip(pts, -self.sb, self.sb)):
            i = min(np.searchsorted(self.axis, x, side="right") - 1, m - 2)
            j = min(np.searchsorted(self.axis, y, side="right") - 1, m - 2)
            i = max(i, 0)
            j = max(j, 0)
            quad = 2 * (i * (m - 1) + j)
            # lower triangle (a,b,c) covers the part below the a-c diagonal,
            # which in its edge coordinates is lam_0 >= 0
            t0 = self.tris[quad]
            p0 = self.points[t0[0]]
            d = np.array([x, y]) - p0
            lam = self.Einv[quad].T @ d  # barycentric: x - p0 = E^T lam
            out[k] = quad if lam[0] >= -1e-12 else quad + 1
        return out

    def interpolate(self, field: np.ndarray, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        idx = self.locate(pts)
        t = self.tris[idx]
        p0 = self.points[t[:, 0]]
        d = pts - p0
        lam = np.einsum("tek,te->tk", self.Einv[idx], d)
        l0 = 1.0 - lam[:, 0] - lam[:, 1]
        return (l0[:, None] * field[t[:, 0]] + lam[:, 0, None] * field[t[:, 1]]
                + lam[:, 1, None] * field[t[:, 2]])


@dataclass
class DeformationState:
    """Nodal fields of one configuration.

    For the epsilon problems psi_a / psi_b live on the hex meshes; for limit
    problems psi_a lives on the interval, psi_b on the triangulation, and the
    averaged-gradient fields bbar_a (per segment, 3x2) and bbar_b (per
    triangle, 3) carry the extra limit unknowns. Unused slots stay None.
    """

    psi_a: np.ndarray | None = None
    psi_b: np.ndarray | None = None
    bbar_a: np.ndarray | None = None
    bbar_b: np.ndarray | None = None

    def copy(self) -> "DeformationState":
        cp = lambda a: None if a is None else a.copy()
        return DeformationState(cp(self.psi_a), cp(self.psi_b),
                                cp(self.bbar_a), cp(self.bbar_b))


@dataclass
class MultiStructureMesh:
    geometry: Geometry
    resolution: MeshResolution
    r_eps: float
    hexA: HexMesh
    hexB: HexMesh
    interval: IntervalMesh
    tri: TriMesh
    junction_ij: np.ndarray = field(repr=False)   # (na+1, na+1, 2) plate cells
    junction_w: np.ndarray = field(repr=False)    # (na+1, na+1, 4) weights

    def junction_flat(self):
        n = self.junction_ij.shape[0]
        return self.junction_ij.reshape(n * n, 2), self.junction_w.reshape(n * n, 4)


def build_multistructure(geom: Geometry, resolution: MeshResolution,
                         r_eps: float) -> MultiStructureMesh:
    """Mesh both fixed domains and populate the junction interpolation map."""
    if r_eps <= 0.0:
        raise ValueError(f"r_eps must be positive, got {r_eps}")
    if r_eps * geom.sa >= geom.sb:
        raise ValueError(
            f"junction footprint must stay inside the plate: "
            f"r_eps*sa = {r_eps * geom.sa} >= sb = {geom.sb}")
    res = resolution
    hexA = HexMesh([-geom.sa, -geom.sa, 0.0], [geom.sa, geom.sa, geom.L],
                   (res.na, res.na, res.nza))
    hexB = HexMesh([-geom.sb, -geom.sb, -1.0], [geom.sb, geom.sb, 0.0],
                   (res.nb, res.nb, res.nhb))
    interval = IntervalMesh(res.n_interval, geom.L)
    tri = TriMesh(geom.sb)

    bottom = hexA.nodes[:, :, 0, :2]  # (na+1, na+1, 2)
    targets = r_eps * bottom.reshape(-1, 2)
    ij, w = hexB.locate_face_cells(targets)
    n = res.na + 1
    return MultiStructureMesh(
        geometry=geom, resolution=res, r_eps=r_eps, hexA=hexA, hexB=hexB,
        interval=interval, tri=tri,
        junction_ij=ij.reshape(n, n, 2), junction_w=w.reshape(n, n, 4))


def junction_trace(ms: MultiStructureMesh, psi_b: np.ndarray) -> np.ndarray:
    """Plate top-face values interpolated at the shrunk tube bottom nodes."""
    ij, w = ms.junction_flat()
    vals = ms.hexB.interp_layer(psi_b, -1, ij, w)
    n = ms.resolution.na + 1
    return vals.reshape(n, n, 3)


def apply_junction(state: DeformationState,
                   ms: MultiStructureMesh) -> DeformationState:
    """Overwrite the tube bottom layer with interpolated plate values (master-slave)."""
    out = state.copy()
    out.psi_a[:, :, 0, :] = junction_trace(ms, state.psi_b)
    return out


def apply_junction_adjoint(ms: MultiStructureMesh, grad_a: np.ndarray):
    """Scatter bottom-layer sensitivities of psi_a to the plate top layer.

    Returns (grad_a with its bottom layer zeroed, additive contribution to
    grad_b). Together with apply_junction this realizes the chain rule of the
    elimination map.
    """
    ij, w = ms.junction_flat()
    gb = np.zeros(ms.hexB.node_shape)
    gbot = grad_a[:, :, 0, :].reshape(-1, 3)
    i, j = ij[:, 0], ij[:, 1]
    top = gb[:, :, -1]
    np.add.at(top, (i, j), w[:, 0, None] * gbot)
    np.add.at(top, (i + 1, j), w[:, 1, None] * gbot)
    np.add.at(top, (i, j + 1), w[:, 2, None] * gbot)
    np.add.at(top, (i + 1, j + 1), w[:, 3, None] * gbot)
    out_a = grad_a.copy()
    out_a[:, :, 0, :] = 0.0
    return out_a, gb


def average_bbar_a(psi_a: np.ndarray, r_eps: float,
                   ms: MultiStructureMesh) -> np.ndarray:
    """Layer-wise cross-section integral of the in-plane gradient over r_eps.

    Integral convention: the identity-type state psi = (r_eps x_alpha, x3)
    returns abar * I_alpha on every layer. Shape (nza, 3, 2).
    """
    G = ms.hexA.center_gradient(psi_a)[..., :2]
    area = ms.hexA.h[0] * ms.hexA.h[1]
    return area * G.sum(axis=(0, 1)) / r_eps


def average_bbar_b(psi_b: np.ndarray, h_eps: float,
                   ms: MultiStructureMesh) -> np.ndarray:
    """Per-column difference quotient of top and bottom face means over h_eps.

    The thickness integral of grad_3 telescopes, so this equals the averaged
    scaled vertical gradient exactly. Shape (nb, nb, 3).
    """
    top = ms.hexB.face_layer_mean(psi_b, -1)
    bot = ms.hexB.face_layer_mean(psi_b, 0)
    return (top - bot) / h_eps


def annulus_p_capacity(p: float, r: float, fem_resolution: int = 400):
    """p-capacity of the annulus between radii r and sqrt(r).

    Returns (closed_form, fem_estimate). The estimate minimizes the radial
    p-energy over piecewise-linear profiles on a geometric grid; ring
    integrals of piecewise-constant slopes are exact, the minimizer over the
    unit-drop constraint is closed form, so the estimate is a true upper
    bound and non-increasing under refinement (nested geometric grids).
    """
    if not (1.0 < p <= 2.0):
        raise ValueError(f"p must lie in (1, 2], got {p}")
    if not (0.0 < r < 1.0):
        raise ValueError(f"r must lie in (0, 1), got {r}")
    if fem_resolution < 1:
        raise ValueError("fem_resolution must be >= 1")

    if p == 2.0:
        closed = 2.0 * np.pi / (-np.log(np.sqrt(r)))
    else:
        expo_half = (p - 2.0) / (2.0 * (p - 1.0))
        expo_full = (p - 2.0) / (p - 1.0)
        closed = 2.0 * np.pi * (abs(2.0 - p) / (p - 1.0)) ** (p - 1.0) \
            * abs(r ** expo_half - r ** expo_full) ** (1.0 - p)

    n = int(fem_resolution)
    a, b = r, np.sqrt(r)
    rho = a * (b / a) ** (np.arange(n + 1) / n)
    drho = np.diff(rho)
    c = np.pi * (rho[1:] ** 2 - rho[:-1] ** 2) / drho ** p
    w = c ** (-1.0 / (p - 1.0))
    fem = float(np.sum(c * w ** p) / np.sum(w) ** p)
    return float(closed), fem


def dump_node_field(path, coords: np.ndarray, values: np.ndarray) -> None:
    """Write a nodal vector field as CSV rows x,y,z,v1,v2,v3."""
    C = coords.reshape(-1, 3)
    V = values.reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("x,y,z,v1,v2,v3\n")
        for (x, y, z), (v1, v2, v3) in zip(C, V):
            fh.write(f"{x:.12g},{y:.12g},{z:.12g},{v1:.12g},{v2:.12g},{v3:.12g}\n")
