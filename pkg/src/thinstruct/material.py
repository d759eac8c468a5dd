"""Stored-energy densities with p-growth and their anisotropic rescalings.

Shipped kinds:
  RadialQuartic    W(F) = (|F|^2 - 1)^2, growth exponent 4. Its convex
                   envelope is known in closed form, which makes it the
                   reference case for the envelope solver.
  PWellDist        W(F) = dist^p(F, K)/C for a rotation well set K. Vanishes
                   exactly on the wells, so the undeformed state is a natural
                   state.
  QuadraticConvex  W(F) = |F - I|^2. Convex; every envelope collapses to W.
  CustomDensity    arbitrary callable with declared p and C; gradients by
                   central finite differences.

scaled_density_a / scaled_density_b produce the densities
W(r^-1 M_alpha | M_3) and W(M_alpha | h^-1 M_3) used by the fixed-domain
functionals of the thin tube and thin plate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    WellSet,
    dist_to_wells_batch,
    nearest_well_point_batch,
)

__all__ = [
    "EnergyDensity",
    "RadialQuartic",
    "PWellDist",
    "QuadraticConvex",
    "CustomDensity",
    "ScaledDensity",
    "check_p_growth",
    "GrowthReport",
    "scaled_density_a",
    "scaled_density_b",
    "central_fd_gradient",
    "density_from_name",
]

_EYE = np.eye(3)


def central_fd_gradient(fn, F: np.ndarray, step: float | None = None) -> np.ndarray:
    """Central finite-difference gradient of a scalar matrix function.

    The step scales with (1 + |F|) to keep relative truncation error uniform.
    """
    F = np.asarray(F, dtype=float)
    if step is None:
        step = 1e-6 * (1.0 + np.linalg.norm(F))
    G = np.zeros_like(F)
    for idx in np.ndindex(*F.shape):
        Fp = F.copy()
        Fm = F.copy()
        Fp[idx] += step
        Fm[idx] -= step
        G[idx] = (fn(Fp) - fn(Fm)) / (2.0 * step)
    return G


class EnergyDensity:
    """Base class. Subclasses set p, C, optionally wells, and is_convex.

    evaluate/gradient act on one (3, 3) matrix; the *_batch variants act on
    stacks (..., 3, 3) and are what the mesh loops use. Values are immutable
    after construction and all methods are pure.
    """

    kind = "base"
    p: float = 2.0
    C: float = 1.0
    wells: WellSet | None = None
    is_convex: bool = False

    @property
    def q(self) -> float:
        """Conjugate exponent p/(p-1)."""
        return self.p / (self.p - 1.0)

    def evaluate(self, F: np.ndarray) -> float:
        return float(self.evaluate_batch(np.asarray(F, dtype=float)[None])[0])

    def gradient(self, F: np.ndarray) -> np.ndarray:
        return self.gradient_batch(np.asarray(F, dtype=float)[None])[0]

    def evaluate_batch(self, Fs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient_batch(self, Fs: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class RadialQuartic(EnergyDensity):
    """W(F) = (|F|^2 - 1)^2; double-well in the radius |F|, growth p = 4."""

    C: float = 4.0  # two-sided power bounds hold globally with this constant

    kind = "radial_quartic"
    p = 4.0
    wells = None
    is_convex = False

    def evaluate_batch(self, Fs: np.ndarray) -> np.ndarray:
        t2 = np.sum(Fs * Fs, axis=(-2, -1))
        return (t2 - 1.0) ** 2

    def gradient_batch(self, Fs: np.ndarray) -> np.ndarray:
        t2 = np.sum(Fs * Fs, axis=(-2, -1))
        return 4.0 * (t2 - 1.0)[..., None, None] * Fs


def _pwell_default_C(p: float, wells: WellSet, radius: float = 5.0) -> float:
    """Growth constant sized so the declared two-sided bounds hold on |F| <= radius.

    The binding case of the lower bound is a radially aligned matrix at the
    ball edge, where |F|^p - dist^p is largest; the upper bound binds at the
    anti-aligned edge. A 25% margin absorbs off-grid samples.
    """
    amax = max(wells.scales())
    edge = radius - amax * np.sqrt(3.0)
    lower = np.sqrt(max(radius**p - max(edge, 0.0) ** p, 1.0))
    upper = np.sqrt((radius + np.sqrt(3.0)) ** p / (1.0 + radius**p))
    return 1.25 * max(lower, upper)


@dataclass(frozen=True)
class PWellDist(EnergyDensity):
    """W(F) = dist^p(F, K)/C with K = SO(3) or SO(3) union delta*SO(3)."""

    p: float = 2.0
    C: float | None = None
    wells: WellSet = field(default_factory=WellSet.single)

    kind = "p_well_dist"
    is_convex = False

    def __post_init__(self):
        if not (1.0 < self.p < np.inf):
            raise ValueError(f"exponent p must lie in (1, inf), got {self.p}")
        if self.C is None:
            object.__setattr__(self, "C", _pwell_default_C(self.p, self.wells))
        elif self.C <= 0.0:
            raise ValueError(f"growth constant must be positive, got {self.C}")

    def evaluate_batch(self, Fs: np.ndarray) -> np.ndarray:
        return dist_to_wells_batch(Fs, self.wells, self.p) / self.C

    def gradient_batch(self, Fs: np.ndarray) -> np.ndarray:
        # a.e. analytic gradient: p*dist^(p-2)*(F - nearest well point)/C.
        # At a well (dist = 0) any generalized gradient is valid; return 0.
        Fs = np.asarray(Fs, dtype=float)
        P = nearest_well_point_batch(Fs, self.wells)
        diff = Fs - P
        d = np.linalg.norm(diff, axis=(-2, -1))
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(d > 1e-30, d ** (self.p - 2.0), 0.0)
        return (self.p / self.C) * fac[..., None, None] * diff


@dataclass(frozen=True)
class QuadraticConvex(EnergyDensity):
    """W(F) = |F - I|^2. Convex with exact gradient 2(F - I)."""

    C: float = 5.0

    kind = "quadratic_convex"
    p = 2.0
    wells = None
    is_convex = True

    def evaluate_batch(self, Fs: np.ndarray) -> np.ndarray:
        diff = Fs - _EYE
        return np.sum(diff * diff, axis=(-2, -1))

    def gradient_batch(self, Fs: np.ndarray) -> np.ndarray:
        return 2.0 * (Fs - _EYE)


class CustomDensity(EnergyDensity):
    """User-supplied W with declared growth data; FD gradients."""

    kind = "custom"
    is_convex = False

    def __init__(self, fn, p: float, C: float, wells: WellSet | None = None,
                 is_convex: bool = False):
        if not (1.0 < p < np.inf):
            raise ValueError(f"exponent p must lie in (1, inf), got {p}")
        if C <= 0.0:
            raise ValueError(f"growth constant must be positive, got {C}")
        self._fn = fn
        self.p = float(p)
        self.C = float(C)
        self.wells = wells
        self.is_convex = bool(is_convex)

    def evaluate(self, F: np.ndarray) -> float:
        return float(self._fn(np.asarray(F, dtype=float)))

    def gradient(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        return central_fd_gradient(self._fn, F, 1e-6 * (1.0 + np.linalg.norm(F)))

    def evaluate_batch(self, Fs: np.ndarray) -> np.ndarray:
        Fs = np.asarray(Fs, dtype=float)
        flat = Fs.reshape(-1, 3, 3)
        out = np.array([self._fn(F) for F in flat], dtype=float)
        return out.reshape(Fs.shape[:-2])

    def gradient_batch(self, Fs: np.ndarray) -> np.ndarray:
        Fs = np.asarray(Fs, dtype=float)
        flat = Fs.reshape(-1, 3, 3)
        out = np.stack([self.gradient(F) for F in flat])
        return out.reshape(Fs.shape)


@dataclass(frozen=True)
class GrowthReport:
    holds: bool
    witnesses: tuple  # (F, W(F), lower bound, upper bound) per violation


def check_p_growth(W: EnergyDensity, samples) -> GrowthReport:
    """Verify (1/C)|F|^p - C <= W(F) <= C(1 + |F|^p) on every sample."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty sample list")
    bad = []
    for F in samples:
        F = np.asarray(F, dtype=float)
        val = W.evaluate(F)
        np_ = np.linalg.norm(F) ** W.p
        lo = np_ / W.C - W.C
        hi = W.C * (1.0 + np_)
        if not (lo <= val + 1e-12 and val <= hi + 1e-12):
            bad.append((F, val, lo, hi))
    return GrowthReport(holds=not bad, witnesses=tuple(bad))


class ScaledDensity(EnergyDensity):
    """W composed with an invertible column scaling.

    mode 'a': F -> W(r^-1 F_alpha | F_3); mode 'b': F -> W(F_alpha | h^-1 F_3).
    Convexity survives the linear precomposition, so the flag carries over.
    """

    kind = "scaled"

    def __init__(self, base: EnergyDensity, scale: float, mode: str):
        if scale <= 0.0:
            raise ValueError(f"scale must be positive, got {scale}")
        if mode not in ("a", "b"):
            raise ValueError(f"mode must be 'a' or 'b', got {mode!r}")
        self.base = base
        self.scale = float(scale)
        self.mode = mode
        self.p = base.p
        self.C = base.C
        self.wells = base.wells
        self.is_convex = base.is_convex

    def _map(self, Fs: np.ndarray) -> np.ndarray:
        G = np.array(Fs, dtype=float, copy=True)
        if self.mode == "a":
            G[..., :, :2] /= self.scale
        else:
            G[..., :, 2] /= self.scale
        return G

    def evaluate_batch(self, Fs: np.ndarray) -> np.ndarray:
        return self.base.evaluate_batch(self._map(Fs))

    def gradient_batch(self, Fs: np.ndarray) -> np.ndarray:
        G = self.base.gradient_batch(self._map(Fs))
        G = np.array(G, copy=True)
        if self.mode == "a":
            G[..., :, :2] /= self.scale
        else:
            G[..., :, 2] /= self.scale
        return G


def scaled_density_a(W: EnergyDensity, r: float) -> ScaledDensity:
    """Density of the rescaled tube: M -> W(r^-1 M_alpha | M_3)."""
    return ScaledDensity(W, r, "a")


def scaled_density_b(W: EnergyDensity, h: float) -> ScaledDensity:
    """Density of the rescaled plate: M -> W(M_alpha | h^-1 M_3)."""
    return ScaledDensity(W, h, "b")


def density_from_name(kind: str, **params) -> EnergyDensity:
    """Construct a shipped density from configuration data."""
    kind = kind.lower().replace("-", "_")
    if kind == "radial_quartic":
        C = params.pop("C", 4.0)
        _reject_extra(params)
        return RadialQuartic(C=C)
    if kind == "quadratic_convex":
        C = params.pop("C", 5.0)
        _reject_extra(params)
        return QuadraticConvex(C=C)
    if kind == "p_well_dist":
        p = params.pop("p", 2.0)
        C = params.pop("C", None)
        delta = params.pop("delta", None)
        double = params.pop("double_well", delta is not None)
        _reject_extra(params)
        wells = WellSet.double(delta if delta is not None else 1.3) if double \
            else WellSet.single()
        return PWellDist(p=p, C=C, wells=wells)
    raise ValueError(f"unknown density kind {kind!r}")


def _reject_extra(params: dict):
    if params:
        raise ValueError(f"unknown density parameters: {sorted(params)}")
