"""Stored energy densities: values, gradients, growth bounds, rescaling."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thinstruct import (
    PWellDist,
    QuadraticConvex,
    RadialQuartic,
    WellSet,
    density_from_name,
    random_rotation,
)
from thinstruct.material import (
    CustomDensity,
    central_fd_gradient,
    check_p_growth,
    scaled_density_a,
    scaled_density_b,
)

mat3 = arrays(
    float,
    (3, 3),
    elements=st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False),
)

# the declared growth constants are calibrated for |F| <= 5
mat3_growth = mat3.map(
    lambda F: F if np.linalg.norm(F) <= 5.0 else 5.0 * F / np.linalg.norm(F)
)

ALL = [RadialQuartic(), PWellDist(p=2.0), PWellDist(p=3.0), QuadraticConvex()]


def test_radial_quartic_values():
    W = RadialQuartic()
    assert W.evaluate(np.zeros((3, 3))) == pytest.approx(1.0)
    assert W.evaluate(np.eye(3)) == pytest.approx(4.0)
    F = np.eye(3)
    F[0, 0] = 0.0  # |F|^2 = 2, one unit above the minimizing shell
    assert W.evaluate(F) == pytest.approx(1.0)
    shell = np.eye(3) / np.sqrt(3.0)  # |F| = 1
    assert W.evaluate(shell) == pytest.approx(0.0, abs=1e-14)
    assert W.p == 4.0 and not W.is_convex and W.kind == "radial_quartic"


def test_quadratic_convex_values():
    W = QuadraticConvex()
    assert W.evaluate(np.eye(3)) == pytest.approx(0.0, abs=1e-15)
    assert W.evaluate(np.zeros((3, 3))) == pytest.approx(3.0)
    assert W.p == 2.0 and W.is_convex


def test_p_well_vanishes_exactly_on_wells(rng):
    K = WellSet.double(1.4)
    W = PWellDist(p=2.5, wells=K)
    R = random_rotation(rng)
    assert W.evaluate(R) == pytest.approx(0.0, abs=1e-14)
    assert W.evaluate(1.4 * R) == pytest.approx(0.0, abs=1e-14)
    assert W.evaluate(2.0 * R) > 0.1


def test_p_well_rejects_bad_exponent():
    with pytest.raises(ValueError):
        PWellDist(p=1.0)
    with pytest.raises(ValueError):
        PWellDist(p=0.5)


@pytest.mark.parametrize("W", ALL, ids=lambda W: W.kind + f"_p{W.p:g}")
def test_gradient_matches_finite_differences(W, rng):
    for _ in range(5):
        F = rng.normal(size=(3, 3)) + 1.5 * np.eye(3)
        g = W.gradient(F)
        gf = central_fd_gradient(W.evaluate, F)
        scale = 1.0 + np.abs(gf).max()
        assert np.abs(g - gf).max() <= 1e-5 * scale


@pytest.mark.parametrize("W", ALL, ids=lambda W: W.kind + f"_p{W.p:g}")
def test_batch_evaluation_matches_scalar(W, rng):
    Fs = rng.normal(size=(8, 3, 3))
    vals = W.evaluate_batch(Fs)
    grads = W.gradient_batch(Fs)
    for i in range(8):
        assert vals[i] == pytest.approx(W.evaluate(Fs[i]), rel=1e-12, abs=1e-12)
        assert np.abs(grads[i] - W.gradient(Fs[i])).max() <= 1e-12


@pytest.mark.parametrize("W", ALL, ids=lambda W: W.kind + f"_p{W.p:g}")
@given(F=mat3_growth)
def test_declared_growth_bounds_hold(W, F):
    n = np.linalg.norm(F) ** W.p
    v = W.evaluate(F)
    assert v >= n / W.C - W.C - 1e-9
    assert v <= W.C * (1.0 + n) + 1e-9


@pytest.mark.parametrize("W", ALL, ids=lambda W: W.kind + f"_p{W.p:g}")
def test_check_p_growth_on_grid(W, rng):
    samples = []
    for s in (0.1, 0.5, 1.0, 2.0, 5.0 / 3):
        F = rng.normal(size=(3, 3)) * s
        n = np.linalg.norm(F)
        samples.append(F if n <= 5.0 else 5.0 * F / n)
    samples += [np.zeros((3, 3)), np.eye(3), 5.0 * np.eye(3) / np.sqrt(3.0)]
    rep = check_p_growth(W, samples)
    assert rep.holds, rep.witnesses


def test_conjugate_exponent():
    assert QuadraticConvex().q == pytest.approx(2.0)
    assert RadialQuartic().q == pytest.approx(4.0 / 3.0)
    assert PWellDist(p=3.0).q == pytest.approx(1.5)


@pytest.mark.parametrize("W", ALL, ids=lambda W: W.kind + f"_p{W.p:g}")
def test_tube_rescaling_roundtrip(W, rng):
    r = 0.37
    Ws = scaled_density_a(W, r)
    for _ in range(5):
        M = rng.normal(size=(3, 3))
        Mm = M.copy()
        Mm[:, :2] *= 1.0 / r  # scaled density absorbs the 1/r on in-plane columns
        direct = W.evaluate(Mm)
        assert Ws.evaluate(M) == pytest.approx(direct, rel=1e-12, abs=1e-12)
        gs = Ws.gradient(M)
        gd = W.gradient(Mm).copy()
        gd[:, :2] /= r
        assert np.abs(gs - gd).max() <= 1e-10 * (1.0 + np.abs(gd).max())


def test_plate_rescaling_acts_on_third_column(rng):
    W = QuadraticConvex()
    h = 0.21
    Ws = scaled_density_b(W, h)
    M = rng.normal(size=(3, 3))
    Mm = M.copy()
    Mm[:, 2] /= h
    assert Ws.evaluate(M) == pytest.approx(W.evaluate(Mm), rel=1e-12)


def test_scaled_density_keeps_growth_metadata():
    W = RadialQuartic()
    Ws = scaled_density_a(W, 0.5)
    assert Ws.p == W.p
    assert np.isfinite(Ws.C) and Ws.C >= W.C


def test_custom_density_wraps_callable(rng):
    fn = lambda F: float(np.sum(F * F))
    W = CustomDensity(fn, p=2.0, C=2.0, is_convex=True)
    F = rng.normal(size=(3, 3))
    assert W.evaluate(F) == pytest.approx(fn(F))
    gf = central_fd_gradient(fn, F)
    assert np.abs(W.gradient(F) - gf).max() <= 1e-6


class TestDensityFromName:
    def test_builds_each_kind(self):
        assert density_from_name("radial_quartic").kind == "radial_quartic"
        assert density_from_name("p_well_dist", p=3.0).p == 3.0
        assert density_from_name("quadratic_convex").is_convex

    def test_rejects_unknown_kind_and_params(self):
        with pytest.raises(ValueError):
            density_from_name("nope")
        with pytest.raises(ValueError):
            density_from_name("quadratic_convex", p=7.0)

    def test_double_well_param(self):
        W = density_from_name("p_well_dist", p=2.0, delta=1.5)
        assert W.wells.is_double and W.wells.delta == pytest.approx(1.5)
