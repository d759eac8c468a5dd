"""Relaxation estimates: lamination, cell problems, reduced envelopes, memo."""

import numpy as np
import pytest

from thinstruct import (
    EnvelopeMemo,
    EnvelopeQuery,
    PWellDist,
    QuadraticConvex,
    RadialQuartic,
    cell_qcw,
    convex_envelope,
    radial_envelope_oracle,
    random_rotation,
    reduced_W0,
    reduced_W1,
    verify_envelope_chain,
)
from thinstruct.envelopes import (
    cell_qcw_full,
    convex_envelope_full,
    cross_convex_1d_check,
    envelope_scaling_commute,
)


def _radial_target(t):
    return t * np.eye(3) / np.sqrt(3.0)


def test_radial_oracle_values():
    assert radial_envelope_oracle(0.0) == 0.0
    assert radial_envelope_oracle(1.0) == 0.0
    assert radial_envelope_oracle(0.7) == 0.0
    assert radial_envelope_oracle(1.5) == pytest.approx(1.5625)
    assert radial_envelope_oracle(2.0) == pytest.approx(9.0)
    assert radial_envelope_oracle(3.0) == pytest.approx(64.0)


@pytest.mark.parametrize("t", [0.0, 0.6, 1.0, 1.4, 2.5])
def test_lamination_reaches_radial_oracle(t):
    W = RadialQuartic()
    q = EnvelopeQuery(W, _radial_target(t), n_points=6, multistart=8, seed=0)
    assert convex_envelope(q) == pytest.approx(radial_envelope_oracle(t), abs=2e-4)


def test_convex_density_collapses_both_envelopes(rng):
    W = QuadraticConvex()
    for _ in range(8):
        F = rng.normal(size=(3, 3))
        q = EnvelopeQuery(W, F, seed=1)
        w = W.evaluate(F)
        assert convex_envelope(q) == pytest.approx(w, abs=1e-8)
        assert cell_qcw(q) == pytest.approx(w, abs=1e-8)


def test_full_variants_report_value_gradient_and_flag(rng):
    W = QuadraticConvex()
    F = rng.normal(size=(3, 3))
    q = EnvelopeQuery(W, F, seed=2)
    res = convex_envelope_full(q)
    assert res.value == pytest.approx(W.evaluate(F), abs=1e-8)
    assert np.abs(res.gradient - W.gradient(F)).max() <= 1e-6
    assert res.stalled is False
    res2 = cell_qcw_full(q)
    assert res2.value == pytest.approx(W.evaluate(F), abs=1e-8)
    assert np.abs(res2.gradient - W.gradient(F)).max() <= 1e-6


def test_lamination_result_reports_support(rng):
    W = RadialQuartic()
    res = convex_envelope_full(
        EnvelopeQuery(W, _radial_target(0.5), n_points=6, multistart=6, seed=0)
    )
    assert res.support is not None and res.weights is not None
    assert res.weights.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.all(res.weights >= -1e-12)
    # the support points average back to the target
    mean = np.sum(res.weights[:, None, None] * res.support, axis=0)
    assert np.abs(mean - _radial_target(0.5)).max() <= 1e-6


def test_envelopes_never_exceed_density(rng):
    for W in (RadialQuartic(), PWellDist(p=2.0)):
        for i in range(6):
            F = rng.normal(size=(3, 3))
            q = EnvelopeQuery(W, F, n_points=6, multistart=6, seed=i)
            assert convex_envelope(q) <= W.evaluate(F) + 1e-9
            assert cell_qcw(q) <= W.evaluate(F) + 1e-9


def test_chain_report_small_sample(rng):
    W = RadialQuartic()
    samples = [rng.normal(size=(3, 3)) for _ in range(4)]
    rep = verify_envelope_chain(W, samples, multistart=4)
    assert rep.ok, rep.violations
    assert len(rep.rows) == 4


def test_more_lamination_points_never_hurt():
    W = RadialQuartic()
    T = _radial_target(0.8)
    lo = convex_envelope(EnvelopeQuery(W, T, n_points=4, multistart=8, seed=0))
    hi = convex_envelope(EnvelopeQuery(W, T, n_points=8, multistart=8, seed=0))
    assert hi <= lo + 1e-6


def test_cell_refinement_never_hurts():
    W = RadialQuartic()
    T = _radial_target(0.8)
    coarse = cell_qcw(EnvelopeQuery(W, T, cell_n=2, multistart=3, seed=0))
    fine = cell_qcw(EnvelopeQuery(W, T, cell_n=4, multistart=3, seed=0))
    assert fine <= coarse + 1e-5


def test_cross_1d_gap_nonnegative_for_convex(rng):
    W = QuadraticConvex()
    pairs = [
        ((rng.normal(size=(3, 2)), rng.normal(size=3)),
         (rng.normal(size=(3, 2)), rng.normal(size=3)))
        for _ in range(20)
    ]
    for row in cross_convex_1d_check(W, pairs, lam=0.3):
        assert row.gap >= -1e-10
        assert row.boundary_residual <= 1e-12
        assert row.mean_residual <= 1e-12


def test_cross_1d_detects_well_straddling_drop():
    W = RadialQuartic()
    b = np.zeros((3, 2))
    pair = ((b, np.array([0.0, 0.0, 1.0])), (b, np.array([0.0, 0.0, -1.0])))
    (row,) = cross_convex_1d_check(W, [pair], lam=0.5)
    assert row.lhs == pytest.approx(1.0)  # density at the flat average
    assert row.rhs == pytest.approx(0.0, abs=1e-14)
    assert row.gap <= -1e-3


def test_cross_1d_rejects_bad_lambda():
    with pytest.raises(ValueError):
        cross_convex_1d_check(QuadraticConvex(), [], lam=0.0)


def test_scaling_commutes_with_convexification(rng):
    W = QuadraticConvex()
    samples = [rng.normal(size=(3, 3)) for _ in range(3)]
    rep = envelope_scaling_commute(W, 0.5, samples, multistart=4)
    assert rep.ok, rep.rows
    assert rep.max_deviation <= 2e-6


def test_reduced_w0_bounds_all_completions(rng):
    for W in (RadialQuartic(), PWellDist(p=2.0)):
        zeta = rng.normal(size=3)
        w0 = reduced_W0(W, zeta)
        for _ in range(10):
            b = rng.normal(size=(3, 2))
            full = np.concatenate([b, zeta[:, None]], axis=1)
            assert w0 <= W.evaluate(full) + 1e-9


def test_reduced_w0_radial_closed_form(rng):
    # for the radial quartic the best completion zeroes the extra columns
    W = RadialQuartic()
    for _ in range(5):
        zeta = rng.normal(size=3)
        t2 = float(zeta @ zeta)
        expect = (t2 - 1.0) ** 2 if t2 > 1.0 else 0.0
        assert reduced_W0(W, zeta) == pytest.approx(expect, abs=1e-6)


def test_reduced_w0_frame_indifference(rng):
    W = PWellDist(p=2.0)
    zeta = rng.normal(size=3)
    R = random_rotation(rng)
    a = reduced_W0(W, zeta)
    b = reduced_W0(W, R @ zeta)
    assert a == pytest.approx(b, abs=1e-6)


def test_reduced_w1_bounds_all_completions(rng):
    W = PWellDist(p=2.0)
    Ma = rng.normal(size=(3, 2))
    w1 = reduced_W1(W, Ma)
    for _ in range(10):
        b = rng.normal(size=3)
        full = np.concatenate([Ma, b[:, None]], axis=1)
        assert w1 <= W.evaluate(full) + 1e-9


def test_query_validation():
    W = QuadraticConvex()
    T = np.eye(3)
    with pytest.raises(ValueError):
        EnvelopeQuery(W, np.eye(2))
    with pytest.raises(ValueError):
        EnvelopeQuery(W, T, n_points=1)
    with pytest.raises(ValueError):
        EnvelopeQuery(W, T, n_points=11)
    with pytest.raises(ValueError):
        EnvelopeQuery(W, T, multistart=0)
    with pytest.raises(ValueError):
        EnvelopeQuery(W, T, cell_n=1)


class TestMemo:
    def test_caches_within_quantum(self):
        memo = EnvelopeMemo(quantum=1e-4)
        calls = []

        def compute(x):
            calls.append(x.copy())
            return float(np.sum(x))

        a = memo.lookup("tag", np.array([1.0, 2.0]), compute)
        b = memo.lookup("tag", np.array([1.0 + 3e-5, 2.0]), compute)
        assert a == b
        assert len(calls) == 1
        assert memo.hits == 1 and memo.misses == 1

    def test_separates_tags_and_distant_args(self):
        memo = EnvelopeMemo(quantum=1e-4)
        f = lambda x: float(np.sum(x))
        memo.lookup("a", np.array([1.0]), f)
        memo.lookup("b", np.array([1.0]), f)
        memo.lookup("a", np.array([2.0]), f)
        assert memo.misses == 3 and memo.hits == 0

    def test_deterministic_representative(self):
        m1 = EnvelopeMemo(quantum=1e-4)
        m2 = EnvelopeMemo(quantum=1e-4)
        f = lambda x: float(np.sin(x).sum())
        v1 = m1.lookup("t", np.array([0.123456789]), f)
        v2 = m2.lookup("t", np.array([0.123456789]), f)
        assert v1 == v2
