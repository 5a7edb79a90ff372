import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbdsdej.coefficients import (PRIMED, STANDARD, Layout, LipschitzConstants, MonotoneParams,
                                  Quintuple, assemble_A, bracket, canonical_monotone_family,
                                  check_lipschitz, check_monotonicity, general_affine_family,
                                  integrability_check, monotone_bound, rank_bounds, sample_pairs,
                                  validate_theorem_preconditions, zero_family)
from fbdsdej.noise import Dims, MarkSpace

from conftest import SCALAR

MARKS = MarkSpace((0.5, 1.5))


def _random_q(layout, seed, batch=()):
    u = np.random.default_rng(seed).standard_normal(batch + (layout.size,))
    return Quintuple.from_flat(u, layout)


def test_layout_roundtrip():
    layout = Layout(Dims(2, 3, 2, 1), 2)
    q = _random_q(layout, 0, (4,))
    assert q.y.shape == (4, 2) and q.k.shape == (4, 3, 2) and q.z.shape == (4, 2, 1)
    assert np.array_equal(Quintuple.from_flat(q.flat(), layout).flat(), q.flat())


def test_pointwise_norm_weights_marks():
    layout = Layout(Dims(1, 1, 1, 1), 2)
    q = Quintuple(np.zeros(1), np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 2)))
    assert q.pointwise_norm_sq(MARKS) == pytest.approx(2.0)
    assert layout.weights(MARKS)[layout.slices["k"]].tolist() == [0.5, 1.5]


def test_zero_family_assembles_to_zero():
    coeffs = zero_family(Dims(2, 2, 1, 1), MARKS)
    out = assemble_A(coeffs, 0.0, _random_q(coeffs.layout, 1))
    assert all(np.all(x == 0) for x in out)
    assert all(v == 0 for v in integrability_check(coeffs).values())


def test_identity_R_assembles_raw_coefficients():
    coeffs = canonical_monotone_family(Dims(2, 2, 1, 1), MARKS, theta1=0.7, theta2=1.3)
    q = _random_q(coeffs.layout, 2)
    ev = coeffs.evaluate(0.0, q)
    out = assemble_A(coeffs, 0.0, q)
    for got, name in zip(out, ("f", "b", "g", "sigma", "phi")):
        assert np.allclose(got, ev[name])


def test_assemble_with_rectangular_R_matches_dense_products():
    dims = Dims(1, 2, 1, 1)
    R = np.array([[1.0], [2.0]])
    coeffs = canonical_monotone_family(dims, MarkSpace((1.0,)), R, theta1=0.5, theta2=0.25)
    q = _random_q(coeffs.layout, 3)
    ev = coeffs.evaluate(0.0, q)
    Rtf, Rb, Rtg, Rs, Rp = assemble_A(coeffs, 0.0, q)
    assert np.allclose(Rtf, R.T @ ev["f"])
    assert np.allclose(Rb, R @ ev["b"])
    assert np.allclose(Rtg, R.T @ ev["g"])
    assert np.allclose(Rs, R @ ev["sigma"])
    assert np.allclose(Rp, R @ ev["phi"])
    assert np.allclose(ev["f"], -0.5 * R @ q.y)


def test_bracket_vanishes_on_diagonal():
    coeffs = canonical_monotone_family(SCALAR, MARKS, theta1=1.0, theta2=1.0)
    q = _random_q(coeffs.layout, 4)
    assert bracket(coeffs, 0.0, q, q) == 0.0


def test_flipped_bracket_is_positive():
    theta = 0.8
    coeffs = canonical_monotone_family(SCALAR, MarkSpace(), theta1=theta, theta2=theta,
                                       flipped=True)
    layout = coeffs.layout
    v = Quintuple(np.ones(1), np.ones(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 0)))
    w = Quintuple.zeros(layout)
    assert bracket(coeffs, 0.0, v, w) == pytest.approx(2 * theta)


@pytest.mark.parametrize("dims, marks", [(SCALAR, MarkSpace()), (Dims(2, 3, 1, 2), MARKS),
                                         (Dims(3, 1, 2, 1), MarkSpace((2.0,)))])
def test_canonical_family_is_monotone_with_zero_margin(dims, marks):
    R = np.random.default_rng(5).standard_normal((dims.m, dims.n)) + np.eye(dims.m, dims.n)
    coeffs = canonical_monotone_family(dims, marks, R, 0.7, 1.1, 0.4, 0.9)
    rep = check_monotonicity(coeffs, samples=2000)
    assert rep.passed
    assert all(abs(m) <= 1e-10 for m in rep.margins.values())


def test_flipped_family_depends_on_orientation():
    coeffs = canonical_monotone_family(SCALAR, MarkSpace(), theta1=1, theta2=1, beta1=1,
                                       flipped=True)
    rep = check_monotonicity(coeffs, samples=500)
    assert not rep.passed and rep.witness is not None
    assert check_monotonicity(coeffs.with_orientation(PRIMED), samples=500).passed


def test_zero_family_monotone_with_zero_constants():
    assert check_monotonicity(zero_family(SCALAR, MarkSpace()), samples=200).passed


def test_reversed_terminal_map_fails_with_witness():
    coeffs = general_affine_family(SCALAR, MarkSpace(), np.eye(1), {"h": -np.eye(1)},
                                   monotone=MonotoneParams(beta1=1.0))
    rep = check_monotonicity(coeffs, samples=200)
    assert rep.verdict == "fail"
    assert rep.witness["condition"] == "h"


def test_samplers_cover_scales():
    layout = Layout(SCALAR, 0)
    v, w = sample_pairs(layout, 1000, kind="sphere")
    r = np.linalg.norm(v.flat() - w.flat(), axis=-1)
    assert r.min() == pytest.approx(0.01) and r.max() == pytest.approx(100.0)
    with pytest.raises(ValueError):
        sample_pairs(layout, 3, kind="nope")


def test_lipschitz_zero_family():
    rep = check_lipschitz(zero_family(SCALAR, MARKS))
    assert rep.passed
    assert all(v == 0 for e in rep.entries.values() for v in e["groups"].values())


def test_lipschitz_exact_ratios_are_squared_operator_norms():
    coeffs = canonical_monotone_family(Dims(2, 2, 1, 1), MarkSpace(), np.diag([2.0, 1.0]),
                                       theta1=0.5, theta2=0.3)
    rep = check_lipschitz(coeffs)
    assert rep.exact
    assert rep.entries["f"]["groups"]["c"] == pytest.approx((0.5 * 2.0) ** 2)
    assert rep.entries["b"]["groups"]["c"] == pytest.approx((0.3 * 2.0) ** 2)


def test_sampled_lipschitz_agrees_with_exact():
    coeffs = canonical_monotone_family(SCALAR, MARKS, theta1=0.5, theta2=0.3)
    exact = check_lipschitz(coeffs)
    sampled = check_lipschitz(_as_black_box(coeffs), samples=4000)
    assert not sampled.exact
    for name in ("f", "b", "sigma", "g"):
        assert sampled.entries[name]["groups"]["c"] <= exact.entries[name]["groups"]["c"] + 1e-12


def _as_black_box(coeffs):
    from dataclasses import replace
    return replace(coeffs, affine=None)


def test_sigma_reading_z_fails_small_gamma_prime():
    dims = SCALAR
    layout = Layout(dims, 0)
    M = np.zeros((1, layout.size))
    M[0, layout.slices["z"]] = 1.0
    coeffs = general_affine_family(dims, MarkSpace(), np.eye(1), {"sigma": M},
                                   constants=LipschitzConstants(1.0, 0.5, 0.4))
    rep = check_lipschitz(coeffs)
    assert rep.entries["sigma"]["groups"]["gamma_prime"] == pytest.approx(1.0)
    assert not rep.passed


def test_validator_branches():
    good = canonical_monotone_family(Dims(1, 2, 1, 1), MarkSpace(), np.array([[1.0], [0.0]]),
                                     theta1=1, beta1=1,
                                     constants=LipschitzConstants(2.0, 0.5, 0.9))
    v = validate_theorem_preconditions(good)
    assert v.valid and v.branch == "m>n"
    bad = canonical_monotone_family(Dims(2, 1, 1, 1), MarkSpace(), np.array([[1.0, 0.0]]),
                                    theta2=1, beta2=1,
                                    constants=LipschitzConstants(2.0, 0.5, 0.3))
    v = validate_theorem_preconditions(bad)
    assert not v.valid and "0<γ′≤γ/2 fails" in v.violations
    none = canonical_monotone_family(SCALAR, MarkSpace(), beta1=1, beta2=1)
    assert "θ1+θ2>0 fails" in validate_theorem_preconditions(none).violations


def test_m_greater_than_n_needs_only_theta1_beta1():
    coeffs = canonical_monotone_family(Dims(1, 2, 1, 1), MarkSpace(), theta1=1, beta1=1)
    assert validate_theorem_preconditions(coeffs).valid


def test_negative_constants_rejected():
    with pytest.raises(ValueError, match="invalid constants"):
        canonical_monotone_family(SCALAR, MarkSpace(), theta1=-1.0)


@pytest.mark.parametrize("R, expected", [(np.eye(2), (1, 1)), (np.diag([2.0, 1.0]), (1, 2)),
                                         (np.array([[1.0], [0.0]]), (1, 1))])
def test_rank_bounds(R, expected):
    assert rank_bounds(R) == pytest.approx(expected)


def test_rank_deficient_R():
    with pytest.raises(ValueError, match="rank-deficient"):
        rank_bounds(np.array([[1.0, 2.0], [2.0, 4.0]]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.integers(0, 2**31))
def test_monotone_bound_equals_minus_bracket_for_canonical(t1, t2, seed):
    coeffs = canonical_monotone_family(Dims(2, 2, 1, 1), MARKS, np.diag([1.0, 3.0]), t1, t2)
    v, w = _random_q(coeffs.layout, seed, (5,)), _random_q(coeffs.layout, seed + 1, (5,))
    assert np.allclose(-bracket(coeffs, 0.0, v, w), monotone_bound(coeffs, v, w))
