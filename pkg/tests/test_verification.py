import numpy as np
import pytest

from fbdsdej.coefficients import (MonotoneParams, canonical_monotone_family, zero_family)
from fbdsdej.continuation import ContinuationConfig, continuation_solve
from fbdsdej.decoupled import composite_distance
from fbdsdej.noise import Dims, MarkSpace, TreeConfig
from fbdsdej.verification import (LinearBVPSpec, brute_force_fixed_point, decay_study,
                                  jump_bvp_family, linear_bvp_oracle, uniqueness_probe)

from conftest import NO_MARKS, SCALAR, exp_family, scalar_tree


def test_oracle_exponential_pair():
    sol = linear_bvp_oracle(LinearBVPSpec(1, 1, 1, 0, 1, 0), N=8)
    np.testing.assert_allclose(sol.y, np.exp(-sol.t), atol=1e-12)
    np.testing.assert_allclose(sol.Y, np.exp(-sol.t), atol=1e-12)


def test_oracle_without_coupling_is_constant():
    sol = linear_bvp_oracle(LinearBVPSpec(0, 0, 2.0, 0, 1.5, 0.25), N=4)
    np.testing.assert_allclose(sol.y, 1.5)
    np.testing.assert_allclose(sol.Y, 2.0 * 1.5 + 0.25)


def test_oracle_initial_feedback():
    sol = linear_bvp_oracle(LinearBVPSpec(0, 0, 0, 1.0, 0, 1.0), N=4)
    np.testing.assert_allclose(sol.Y, 1.0)
    np.testing.assert_allclose(sol.y, -1.0)


def test_oracle_rejects_resonance_and_bad_constants():
    with pytest.raises(ValueError, match="singular"):
        linear_bvp_oracle(LinearBVPSpec(40.0, 40.0, 1.0, 0, 1, 0))
    with pytest.raises(ValueError, match="invalid constants"):
        LinearBVPSpec(-1.0, 1, 1, 0, 1, 0)
    with pytest.raises(ValueError):
        LinearBVPSpec(1, 1, 1, 0, 1, 0, T=0.0)


def test_brute_force_zero_problem():
    coeffs = zero_family(SCALAR, NO_MARKS, monotone=MonotoneParams(1, 1, 1, 0))
    tree = scalar_tree(2)
    field = brute_force_fixed_point(coeffs, tree, restarts=2)
    assert all(p.size == 0 or np.max(np.abs(p)) < 1e-10 for p in field.parts())


def test_brute_force_refuses_big_trees():
    with pytest.raises(ValueError, match="too large"):
        brute_force_fixed_point(exp_family(), scalar_tree(6), max_unknowns=100)


def test_continuation_agrees_with_brute_force():
    marks = MarkSpace((0.5,))
    coeffs = canonical_monotone_family(SCALAR, marks, theta1=1, theta2=1, beta1=1, beta2=0.5,
                                       psi0=1, h_N=np.array([[0.5]]))
    tree = scalar_tree(2, marks=marks)
    field, _ = continuation_solve(coeffs, engine=tree)
    ref = brute_force_fixed_point(coeffs, tree, restarts=3)
    assert composite_distance(field, ref, tree, marks) <= 1e-10


def test_uniqueness_probe():
    marks = MarkSpace((0.5,))
    coeffs = canonical_monotone_family(SCALAR, marks, theta1=1, theta2=1, beta1=1, psi0=1)
    assert uniqueness_probe(coeffs, scalar_tree(2, marks=marks), trials=3) <= 1e-10
    with pytest.raises(ValueError):
        uniqueness_probe(coeffs, scalar_tree(2, marks=marks), trials=1)


def test_decay_first_order_without_jumps():
    table = decay_study(exp_family(), sizes=(16, 32, 64, 128),
                        tree_config=TreeConfig(brownian=False))
    assert table.flagged is None
    assert 0.7 <= table.error_slope <= 1.3
    assert 0.7 <= table.residual_slope <= 1.3
    assert table.rows[-1].error < 5e-3


def test_decay_first_order_with_jumps():
    table = decay_study(jump_bvp_family(), sizes=(2, 4, 8),
                        tree_config=TreeConfig(brownian=False))
    assert 0.7 <= table.error_slope <= 1.3
    assert 0.7 <= table.residual_slope <= 1.3


def test_decay_zero_problem_is_flagged():
    coeffs = zero_family(SCALAR, NO_MARKS, monotone=MonotoneParams(1, 1, 1, 0))
    table = decay_study(coeffs, sizes=(2, 4))
    assert table.flagged.startswith("zero problem")
    assert table.residual_slope is None
    d = table.to_dict()
    assert [r["N"] for r in d["rows"]] == [2, 4]
