import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbdsdej.calculus import (SemimartingaleSpec, backward_integral, backward_martingale_process,
                              check_constant_identity, check_reversal_identities,
                              forward_integral, halving_ok, identity_suite, is_backward_martingale,
                              ito_product_check, jump_integral, left_endpoint_backward,
                              martingale_suite, product_battery, reverse_increments,
                              reverse_time, stack_increments)
from fbdsdej.noise import MarkSpace, make_grid

from conftest import scalar_tree

GRID = make_grid(1.0, 2)
INC = np.array([[1.0], [-1.0]])


def test_forward_integral_defining_sum():
    h = np.array([[1.0], [2.0], [9.0]])
    assert forward_integral(h, INC, GRID) == pytest.approx(-1.0)
    assert forward_integral(np.zeros((3, 1)), INC, GRID) == 0.0


def test_backward_integral_defining_sum():
    h = np.array([[9.0], [2.0], [3.0]])
    assert backward_integral(h, INC, GRID) == pytest.approx(-1.0)


def test_constant_integrand_telescopes():
    grid = make_grid(1.0, 5)
    dB = np.random.default_rng(0).standard_normal((5, 1))
    h = np.full((6, 1), 1.7)
    B = np.concatenate([[0.0], np.cumsum(dB)])
    assert backward_integral(h, dB, grid, 0.2, 0.8) == pytest.approx(1.7 * (B[4] - B[1]))
    assert forward_integral(h, dB, grid, 0.2, 0.8) == pytest.approx(1.7 * (B[4] - B[1]))
    assert check_constant_identity(np.array([1.7]), dB, grid).deviation <= 1e-15


def test_integral_range_must_be_on_grid():
    with pytest.raises(ValueError, match="off-grid"):
        forward_integral(np.ones((3, 1)), INC, GRID, 0.1, 1.0)


def test_jump_integral():
    grid = make_grid(1.0, 8)
    marks = MarkSpace((1.0,))
    k = np.ones((2, 1))
    one = make_grid(0.125, 1)
    assert jump_integral(k, np.array([[1.0]]), marks, one) == pytest.approx(0.875)
    assert jump_integral(k, np.array([[0.0]]), marks, one) == pytest.approx(-0.125)
    assert jump_integral(np.zeros((9, 1)), np.ones((8, 1)), marks, grid) == 0.0
    assert jump_integral(np.zeros((9, 0)), np.zeros((8, 0)), MarkSpace(), grid) == 0.0
    with pytest.raises(ValueError, match="mark mismatch"):
        jump_integral(np.ones((9, 2)), np.ones((8, 2)), marks, grid)


def test_reverse_time_is_an_involution():
    h = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(reverse_time(h), [3.0, 2.0, 1.0])
    assert np.array_equal(reverse_time(reverse_time(h)), h)
    assert np.array_equal(reverse_increments(reverse_increments(INC)), INC)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.data())
def test_reversal_identities_pathwise(N, data):
    grid = make_grid(1.0, N)
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    dB = rng.standard_normal((N, 1))
    h = rng.standard_normal((N + 1, 1))
    t = grid.nodes[data.draw(st.integers(0, N))]
    for check in check_reversal_identities(h, dB, grid, t):
        assert check.deviation <= 1e-12, check.name


def test_wrong_endpoint_breaks_reversal():
    rng = np.random.default_rng(4)
    grid = make_grid(1.0, 4)
    checks = check_reversal_identities(rng.standard_normal((5, 1)), rng.standard_normal((4, 1)),
                                       grid, 0.25, backward=left_endpoint_backward)
    assert max(c.deviation for c in checks) > 1e-3


def test_suite_rows_are_exact():
    rows = identity_suite(trials=10, seed=3)
    assert {r.name for r in rows} == {"constant", "tail", "tail_u", "head", "head_u"}
    assert max(r.deviation for r in rows) <= 1e-12


def test_suffix_of_B_is_a_backward_martingale():
    tree = scalar_tree(3)
    M = [tree.B(3)[..., 0] - tree.B(i)[..., 0] for i in range(4)]
    rep = is_backward_martingale([np.broadcast_to(m, tree.shape) for m in M], tree)
    assert rep.is_martingale and rep.violation == 0.0


def test_forward_martingale_fails_backward_test():
    tree = scalar_tree(2)
    M = [np.broadcast_to(tree.W(i)[..., 0], tree.shape) for i in range(3)]
    assert not is_backward_martingale(M, tree).is_martingale


def test_backward_integral_process_of_adapted_integrand():
    reports, anticipating = martingale_suite(trials=8, seed=1)
    assert all(r.is_martingale for r in reports)
    assert not anticipating.is_martingale


def test_stack_increments_shape():
    tree = scalar_tree(2)
    dB = stack_increments(tree, "B")
    assert np.broadcast_shapes(dB.shape, (2,) + tree.shape + (1,)) == (2,) + tree.shape + (1,)
    M = backward_martingale_process(np.ones((3,) + tree.shape + (1,)), stack_increments(tree, "B"),
                                    tree.grid)
    assert np.allclose(M[2], 0.0)


def test_product_formula_exact_for_backward_integrand():
    tree = scalar_tree(6, forward_noise=False)
    spec = SemimartingaleSpec([0.0], gamma=np.ones((7,) + (1,) * tree.ndim + (1, 1)))
    rep = ito_product_check(spec, spec, tree, 1.0)
    assert rep.lhs == pytest.approx(1.0)
    assert rep.backward_bracket == pytest.approx(1.0)
    assert abs(rep.discrepancy) <= 1e-12


def test_product_formula_shape_mismatch():
    tree = scalar_tree(2)
    with pytest.raises(ValueError, match="shape mismatch"):
        ito_product_check(SemimartingaleSpec([0.0]), SemimartingaleSpec([0.0, 1.0]), tree, 1.0)


def test_product_battery_first_order():
    rows = product_battery((2, 4, 8))
    assert all(r.within for r in rows)
    assert all(halving_ok(rows).values())
    drift = {r.steps: r.discrepancy for r in rows if r.pair == "drift"}
    assert drift[4] == pytest.approx(0.25)
    jump = [r for r in rows if r.pair == "jump"]
    assert all(r.lhs == pytest.approx(1.0 - r.dt) for r in jump)


def test_product_battery_without_jumps_has_no_jump_terms():
    rows = product_battery((2, 4), jumps=False)
    assert {r.pair for r in rows} == {"drift", "backward"}
    assert all(r.jump_term == 0.0 for r in rows)
