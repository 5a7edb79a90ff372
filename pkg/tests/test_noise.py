import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbdsdej.noise import (Dims, InformationIndex, MarkSpace, RegressionEngine, TreeConfig,
                           build_tree, conditional_expectation, make_grid, sample_paths)

from conftest import SCALAR, scalar_tree


def test_grid_nodes():
    assert np.allclose(make_grid(1.0, 4).nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert np.allclose(make_grid(2.0, 1).nodes, [0, 2.0])


@pytest.mark.parametrize("T, N, msg", [(1.0, 0, "empty grid"), (0.0, 3, "nonpositive horizon"),
                                       (-1.0, 3, "nonpositive horizon")])
def test_grid_rejects(T, N, msg):
    with pytest.raises(ValueError, match=msg):
        make_grid(T, N)


def test_index_of_off_grid():
    g = make_grid(1.0, 4)
    assert g.index_of(0.75) == 3
    with pytest.raises(ValueError, match="off-grid"):
        g.index_of(0.3)


def test_dims_and_marks_validation():
    with pytest.raises(ValueError):
        Dims(0, 1, 1, 1)
    with pytest.raises(ValueError):
        MarkSpace((0.5, -1.0))
    assert MarkSpace((0.5, 2.0)).J == 2


def test_sample_paths_without_marks_has_no_jumps():
    b = sample_paths(make_grid(1.0, 5), SCALAR, MarkSpace(), 20, seed=3)
    assert b.dN.shape == (20, 5, 0)
    assert b.dW.shape == (20, 5, 1)


def test_sample_paths_deterministic_and_sliceable():
    g = make_grid(1.0, 4)
    marks = MarkSpace((1.5,))
    a = sample_paths(g, SCALAR, marks, 30, seed=11)
    b = sample_paths(g, SCALAR, marks, 30, seed=11)
    part = sample_paths(g, SCALAR, marks, 10, seed=11, first_path=7)
    for x, y, z in [(a.dW, b.dW, part.dW), (a.dB, b.dB, part.dB), (a.dN, b.dN, part.dN)]:
        assert np.array_equal(x, y)
        assert np.array_equal(x[7:17], z)
    other = sample_paths(g, SCALAR, marks, 30, seed=12)
    assert not np.array_equal(a.dW, other.dW)


def test_sample_paths_moments():
    g = make_grid(1.0, 4)
    b = sample_paths(g, SCALAR, MarkSpace((2.0,)), 20_000, seed=5)
    assert abs(b.dW.mean()) < 0.01
    assert b.dB.var() == pytest.approx(g.dt, rel=0.03)
    assert b.dN.mean() == pytest.approx(2.0 * g.dt, rel=0.05)
    assert abs(b.dN_compensated.mean()) < 0.01


def test_small_tree_leaves():
    tree = scalar_tree(2)
    assert tree.leaves == 16
    assert np.allclose(tree.leaf_probabilities(), 1 / 16)


def test_jump_branch_probability():
    tree = scalar_tree(4, marks=MarkSpace((0.5,)), brownian=False)
    assert np.allclose(tree.branch_probabilities(0), [0.875, 0.125])


def test_tree_rejects():
    with pytest.raises(ValueError, match="mark intensity too large"):
        scalar_tree(4, marks=MarkSpace((5.0,)))
    with pytest.raises(ValueError, match="tree too large"):
        scalar_tree(30)


def test_deterministic_reduction_has_no_outcome_axes():
    tree = scalar_tree(512, brownian=False)
    assert tree.is_deterministic and tree.shape == ()


def test_cond_exp_constant_and_future_increment():
    tree = scalar_tree(3, marks=MarkSpace((1.0,)))
    c = np.full(tree.shape, 2.5)
    for i in range(4):
        for filt in ("mixed", "W", "B"):
            assert np.allclose(conditional_expectation(tree, c, InformationIndex(i, filt)), 2.5)
    for i in range(2):
        x = np.broadcast_to(tree.dW(i + 1)[..., 0], tree.shape)
        assert np.allclose(conditional_expectation(tree, x, i), 0.0)


def test_cond_exp_keeps_known_backward_suffix():
    tree = scalar_tree(3)
    for i in range(4):
        suffix = np.broadcast_to(tree.B(3)[..., 0] - tree.B(i)[..., 0], tree.shape)
        assert np.allclose(conditional_expectation(tree, suffix, i), suffix)
        # past B increments are not known at i
        if i:
            past = np.broadcast_to(tree.dB(i - 1)[..., 0], tree.shape)
            assert np.allclose(conditional_expectation(tree, past, i), 0.0)


def test_cond_exp_errors():
    tree = scalar_tree(2)
    with pytest.raises(ValueError):
        tree.cond_exp(np.zeros((3, 3)), 1)
    with pytest.raises(ValueError):
        tree.cond_exp(np.zeros(tree.shape), 7)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(0, 3), st.integers(0, 2**31))
def test_cond_exp_is_a_projection(N, i, seed):
    i = min(i, N)
    tree = scalar_tree(N, marks=MarkSpace((0.7,)))
    X = np.random.default_rng(seed).standard_normal(tree.shape)
    once = conditional_expectation(tree, X, i)
    assert np.allclose(conditional_expectation(tree, once, i), once)
    assert np.isclose(tree.expect(once), tree.expect(X))
    assert tree.is_measurable(once, i)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31))
def test_pure_tower_properties(N, seed):
    tree = scalar_tree(N)
    X = np.random.default_rng(seed).standard_normal(tree.shape)
    for s in range(N + 1):
        for t in range(s + 1):
            # W-information grows, B-information shrinks with time
            inner = conditional_expectation(tree, X, InformationIndex(s, "W"))
            assert np.allclose(conditional_expectation(tree, inner, InformationIndex(t, "W")),
                               conditional_expectation(tree, X, InformationIndex(t, "W")))
            inner = conditional_expectation(tree, X, InformationIndex(t, "B"))
            assert np.allclose(conditional_expectation(tree, inner, InformationIndex(s, "B")),
                               conditional_expectation(tree, X, InformationIndex(s, "B")))


def test_mixed_information_is_not_a_filtration():
    # dB(0) is known at node 0 (the whole B-future) but not at node 1
    tree = scalar_tree(2)
    Y = np.broadcast_to(tree.dB(0)[..., 0], tree.shape)
    direct = conditional_expectation(tree, Y, 0)
    stepped = conditional_expectation(tree, conditional_expectation(tree, Y, 1), 0)
    assert np.allclose(direct, Y)
    assert np.allclose(stepped, 0.0)


def test_reversed_view_swaps_roles():
    tree = scalar_tree(2, marks=MarkSpace((1.0,)))
    rev = tree.reversed()
    assert rev.reversed() is tree
    X = np.random.default_rng(1).standard_normal(tree.shape)
    for s in range(3):
        assert np.allclose(rev.cond_exp(X, s), tree.cond_exp(X, 2 - s))
    assert np.allclose(rev.dB(0), -tree.dB(1))
    assert np.allclose(rev.dW(1), -tree.dW(0))


def test_regression_engine_recovers_linear_functional():
    g = make_grid(1.0, 3)
    bundle = sample_paths(g, SCALAR, MarkSpace(), 4000, seed=9)
    eng = RegressionEngine(bundle, SCALAR, degree=2)
    suffix = eng.B(3)[..., 0] - eng.B(1)[..., 0]
    target = 2.0 * eng.W(1)[..., 0] + suffix
    noisy = target + eng.dW(2)[..., 0]
    assert np.allclose(eng.cond_exp(noisy, 1), target, atol=0.1)
    assert eng.jump_variance.shape == (0,)
