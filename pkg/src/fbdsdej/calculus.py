"""Discrete forward, backward and compensated-jump integrals.

Endpoint conventions live here and nowhere else:

* forward (against W, or any forward driver): left endpoint,
  ``sum h[i] * dX[i]``;
* backward (against B): right endpoint, ``sum h[i+1] * dB[i]``;
* jumps: left endpoint against the compensated counts ``dN - Pi*dt``.

Integrands are node-indexed arrays ``h[0..N]`` whose last axis pairs with the
driver's component axis.  Drivers are increment arrays ``dX[0..N-1]`` with a
trailing component axis.  Any axes in between (outcomes, value axes) broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .noise import Dims, InformationIndex, MarkSpace, TimeGrid, TreeConfig, build_tree, make_grid


def _pair(h_i: np.ndarray, inc_i: np.ndarray) -> np.ndarray:
    """Contract the trailing component axis of ``h_i`` with ``inc_i``.

    ``inc_i`` has shape ``(*S, c)``; ``h_i`` has ``(*S, *out, c)``.
    """
    h_i = np.asarray(h_i, dtype=float)
    inc_i = np.asarray(inc_i, dtype=float)
    if h_i.shape[-1] != inc_i.shape[-1]:
        raise ValueError(
            f"shape mismatch: integrand has {h_i.shape[-1]} components, driver {inc_i.shape[-1]}"
        )
    extra = h_i.ndim - inc_i.ndim
    if extra < 0:
        raise ValueError("shape mismatch: driver has more axes than the integrand")
    inc_i = inc_i.reshape(inc_i.shape[:-1] + (1,) * extra + inc_i.shape[-1:])
    return np.sum(h_i * inc_i, axis=-1)


def _range(grid: TimeGrid, a: float | None, b: float | None) -> tuple[int, int]:
    lo = 0 if a is None else grid.index_of(a)
    hi = grid.steps if b is None else grid.index_of(b)
    if lo > hi:
        raise ValueError(f"range off-grid: a={a} > b={b}")
    return lo, hi


def _check_lengths(h, inc, grid):
    if len(h) != grid.steps + 1:
        raise ValueError(f"integrand needs {grid.steps + 1} nodes, got {len(h)}")
    if len(inc) != grid.steps:
        raise ValueError(f"driver needs {grid.steps} increments, got {len(inc)}")


def forward_integral(h, increments, grid: TimeGrid, a=None, b=None) -> np.ndarray:
    """Left-endpoint sum ``sum_{a <= t_i < b} h(t_i) dX_i``."""
    _check_lengths(h, increments, grid)
    lo, hi = _range(grid, a, b)
    total = 0.0
    for i in range(lo, hi):
        total = total + _pair(h[i], increments[i])
    return np.asarray(total if hi > lo else _pair(h[0], increments[0]) * 0.0)


def backward_integral(h, increments, grid: TimeGrid, a=None, b=None) -> np.ndarray:
    """Right-endpoint sum ``sum_{a <= t_i < b} h(t_{i+1}) dB_i``."""
    _check_lengths(h, increments, grid)
    lo, hi = _range(grid, a, b)
    total = 0.0
    for i in range(lo, hi):
        total = total + _pair(h[i + 1], increments[i])
    return np.asarray(total if hi > lo else _pair(h[0], increments[0]) * 0.0)


def jump_integral(k, counts, marks: MarkSpace, grid: TimeGrid, a=None, b=None) -> np.ndarray:
    """``sum_i sum_j k_i(rho_j) (dN_i(rho_j) - Pi_j dt)`` over the range.

    ``k`` is node-indexed with the mark axis last; ``counts`` are the raw jump
    counts per step with the mark axis last.
    """
    k = np.asarray(k, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if k.shape[-1] != marks.J or counts.shape[-1] != marks.J:
        raise ValueError(
            f"mark mismatch: integrand {k.shape[-1]}, counts {counts.shape[-1]}, marks {marks.J}"
        )
    return forward_integral(k, counts - marks.pi * grid.dt, grid, a, b)


def reverse_time(x) -> np.ndarray:
    """Node-indexed reversal ``x_check[s] = x[N - s]`` (an involution)."""
    return np.asarray(x)[::-1]


def reverse_increments(dX) -> np.ndarray:
    """Increments of ``X_check_s = X_{T-s} - X_T``: ``-dX[N-1-s]``."""
    return -np.asarray(dX)[::-1]


def stack_increments(engine, kind: str) -> np.ndarray:
    """Increments of one driver on an engine as an array ``(N, *S, c)``.

    ``kind`` is ``"W"``, ``"B"`` or ``"N"`` (compensated jumps).
    """
    fn = {"W": engine.dW, "B": engine.dB, "N": engine.dNt}[kind]
    parts = [fn(j) for j in range(engine.N)]
    return np.stack(np.broadcast_arrays(*parts))


# ---------------------------------------------------------------------------
# Reversal identities


@dataclass
class IdentityCheck:
    name: str
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def deviation(self) -> float:
        return float(np.max(np.abs(self.lhs - self.rhs), initial=0.0))


Integral = Callable[..., np.ndarray]


def check_constant_identity(c, dB, grid: TimeGrid, a=None, b=None,
                            backward: Integral = backward_integral) -> IdentityCheck:
    """Backward and forward integrals of a constant both equal ``c (B_b - B_a)``."""
    c = np.asarray(c, dtype=float)
    h = np.broadcast_to(c, (grid.steps + 1,) + c.shape)
    return IdentityCheck(
        "constant",
        backward(h, dB, grid, a, b),
        forward_integral(h, dB, grid, a, b),
    )


def check_reversal_identities(h, dB, grid: TimeGrid, t: float,
                              backward: Integral = backward_integral) -> list[IdentityCheck]:
    """Both sides of the four reversal identities on a realized path.

    With ``h_check = reverse_time(h)`` and ``B_check_s = B_{T-s} - B_T``:

    * ``int_t^T h dB<-  = -int_0^{T-t} h_check dB_check``
    * ``int_{T-u}^T h dB<- = -int_0^u h_check dB_check`` (``u = t``)
    * ``int_0^{T-t} h dB<- = -int_t^T h_check dB_check``
    * ``int_0^u h dB<- = -int_{T-u}^T h_check dB_check`` (``u = t``)

    ``backward`` is injectable so a harness can confirm that a wrong endpoint
    convention is detected.
    """
    T = grid.horizon
    i = grid.index_of(t)
    rest = grid.nodes[grid.steps - i]  # T - t as a grid node
    hc = reverse_time(h)
    dBc = reverse_increments(dB)
    return [
        IdentityCheck("tail", backward(h, dB, grid, t, T),
                      -forward_integral(hc, dBc, grid, 0.0, rest)),
        IdentityCheck("tail_u", backward(h, dB, grid, rest, T),
                      -forward_integral(hc, dBc, grid, 0.0, t)),
        IdentityCheck("head", backward(h, dB, grid, 0.0, rest),
                      -forward_integral(hc, dBc, grid, t, T)),
        IdentityCheck("head_u", backward(h, dB, grid, 0.0, t),
                      -forward_integral(hc, dBc, grid, rest, T)),
    ]


# ---------------------------------------------------------------------------
# Backward martingales


@dataclass
class MartingaleReport:
    is_martingale: bool
    violation: float


def backward_martingale_process(h, dB, grid: TimeGrid) -> np.ndarray:
    """``M_{t_i} = int_{t_i}^T h dB<-`` for every node, stacked on axis 0."""
    _check_lengths(h, dB, grid)
    terms = [_pair(h[i + 1], dB[i]) for i in range(grid.steps)]
    zero = np.zeros_like(terms[0]) if terms else np.zeros(())
    out = [zero]
    for term in reversed(terms):
        out.append(out[-1] + term)
    return np.stack(np.broadcast_arrays(*out[::-1]))


def is_backward_martingale(M, tree, atol: float = 1e-12) -> MartingaleReport:
    """Exact test of ``E[M_t | F^B_{s,T}] = M_s`` for all ``t <= s``.

    ``M`` is node-indexed; ``M[i]`` is an outcome array on ``tree``.  The
    ``t = s`` pairs test adaptedness to the backward B filtration.
    """
    worst = 0.0
    for s in range(tree.N + 1):
        at = InformationIndex(s, "B")
        target = np.asarray(M[s], dtype=float)
        for t in range(s + 1):
            got = tree.cond_exp(np.asarray(M[t], dtype=float), at)
            worst = max(worst, float(np.max(np.abs(got - target))))
    return MartingaleReport(worst <= atol, worst)


# ---------------------------------------------------------------------------
# Product formula


@dataclass
class SemimartingaleSpec:
    """``alpha_t = alpha_0 + int beta ds + int gamma dB<- + int delta dW
    + int int K dNtilde``.

    ``alpha0`` has the value shape ``(n,)``; ``beta`` is node-indexed
    ``(N+1, *S, n)``; ``gamma`` ``(N+1, *S, n, l)``; ``delta``
    ``(N+1, *S, n, d)``; ``K`` ``(N+1, *S, n, J)``.  Missing parts are zero.
    """

    alpha0: np.ndarray
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    delta: np.ndarray | None = None
    K: np.ndarray | None = None
    n: int = field(init=False)

    def __post_init__(self):
        self.alpha0 = np.atleast_1d(np.asarray(self.alpha0, dtype=float))
        self.n = self.alpha0.shape[-1]

    def parts(self, engine):
        N, n = engine.N, self.n
        lead = (N + 1,) + (1,) * engine.ndim

        def get(x, comps):
            if x is None:
                return np.zeros(lead + (n, comps))
            x = np.asarray(x, dtype=float)
            if x.shape[-2:] != (n, comps):
                raise ValueError(f"shape mismatch: expected trailing {(n, comps)}, got {x.shape}")
            return x

        beta = np.zeros(lead + (n,)) if self.beta is None else np.asarray(self.beta, dtype=float)
        if beta.shape[-1] != n:
            raise ValueError(f"shape mismatch: drift has {beta.shape[-1]} components, expected {n}")
        return (beta, get(self.gamma, engine.dims.l), get(self.delta, engine.dims.d),
                get(self.K, engine.marks.J))

    def path(self, engine) -> list[np.ndarray]:
        beta, gamma, delta, K = self.parts(engine)
        alpha = [np.broadcast_to(self.alpha0, (1,) * engine.ndim + (self.n,))]
        for j in range(engine.N):
            step = (beta[j] * engine.dt + _pair(gamma[j + 1], engine.dB(j))
                    + _pair(delta[j], engine.dW(j)) + _pair(K[j], engine.dNt(j)))
            alpha.append(alpha[-1] + step)
        return alpha


@dataclass
class ProductReport:
    t: float
    lhs: float
    initial: float
    cross_left: float
    cross_right: float
    backward_bracket: float
    forward_bracket: float
    jump_bracket: float

    @property
    def rhs(self) -> float:
        return (self.initial + self.cross_left + self.cross_right
                - self.backward_bracket + self.forward_bracket + self.jump_bracket)

    @property
    def discrepancy(self) -> float:
        return self.lhs - self.rhs


def _cross(engine, alpha, other, upto: int) -> float:
    """``E int_0^t <alpha, d other>``; the backward part uses ``alpha`` at the
    right endpoint, the rest at the left endpoint."""
    beta, gamma, delta, K = other
    total = 0.0
    for j in range(upto):
        left = (beta[j] * engine.dt + _pair(delta[j], engine.dW(j))
                + _pair(K[j], engine.dNt(j)))
        right = _pair(gamma[j + 1], engine.dB(j))
        term = np.sum(alpha[j] * left, axis=-1) + np.sum(alpha[j + 1] * right, axis=-1)
        total += float(engine.expect(term))
    return total


def ito_product_check(a: SemimartingaleSpec, b: SemimartingaleSpec, engine,
                      t: float) -> ProductReport:
    """Evaluate every term of the expected product formula on ``[0, t]``.

    ``E<a_t, b_t> = E<a_0, b_0> + E int <a, db> + E int <da, b>
    - E int <gamma, gamma_hat> ds + E int <delta, delta_hat> ds
    + E int int <K, K_hat> Pi ds``.
    """
    if a.n != b.n:
        raise ValueError(f"shape mismatch: {a.n} vs {b.n} components")
    i = engine.grid.index_of(t)
    pa, pb = a.parts(engine), b.parts(engine)
    alpha, alpha_hat = a.path(engine), b.path(engine)
    dt = engine.dt

    def bracket(x, y, idx, weights=None):
        total = 0.0
        for j in idx:
            prod = x[j] * y[j]
            if weights is not None:
                prod = prod * weights
            total += float(engine.expect(prod.sum(axis=(-2, -1)))) * dt
        return total

    return ProductReport(
        t=float(t),
        lhs=float(engine.expect(np.sum(alpha[i] * alpha_hat[i], axis=-1))),
        initial=float(np.sum(a.alpha0 * b.alpha0)),
        cross_left=_cross(engine, alpha, pb, i),
        cross_right=_cross(engine, alpha_hat, pa, i),
        backward_bracket=bracket(pa[1], pb[1], range(1, i + 1)),
        forward_bracket=bracket(pa[2], pb[2], range(i)),
        jump_bracket=bracket(pa[3], pb[3], range(i), engine.marks.pi),
    )


# ---------------------------------------------------------------------------
# Batteries


def left_endpoint_backward(h, increments, grid: TimeGrid, a=None, b=None) -> np.ndarray:
    """Deliberately wrong backward integral (left endpoint), for harness
    self-tests."""
    return forward_integral(h, increments, grid, a, b)


@dataclass
class SuiteRow:
    name: str
    trial: int
    steps: int
    deviation: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _scalar_tree(N: int, T: float = 1.0, marks: MarkSpace = MarkSpace(),
                 config: TreeConfig | None = None):
    return build_tree(make_grid(T, N), Dims(1, 1, 1, 1), marks, config or TreeConfig())


def _adapted_B(tree, raw: np.ndarray) -> np.ndarray:
    """Project node ``i`` of ``raw`` on the backward information at ``i``."""
    return np.stack([np.broadcast_to(tree.cond_exp(raw[i], InformationIndex(i, "B")), raw[i].shape)
                     for i in range(tree.N + 1)])


def identity_suite(trials: int = 50, max_steps: int = 6, seed: int = 0,
                   backward: Integral = backward_integral) -> list[SuiteRow]:
    """Constant-integrand and reversal identities on random scalar trees
    with random backward-adapted integrands, one row per identity and trial."""
    rows = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        N = int(rng.integers(1, max_steps + 1))
        tree = _scalar_tree(N)
        grid = tree.grid
        dB = stack_increments(tree, "B")
        h = _adapted_B(tree, rng.standard_normal((N + 1,) + tree.shape + (1,)))
        t = grid.nodes[int(rng.integers(0, N + 1))]
        checks = [check_constant_identity(np.full(tree.shape + (1,), rng.standard_normal()), dB, grid, backward=backward)]
        checks += check_reversal_identities(h, dB, grid, t, backward=backward)
        rows += [SuiteRow(c.name, trial, N, c.deviation) for c in checks]
    return rows


def martingale_suite(trials: int = 20, max_steps: int = 3, seed: int = 0,
                     atol: float = 1e-12) -> tuple[list[MartingaleReport], MartingaleReport]:
    """Backward integrals of random adapted integrands, plus one integrand
    that peeks at the increment it multiplies."""
    reports = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        tree = _scalar_tree(int(rng.integers(1, max_steps + 1)))
        dB = stack_increments(tree, "B")
        h = _adapted_B(tree, rng.standard_normal((tree.N + 1,) + tree.shape + (1,)))
        reports.append(is_backward_martingale(
            backward_martingale_process(h, dB, tree.grid), tree, atol))
    tree = _scalar_tree(max_steps)
    dB = stack_increments(tree, "B")
    peek = np.concatenate([np.zeros((1,) + dB.shape[1:]), dB])
    bad = is_backward_martingale(backward_martingale_process(peek, dB, tree.grid), tree, atol)
    return reports, bad


@dataclass
class ProductRow:
    pair: str
    steps: int
    dt: float
    lhs: float
    discrepancy: float
    jump_term: float = 0.0

    @property
    def within(self) -> bool:
        return abs(self.discrepancy) <= 2 * self.dt

    def to_dict(self) -> dict:
        return dict(self.__dict__) | {"within": self.within}


def product_battery(sizes=(4, 8, 16), T: float = 1.0, intensity: float = 1.0,
                    jumps: bool = True) -> list[ProductRow]:
    """Expected product formula for ``alpha = alpha_hat`` in three cases:
    unit drift, unit backward integrand and unit jump integrand, at ``t = T``.
    ``jumps=False`` drops the jump case."""
    rows = []
    for N in sizes:
        lead = (N + 1,)
        cases = {
            "drift": (MarkSpace(), TreeConfig(brownian=False),
                      lambda nd: SemimartingaleSpec([0.0], beta=np.ones(lead + (1,) * nd + (1,)))),
            "backward": (MarkSpace(), TreeConfig(forward_noise=False),
                         lambda nd: SemimartingaleSpec([0.0], gamma=np.ones(lead + (1,) * nd + (1, 1)))),
            "jump": (MarkSpace((intensity,)), TreeConfig(brownian=False),
                     lambda nd: SemimartingaleSpec([0.0], K=np.ones(lead + (1,) * nd + (1, 1)))),
        }
        if not jumps:
            del cases["jump"]
        for name, (marks, cfg, make) in cases.items():
            tree = _scalar_tree(N, T, marks, cfg)
            spec = make(tree.ndim)
            rep = ito_product_check(spec, spec, tree, T)
            rows.append(ProductRow(name, N, tree.dt, rep.lhs, rep.discrepancy, rep.jump_bracket))
    return rows


def halving_ok(rows: list[ProductRow], slack: float = 0.3) -> dict[str, bool]:
    """Per pair: does the discrepancy halve (within ``slack``) as the step
    count doubles?  Discrepancies that are exactly zero count as passing."""
    out = {}
    for pair in dict.fromkeys(r.pair for r in rows):
        ds = [abs(r.discrepancy) for r in sorted((r for r in rows if r.pair == pair),
                                                 key=lambda r: r.steps)]
        ok = True
        for a, b in zip(ds, ds[1:]):
            if a <= 1e-14 and b <= 1e-14:
                continue
            ratio = a / b if b else math.inf
            ok &= 2 * (1 - slack) <= ratio <= 2 * (1 + slack)
        out[pair] = ok
    return out
