"""Discrete noise models for (W, B, eta) and exact conditional expectations.

Two backends describe the driving noise:

* :class:`PathBundle` -- Monte Carlo increments generated by a counter-based
  generator, so any block of paths can be regenerated bit-identically.
* :class:`ScenarioTree` -- a finite product space with one binary axis per
  noise component and step.  Brownian components are Rademacher
  (+-sqrt(dt)); each mark carries a Bernoulli jump indicator.  Conditional
  expectations under the mixed information F_t = F_t^W v F_{t,T}^B v F_t^eta
  are exact weighted averages over the axes that are not yet known.

Arrays living on a tree put the outcome axes first (``tree.ndim`` of them,
each of size 1 or ``tree.shape[a]``) followed by value axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special, stats

DEFAULT_NODE_CAP = 10**6

_KIND_W, _KIND_B, _KIND_N = "W", "B", "N"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * T / N`` on ``[0, T]``."""

    horizon: float
    steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Node index of time ``t``; raises if ``t`` is not a grid node."""
        x = t / self.dt
        i = int(round(x))
        if not math.isclose(x, i, abs_tol=1e-9) or not 0 <= i <= self.steps:
            raise ValueError(f"range off-grid: t={t!r} is not a node of {self}")
        return i


def make_grid(T: float, N: int) -> TimeGrid:
    if N < 1:
        raise ValueError("empty grid: step count must be >= 1")
    if not T > 0:
        raise ValueError("nonpositive horizon: T must be > 0")
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark set with intensities ``Pi_j`` (jumps per unit time)."""

    weights: tuple[float, ...] = ()
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if any(not w > 0 for w in self.weights):
            raise ValueError("mark weights must be > 0")
        if self.labels is not None and len(self.labels) != len(self.weights):
            raise ValueError("one label per mark required")

    @property
    def J(self) -> int:
        return len(self.weights)

    @property
    def pi(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def norm_sq(self, k: np.ndarray) -> np.ndarray:
        """``|||k|||^2``; the mark axis of ``k`` is the last one."""
        if self.J == 0:
            return np.zeros(np.shape(k)[:-2] if np.ndim(k) >= 2 else ())
        return np.einsum("...j,j->...", np.asarray(k) ** 2, self.pi).sum(axis=-1)


@dataclass(frozen=True)
class Dims:
    """Dimensions: forward state n, backward state m, W dim d, B dim l."""

    n: int
    m: int
    d: int
    l: int

    def __post_init__(self):
        if min(self.n, self.m, self.d, self.l) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {self}")


# ---------------------------------------------------------------------------
# Monte Carlo paths


_STREAM_IDS = {_KIND_W: 1, _KIND_B: 2, _KIND_N: 3}


def _uniforms(seed: int, kind: str, start: int, count: int) -> np.ndarray:
    """Uniforms in (0, 1) at positions ``start .. start+count`` of one stream.

    Philox is counter based: the stream position is a pure function of the
    key and the draw index, so blocks can be produced in any order.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, _STREAM_IDS[kind]], dtype=np.uint64)
    bitgen = np.random.Philox(key=key)
    block, skip = divmod(start, 4)
    bitgen.advance(block)
    raw = bitgen.random_raw(count + skip)[skip:]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class PathBundle:
    """Increments per path and step: ``dW`` (P, N, d), ``dB`` (P, N, l),
    jump counts ``dN`` (P, N, J)."""

    grid: TimeGrid
    marks: MarkSpace
    dW: np.ndarray
    dB: np.ndarray
    dN: np.ndarray
    seed: int
    first_path: int = 0

    @property
    def paths(self) -> int:
        return self.dW.shape[0]

    @property
    def dN_compensated(self) -> np.ndarray:
        return self.dN - self.marks.pi * self.grid.dt


def sample_paths(
    grid: TimeGrid,
    dims: Dims,
    marks: MarkSpace,
    P: int,
    seed: int,
    first_path: int = 0,
) -> PathBundle:
    """Draw ``P`` paths starting at global path index ``first_path``.

    Component ``c`` of step ``i`` on path ``p`` always comes from the same
    counter position, so ``sample_paths(..., P=10, first_path=5)`` equals rows
    5..14 of a larger bundle with the same seed.
    """
    if P < 1:
        raise ValueError("path count must be >= 1")
    N, dt = grid.steps, grid.dt

    def draw(kind, comps):
        if comps == 0:
            return np.zeros((P, N, 0))
        u = _uniforms(seed, kind, first_path * N * comps, P * N * comps)
        return u.reshape(P, N, comps)

    dW = special.ndtri(draw(_KIND_W, dims.d)) * math.sqrt(dt)
    dB = special.ndtri(draw(_KIND_B, dims.l)) * math.sqrt(dt)
    if marks.J:
        dN = stats.poisson.ppf(draw(_KIND_N, marks.J), marks.pi * dt)
    else:
        dN = np.zeros((P, N, 0))
    return PathBundle(grid, marks, dW, dB, dN, int(seed), int(first_path))


# ---------------------------------------------------------------------------
# Scenario tree


@dataclass(frozen=True)
class TreeConfig:
    node_cap: int = DEFAULT_NODE_CAP
    # False drops the Brownian axes (deterministic reduction; jumps stay).
    brownian: bool = True
    # finer switches for the W and B axes separately
    forward_noise: bool = True
    backward_noise: bool = True

    @property
    def w_axes(self) -> bool:
        return self.brownian and self.forward_noise

    @property
    def b_axes(self) -> bool:
        return self.brownian and self.backward_noise


@dataclass(frozen=True)
class InformationIndex:
    """Information available at grid node ``step``.

    ``filtration`` selects the sigma-field: ``"mixed"`` is F_t, ``"W"`` the
    forward W/eta history F_t^W v F_t^eta, ``"B"`` the backward B-future
    F_{t,T}^B.
    """

    step: int
    filtration: str = "mixed"


@dataclass(frozen=True)
class _Axis:
    kind: str
    step: int
    comp: int
    values: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    grid: TimeGrid
    dims: Dims
    marks: MarkSpace
    axes: tuple[_Axis, ...]
    reversed_view: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- structure ---------------------------------------------------------

    @property
    def N(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a.values) for a in self.axes)

    @property
    def leaves(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def is_deterministic(self) -> bool:
        return self.ndim == 0

    @property
    def jump_variance(self) -> np.ndarray:
        """Exact per-step variance of the compensated jump indicators."""
        p = self.marks.pi * self.dt
        return p * (1.0 - p)

    def leaf_probabilities(self) -> np.ndarray:
        out = np.ones(self.shape)
        for a, ax in enumerate(self.axes):
            out = out * self._along(ax.probs, a)
        return out

    def branch_probabilities(self, step: int) -> np.ndarray:
        """Probabilities of the branch alphabet at one step (flattened)."""
        probs = [ax.probs for ax in self.axes if ax.step == step]
        out = np.ones(1)
        for p in probs:
            out = np.multiply.outer(out, p).ravel()
        return out

    def _along(self, vec: np.ndarray, axis: int) -> np.ndarray:
        shape = [1] * self.ndim
        shape[axis] = len(vec)
        return np.asarray(vec).reshape(shape)

    # -- information -------------------------------------------------------

    def known_axes(self, at: InformationIndex | int) -> frozenset[int]:
        if isinstance(at, (int, np.integer)):
            at = InformationIndex(int(at))
        i = at.step
        if not 0 <= i <= self.N:
            raise ValueError(f"information step {i} outside 0..{self.N}")
        key = ("known", i, at.filtration)
        if key not in self._cache:
            fwd, bwd = self._roles()
            known = set()
            for a, ax in enumerate(self.axes):
                is_fwd = ax.kind in fwd
                step = self.N - 1 - ax.step if self.reversed_view else ax.step
                # "W" and "B" name the forward and backward roles; on the
                # reversed view those roles are held by B and by W/eta.
                if at.filtration == "mixed":
                    ok = step < i if is_fwd else step >= i
                elif at.filtration == "W":
                    ok = is_fwd and step < i
                elif at.filtration == "B":
                    ok = (not is_fwd) and step >= i
                else:
                    raise ValueError(f"unknown filtration {at.filtration!r}")
                if ok:
                    known.add(a)
            self._cache[key] = frozenset(known)
        return self._cache[key]

    def _roles(self) -> tuple[set[str], set[str]]:
        # forward-role kinds are revealed as time increases
        if self.reversed_view:
            return {_KIND_B}, {_KIND_W, _KIND_N}
        return {_KIND_W, _KIND_N}, {_KIND_B}

    def cond_exp(self, X, at: InformationIndex | int) -> np.ndarray:
        """E[X | information ``at``], returned with size-1 unknown axes."""
        X = np.asarray(X, dtype=float)
        if X.ndim < self.ndim:
            raise ValueError(
                f"dimension mismatch: array has {X.ndim} axes, tree needs >= {self.ndim}"
            )
        for a, s in enumerate(X.shape[: self.ndim]):
            if s not in (1, self.shape[a]):
                raise ValueError(f"layer mismatch on outcome axis {a}: {s} vs {self.shape[a]}")
        known = self.known_axes(at)
        for a, ax in enumerate(self.axes):
            if a in known or X.shape[a] == 1:
                continue
            w = ax.probs.reshape((-1,) + (1,) * (X.ndim - a - 1))
            X = np.sum(X * w, axis=a, keepdims=True)
        return X

    def expect(self, X, lead: int = 0) -> np.ndarray:
        """Full expectation; ``lead`` leading axes (e.g. time) are kept."""
        X = np.asarray(X, dtype=float)
        for a, ax in enumerate(self.axes):
            pos = lead + a
            if X.shape[pos] == 1:
                continue
            w = ax.probs.reshape((-1,) + (1,) * (X.ndim - pos - 1))
            X = np.sum(X * w, axis=pos, keepdims=True)
        return X.reshape(X.shape[:lead] + X.shape[lead + self.ndim :])

    def full(self, X, value_shape: Sequence[int] = ()) -> np.ndarray:
        return np.broadcast_to(X, self.shape + tuple(value_shape))

    def is_measurable(self, X, at, atol: float = 1e-12) -> bool:
        X = np.asarray(X, dtype=float)
        return bool(np.allclose(self.cond_exp(X, at), X, rtol=0.0, atol=atol))

    # -- increments --------------------------------------------------------

    def _increment(self, kind: str, step: int, comps: int) -> np.ndarray:
        key = ("inc", kind, step)
        if key not in self._cache:
            parts = []
            for c in range(comps):
                a = self._axis_index(kind, step, c)
                if a is None:
                    parts.append(np.zeros((1,) * self.ndim))
                else:
                    parts.append(self._along(self.axes[a].values, a))
            if parts:
                arr = np.stack(np.broadcast_arrays(*parts), axis=-1)
            else:
                arr = np.zeros((1,) * self.ndim + (0,))
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def _axis_index(self, kind: str, step: int, comp: int) -> int | None:
        table = self._cache.get("axis_index")
        if table is None:
            table = {(ax.kind, ax.step, ax.comp): a for a, ax in enumerate(self.axes)}
            self._cache["axis_index"] = table
        return table.get((kind, step, comp))

    def _step_of(self, j: int) -> int:
        if not 0 <= j < self.N:
            raise IndexError(f"increment index {j} outside 0..{self.N - 1}")
        return self.N - 1 - j if self.reversed_view else j

    def _sign(self) -> float:
        return -1.0 if self.reversed_view else 1.0

    def dW(self, j: int) -> np.ndarray:
        """W increment over [t_j, t_{j+1}], trailing axis of size d."""
        return self._sign() * self._increment(_KIND_W, self._step_of(j), self.dims.d)

    def dB(self, j: int) -> np.ndarray:
        return self._sign() * self._increment(_KIND_B, self._step_of(j), self.dims.l)

    def dN(self, j: int) -> np.ndarray:
        """Jump indicators (raw counts, 0 or 1), trailing axis of size J."""
        if self.reversed_view:
            raise ValueError("raw jump counts are not defined on the reversed view")
        return self._increment(_KIND_N, j, self.marks.J)

    def dNt(self, j: int) -> np.ndarray:
        """Compensated jump increments N - Pi*dt, trailing axis of size J."""
        raw = self._increment(_KIND_N, self._step_of(j), self.marks.J)
        return self._sign() * (raw - self.marks.pi * self.dt)

    def _cumulative(self, fn, i: int, comps: int) -> np.ndarray:
        out = np.zeros((1,) * self.ndim + (comps,))
        for j in range(i):
            out = out + fn(j)
        return out

    def W(self, i: int) -> np.ndarray:
        return self._cumulative(self.dW, i, self.dims.d)

    def B(self, i: int) -> np.ndarray:
        return self._cumulative(self.dB, i, self.dims.l)

    def Nt(self, i: int) -> np.ndarray:
        return self._cumulative(self.dNt, i, self.marks.J)

    def reversed(self) -> "ScenarioTree":
        """Time-reversed view: step s of the view is step N-1-s of the tree,
        increments change sign (B_check_s = B_{T-s} - B_T) and the roles of
        the B axes and the W/eta axes swap.  Outcome axes are shared, so
        arrays move between the two views without copying.
        """
        view = self._cache.get("reversed")
        if view is None:
            view = ScenarioTree(self.grid, self.dims, self.marks, self.axes, not self.reversed_view)
            view._cache["reversed"] = self
            self._cache["reversed"] = view
        return view


def build_tree(
    grid: TimeGrid, dims: Dims, marks: MarkSpace, config: TreeConfig | None = None
) -> ScenarioTree:
    """Product-space noise model with one binary axis per component and step.

    With ``config.brownian`` false the W and B axes are dropped (their
    increments are identically 0) and only the jump axes remain, so a problem
    without jumps becomes a tree with no outcome axes at all.  The W or B
    axes alone can be dropped the same way.
    """
    config = config or TreeConfig()
    dt = grid.dt
    p = marks.pi * dt
    if np.any(p >= 1.0):
        raise ValueError("mark intensity too large for step: need Pi_j * dt < 1")
    per_step = dims.d * config.w_axes + dims.l * config.b_axes + marks.J
    n_axes = per_step * grid.steps
    if n_axes > 60 or 2**n_axes > config.node_cap:
        raise ValueError(
            f"tree too large: 2^{n_axes} leaves exceeds cap {config.node_cap}"
        )
    root = math.sqrt(dt)
    half = np.array([0.5, 0.5])
    signs = np.array([root, -root])
    axes = []
    for j in range(grid.steps):
        if config.w_axes:
            axes += [_Axis(_KIND_W, j, c, signs, half) for c in range(dims.d)]
        axes += [
            _Axis(_KIND_N, j, c, np.array([0.0, 1.0]), np.array([1 - p[c], p[c]]))
            for c in range(marks.J)
        ]
        if config.b_axes:
            axes += [_Axis(_KIND_B, j, c, signs, half) for c in range(dims.l)]
    return ScenarioTree(grid, dims, marks, tuple(axes))


def conditional_expectation(tree: ScenarioTree, X, at: InformationIndex | int) -> np.ndarray:
    """Exact ``E[X | at]`` broadcast back to the full outcome shape."""
    X = np.asarray(X, dtype=float)
    out = tree.cond_exp(X, at)
    return np.broadcast_to(out, np.broadcast_shapes(out.shape, X.shape))


# ---------------------------------------------------------------------------
# Regression engine over Monte Carlo paths


def _monomials(x: np.ndarray, degree: int) -> np.ndarray:
    cols = [np.ones(len(x))]
    k = x.shape[1]
    if degree >= 1:
        cols += [x[:, a] for a in range(k)]
    if degree >= 2:
        cols += [x[:, a] * x[:, b] for a in range(k) for b in range(a, k)]
    return np.stack(cols, axis=1)


class RegressionEngine:
    """Approximate conditional expectations on a :class:`PathBundle`.

    ``E[X | F_{t_i}]`` is the least-squares projection of ``X`` on polynomials
    (default degree 2) in the driver state that generates the information:
    ``W_{t_i}`` and ``Ntilde_{t_i}`` for the forward part and
    ``B_T - B_{t_i}`` for the backward part.  This is exact only for
    functionals of those summaries, which is the case for coefficient families
    that do not read ``z``.  Arrays carry one outcome axis of length ``P``.
    """

    def __init__(self, bundle: PathBundle, dims: Dims, degree: int = 2,
                 reversed_view: bool = False, _shared: dict | None = None):
        self.bundle = bundle
        self.dims = dims
        self.marks = bundle.marks
        self.grid = bundle.grid
        self.degree = degree
        self.reversed_view = reversed_view
        self._shared = {} if _shared is None else _shared

    N = property(lambda self: self.grid.steps)
    dt = property(lambda self: self.grid.dt)
    shape = property(lambda self: (self.bundle.paths,))
    ndim = 1
    is_deterministic = False

    @property
    def jump_variance(self) -> np.ndarray:
        return self.marks.pi * self.dt

    def _basis(self, i: int, filtration: str) -> np.ndarray:
        key = (i, filtration)
        if key not in self._shared:
            b = self.bundle
            parts = []
            if filtration in ("mixed", "W"):
                parts.append(b.dW[:, :i].sum(axis=1))
                parts.append(b.dN_compensated[:, :i].sum(axis=1))
            if filtration in ("mixed", "B"):
                parts.append(b.dB[:, i:].sum(axis=1))
            x = np.concatenate(parts, axis=1)
            self._shared[key] = linalg.orth(_monomials(x, self.degree))
        return self._shared[key]

    def cond_exp(self, X, at: InformationIndex | int) -> np.ndarray:
        if isinstance(at, (int, np.integer)):
            at = InformationIndex(int(at))
        X = np.asarray(X, dtype=float)
        if X.shape[0] == 1:
            return X
        if X.shape[0] != self.bundle.paths:
            raise ValueError(f"layer mismatch: {X.shape[0]} rows for {self.bundle.paths} paths")
        step, filtration = at.step, at.filtration
        if self.reversed_view:
            step = self.N - step
            filtration = {"W": "B", "B": "W"}.get(filtration, filtration)
        Q = self._basis(step, filtration)
        flat = X.reshape(len(X), -1)
        return (Q @ (Q.T @ flat)).reshape(X.shape)

    def expect(self, X, lead: int = 0) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X.mean(axis=lead)

    def full(self, X, value_shape: Sequence[int] = ()) -> np.ndarray:
        return np.broadcast_to(X, self.shape + tuple(value_shape))

    def _inc(self, arr: np.ndarray, j: int) -> np.ndarray:
        if not 0 <= j < self.N:
            raise IndexError(f"increment index {j} outside 0..{self.N - 1}")
        if self.reversed_view:
            return -arr[:, self.N - 1 - j]
        return arr[:, j]

    def dW(self, j: int) -> np.ndarray:
        return self._inc(self.bundle.dW, j)

    def dB(self, j: int) -> np.ndarray:
        return self._inc(self.bundle.dB, j)

    def dNt(self, j: int) -> np.ndarray:
        return self._inc(self.bundle.dN_compensated, j)

    def _cumulative(self, fn, i: int, comps: int) -> np.ndarray:
        out = np.zeros((1, comps))
        for j in range(i):
            out = out + fn(j)
        return out

    def W(self, i: int) -> np.ndarray:
        return self._cumulative(self.dW, i, self.dims.d)

    def B(self, i: int) -> np.ndarray:
        return self._cumulative(self.dB, i, self.dims.l)

    def Nt(self, i: int) -> np.ndarray:
        return self._cumulative(self.dNt, i, self.marks.J)

    def reversed(self) -> "RegressionEngine":
        return RegressionEngine(self.bundle, self.dims, self.degree,
                                not self.reversed_view, self._shared)
