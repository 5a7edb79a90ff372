"""Continuation in the homotopy parameter alpha from a decoupled start.

The family at parameter ``alpha`` has right-hand sides
``alpha * C(v) + (1 - alpha) * L(v)`` where ``C`` evaluates the coefficients
and ``L`` holds the linear self-coupling terms of the chosen variant (see
:func:`fbdsdej.decoupled.linear_terms`).  At ``alpha = 0`` the system is
decoupled; at ``alpha = 1`` it is the target system.

Advancing from a solved level ``alpha0`` by ``delta`` uses the map

    v_bar  ->  solution of the alpha0 system with extra forcing
               delta * (C(v_bar) - L(v_bar)),

whose fixed point solves the ``alpha0 + delta`` system.  The ``alpha0``
system inside the map is coupled; it is solved exactly with a Krylov method
(GMRES for affine coefficients, Newton-Krylov otherwise) on top of the
decoupled solver.  ``mode="flattened"`` instead freezes every coefficient
evaluation at the previous iterate and solves one decoupled system per step.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import newton_krylov
from scipy.sparse.linalg import LinearOperator, gmres

from .coefficients import (PRIMED, BoundaryNoise, CoefficientSet, Layout,
                           validate_theorem_preconditions)
from .decoupled import (FrozenForcing, SolutionField, check_variant, coefficient_forcing,
                        composite_distance, decoupled_solve, family_slots, linear_terms,
                        residual)


class PreconditionError(ValueError):
    """Declared constants violate the theorem hypotheses."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NoContraction(RuntimeError):
    pass


class ContinuationStalled(RuntimeError):
    pass


@dataclass
class ContinuationConfig:
    delta: float = 1.0
    adaptive: bool = True
    tolerance: float = 1e-12
    max_iterations: int = 200
    max_levels: int = 10_000
    delta_floor: float = 2.0**-20
    backend: str = "tree"
    mode: str = "split"
    variant: int | None = None
    inner_rtol: float = 1e-13
    # consecutive ratios above 1 that count as divergence
    divergence_run: int = 3
    # first iterate of every level instead of the previous level's solution
    init: SolutionField | None = None

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.mode not in ("split", "flattened"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class LevelReport:
    alpha_from: float
    alpha_to: float
    delta: float
    iterations: int
    distances: list[float]
    converged: bool
    residual: dict | None = None
    inner_iterations: int = 0

    @property
    def ratios(self) -> list[float]:
        d = self.distances
        return [d[k + 1] / d[k] for k in range(len(d) - 1) if d[k] > 0]

    def to_dict(self) -> dict:
        return {"alpha_from": self.alpha_from, "alpha_to": self.alpha_to,
                "delta": self.delta, "iterations": self.iterations,
                "distances": self.distances, "ratios": self.ratios,
                "converged": self.converged, "residual": self.residual,
                "inner_iterations": self.inner_iterations}


@dataclass
class ConvergenceReport:
    variant: int
    tolerance: float
    levels: list[LevelReport] = dc_field(default_factory=list)
    rejected: list[dict] = dc_field(default_factory=list)
    wall_time: float = 0.0
    verdict: str = "running"
    final_residual: dict | None = None

    def to_dict(self, timing: bool = True) -> dict:
        out = {"variant": self.variant, "tolerance": self.tolerance,
               "levels": [lv.to_dict() for lv in self.levels],
               "rejected": self.rejected, "verdict": self.verdict,
               "final_residual": self.final_residual}
        if timing:
            out["wall_time"] = self.wall_time
        return out


def choose_variant(coeffs: CoefficientSet) -> int:
    """1 for ``m > n``, 2 for ``m < n``; for ``m = n`` variant 1 when
    ``theta1, beta1 > 0`` and variant 2 otherwise."""
    dims, p = coeffs.dims, coeffs.monotone
    if dims.m > dims.n:
        return 1
    if dims.m < dims.n:
        return 2
    return 1 if (p.theta1 > 0 and p.beta1 > 0) else 2


# ---------------------------------------------------------------------------
# One level


class _Setup:
    """Everything a level solve needs, bound once per run."""

    def __init__(self, coeffs, engine, variant, config):
        self.coeffs = coeffs
        self.engine = engine
        self.variant = variant
        self.config = config
        self.sign = -1.0 if coeffs.orientation == PRIMED else 1.0
        self.noise = BoundaryNoise.from_engine(engine)
        self.layout = Layout(coeffs.dims, coeffs.marks.J)
        self.inner_iterations = 0

    def C(self, v):
        return coefficient_forcing(self.coeffs, v, self.engine, self.noise)

    def L(self, v):
        return linear_terms(self.variant, self.coeffs, v, self.sign)

    def solve(self, lin, forcing):
        return decoupled_solve(self.engine, self.coeffs, self.variant, lin, forcing, self.sign)

    def distance(self, u, v):
        return composite_distance(u, v, self.engine, self.coeffs.marks)

    def zero(self):
        return SolutionField.zeros(self.engine, self.layout)


def _solve_coupled(setup: _Setup, alpha0: float, extra: FrozenForcing,
                   guess: SolutionField) -> SolutionField:
    """Fixed point of ``v = D(alpha0 * C(v) + extra)`` with the implicit
    ``(1 - alpha0)`` linear terms; ``D`` is the decoupled solve."""
    lin = 1.0 - alpha0
    if alpha0 == 0.0:
        return setup.solve(lin, extra)

    def G(v: SolutionField) -> SolutionField:
        return setup.solve(lin, setup.C(v).scale(alpha0) + extra)

    template = guess
    x0 = guess.vector()
    tol = setup.config.inner_rtol
    if setup.coeffs.is_affine:
        g0 = G(setup.zero()).vector()
        zero = setup.zero()

        def matvec(x):
            setup.inner_iterations += 1
            # G(v) - G(0) is the linear part of the affine map
            return x - (G(template.from_vector(x)).vector() - g0)

        n = x0.size
        op = LinearOperator((n, n), matvec=matvec, dtype=float)
        scale = max(np.linalg.norm(g0), np.linalg.norm(x0), 1e-300)
        x, info = gmres(op, g0, x0=x0, rtol=tol, atol=tol * scale * 1e-3,
                        restart=min(n, 80), maxiter=200)
        if info != 0:
            res = np.linalg.norm(matvec(x) - g0)
            if not res <= 1e3 * tol * scale:
                raise NoContraction(f"inner solve did not converge (residual {res:.3e})")
        del zero
        return template.from_vector(x)

    def F(x):
        setup.inner_iterations += 1
        return x - G(template.from_vector(x)).vector()

    x = newton_krylov(F, x0, f_tol=tol * max(1.0, np.linalg.norm(x0)), method="gmres")
    return template.from_vector(x)


def picard_map(prev: SolutionField, alpha: float, coeffs: CoefficientSet, engine,
               variant: int | None = None, *, delta: float | None = None,
               mode: str = "split", forcing: FrozenForcing | None = None,
               guess: SolutionField | None = None,
               config: ContinuationConfig | None = None) -> SolutionField:
    """One application of the continuation map for the level ``alpha``.

    ``mode="split"``: coefficients at ``alpha - delta`` are kept implicit and
    the remaining ``delta`` part is frozen at ``prev`` (``delta`` defaults to
    ``alpha``).  ``mode="flattened"``: every coefficient evaluation is
    frozen at ``prev``.  A fixed point solves the ``alpha`` family either
    way.
    """
    variant = variant or choose_variant(coeffs)
    config = config or ContinuationConfig()
    setup = _Setup(coeffs, engine, variant, config)
    return _apply_map(setup, prev, alpha, alpha if delta is None else delta, mode,
                      forcing, guess)


def _apply_map(setup, prev, alpha, delta, mode, forcing=None, guess=None):
    base = forcing or FrozenForcing()
    if mode == "flattened":
        return setup.solve(1.0 - alpha, setup.C(prev).scale(alpha) + base)
    alpha0 = alpha - delta
    if abs(alpha0) < 1e-15:
        alpha0 = 0.0
    extra = (setup.C(prev) - setup.L(prev)).scale(delta) + base
    return _solve_coupled(setup, alpha0, extra, prev if guess is None else guess)


def _converged(d: float, ratio: float | None, tol: float) -> bool:
    if d == 0.0:
        return True
    if d > tol:
        return False
    if ratio is None or not ratio < 1.0:
        return d <= tol / 4
    # squared a-posteriori bound on the distance to the fixed point
    bound = d * ratio / (1.0 - math.sqrt(ratio)) ** 2
    return bound <= tol / 4


def _picard_level(setup: _Setup, start: SolutionField, alpha_to: float, delta: float,
                  mode: str) -> tuple[SolutionField, LevelReport]:
    cfg = setup.config
    alpha_from = alpha_to - delta
    report = LevelReport(alpha_from, alpha_to, delta, 0, [], False)
    inner0 = setup.inner_iterations
    current = start
    above = 0
    for k in range(cfg.max_iterations):
        nxt = _apply_map(setup, current, alpha_to, delta, mode)
        d = setup.distance(nxt, current)
        report.distances.append(d)
        report.iterations = k + 1
        ratio = d / report.distances[-2] if k and report.distances[-2] > 0 else None
        if not math.isfinite(d):
            raise NoContraction(f"distance not finite at iteration {k + 1}")
        above = above + 1 if (ratio is not None and ratio > 1.0) else 0
        current = nxt
        if _converged(d, ratio, cfg.tolerance):
            report.converged = True
            break
        if above >= cfg.divergence_run:
            raise NoContraction(f"ratios above 1 for {above} consecutive iterations")
    else:
        raise NoContraction(f"no convergence in {cfg.max_iterations} iterations")
    report.inner_iterations = setup.inner_iterations - inner0
    return current, report


def picard_solve(alpha: float, init: SolutionField, coeffs: CoefficientSet, engine,
                 variant: int | None = None, config: ContinuationConfig | None = None,
                 delta: float | None = None) -> tuple[SolutionField, LevelReport]:
    """Iterate the map for level ``alpha`` from ``init`` until the composite
    distance between successive iterates meets the tolerance.

    Raises :class:`NoContraction` when ratios stay above 1 or the iteration
    budget runs out.
    """
    variant = variant or choose_variant(coeffs)
    config = config or ContinuationConfig()
    setup = _Setup(coeffs, engine, variant, config)
    delta = alpha if delta is None else delta
    return _picard_level(setup, init, alpha, delta, config.mode)


# ---------------------------------------------------------------------------
# Full continuation


def continuation_solve(coeffs: CoefficientSet, config: ContinuationConfig | None = None,
                       engine=None) -> tuple[SolutionField, ConvergenceReport]:
    """Solve the coupled system by continuation from the decoupled start.

    The ladder starts from the exact (zero) solution at ``alpha = 0`` and
    advances by ``delta``; a level whose iteration does not contract is
    retried with half the step, down to ``config.delta_floor``.
    """
    config = config or ContinuationConfig()
    verdict = validate_theorem_preconditions(coeffs)
    if not verdict.valid:
        raise PreconditionError(verdict.violations)
    variant = config.variant or choose_variant(coeffs)
    check_variant(variant, coeffs)
    if config.backend == "mc" and coeffs.reads_z:
        warnings.warn("regression backend: coefficients read z, conditional "
                      "expectations on the B-future are approximate", RuntimeWarning)
    setup = _Setup(coeffs, engine, variant, config)
    report = ConvergenceReport(variant, config.tolerance)
    started = time.perf_counter()

    field = setup.zero()  # exact solution of the homogeneous decoupled start
    alpha, delta = 0.0, config.delta
    while alpha < 1.0:
        if len(report.levels) >= config.max_levels:
            report.verdict = "stalled"
            raise ContinuationStalled(f"more than {config.max_levels} levels")
        target = min(1.0, alpha + delta)
        step = target - alpha
        start = field if config.init is None else config.init
        try:
            new, level = _picard_level(setup, start, target, step, config.mode)
        except NoContraction as exc:
            report.rejected.append({"alpha_from": alpha, "delta": step, "reason": str(exc)})
            if not config.adaptive:
                report.verdict = "no contraction"
                raise
            delta = step / 2
            if delta < config.delta_floor:
                report.verdict = "stalled"
                raise ContinuationStalled(
                    f"continuation stalled at alpha={alpha:.6g}: delta below floor") from exc
            continue
        level.residual = residual(new, engine, family_slots(
            coeffs, variant, target, new, engine, sign=setup.sign, noise=setup.noise)).to_dict()
        report.levels.append(level)
        field, alpha = new, target

    report.final_residual = report.levels[-1].residual if report.levels else \
        residual(field, engine, family_slots(coeffs, variant, 1.0, field, engine,
                                             sign=setup.sign, noise=setup.noise)).to_dict()
    report.wall_time = time.perf_counter() - started
    report.verdict = "converged"
    return field, report


@dataclass
class ContractionSummary:
    max_ratio: float | None
    mean_ratio: float | None
    max_ratio_after_first: float | None
    deltas: list[float]
    immediate: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def measure_contraction(report: ConvergenceReport) -> ContractionSummary:
    """Ratio statistics over every level of a run.

    ``max_ratio_after_first`` skips the first ratio of each level, which
    compares against the distance from the warm start.  ``immediate`` flags
    runs with no ratios at all (every level converged in one step).
    """
    ratios = [r for lv in report.levels for r in lv.ratios]
    later = [r for lv in report.levels for r in lv.ratios[1:]]
    return ContractionSummary(
        max(ratios) if ratios else None,
        float(np.mean(ratios)) if ratios else None,
        max(later) if later else None,
        [lv.delta for lv in report.levels],
        not ratios,
    )


# ---------------------------------------------------------------------------
# Mirror problems


class MirrorEngine:
    """Reversed view of an engine with the drivers relabelled: the mirror's
    forward driver is the reversed B and its backward driver the reversed W.
    Only defined without jumps."""

    def __init__(self, engine):
        if engine.marks.J:
            raise ValueError("mirror problems need J = 0")
        from .noise import Dims
        self.base = engine
        self.view = engine.reversed()
        d = engine.dims
        self.dims = Dims(d.m, d.n, d.l, d.d)
        self.marks = engine.marks
        self.grid = engine.grid
        self.N, self.dt = engine.N, engine.dt
        self.shape = engine.shape
        self.ndim = len(engine.shape)
        self.is_deterministic = getattr(engine, "is_deterministic", False)
        self.jump_variance = engine.jump_variance

    def cond_exp(self, X, at):
        return self.view.cond_exp(X, at)

    def expect(self, X, lead=0):
        return self.view.expect(X, lead)

    def dW(self, j):
        return self.view.dB(j)

    def dB(self, j):
        return self.view.dW(j)

    def dNt(self, j):
        return self.view.dNt(j)

    def W(self, i):
        return self.view.B(i)

    def B(self, i):
        return self.view.W(i)

    def Nt(self, i):
        return self.view.Nt(i)

    def reversed(self):
        return _MirrorReversed(self)


class _MirrorReversed:
    def __init__(self, mirror):
        self.m = mirror
        self.N, self.dt, self.dims, self.marks = mirror.N, mirror.dt, mirror.dims, mirror.marks
        self.shape = mirror.shape

    def cond_exp(self, X, at):
        return self.m.base.cond_exp(X, at)

    def dW(self, j):
        return self.m.base.dB(j)

    def dB(self, j):
        return self.m.base.dW(j)

    def dNt(self, j):
        return self.m.base.dNt(j)


def mirror_system(coeffs: CoefficientSet) -> CoefficientSet:
    """Swap the roles of the forward and backward equations (no jumps).

    With ``y' = Y`` and ``Y' = y`` read in reversed time, ``z' = -Z`` and
    ``Z' = -z``, the mirror has ``b' = -f``, ``sigma' = g``, ``f' = -b``,
    ``g' = sigma``, ``Psi' = h``, ``h' = Psi`` and ``R' = -R^T``; the
    monotonicity constants swap (``theta1 <-> theta2``, ``beta1 <-> beta2``).
    """
    from .coefficients import Layout as _L, LipschitzConstants, MonotoneParams, general_affine_family
    from .noise import Dims
    if coeffs.marks.J:
        raise ValueError("mirror problems need J = 0")
    if not coeffs.is_affine:
        raise ValueError("mirror problems need affine coefficients")
    d = coeffs.dims
    mdims = Dims(d.m, d.n, d.l, d.d)
    src, dst = _L(d, 0), _L(mdims, 0)
    # u = P u' (original coordinates from mirror coordinates)
    P = np.zeros((src.size, dst.size))
    s, t = src.slices, dst.slices
    P[s["y"], t["Y"]] = np.eye(d.n)
    P[s["Y"], t["y"]] = np.eye(d.m)
    P[s["z"], t["Z"]] = -np.eye(d.n * d.l)
    P[s["Z"], t["z"]] = -np.eye(d.m * d.d)
    A = coeffs.affine
    M, c = A.matrices, A.offsets
    matrices = {"b": -M["f"] @ P, "sigma": M["g"] @ P, "f": -M["b"] @ P,
                "g": M["sigma"] @ P, "Psi": M["h"], "h": M["Psi"]}
    offsets = {"b": -c["f"], "sigma": c["g"], "f": -c["b"], "g": c["sigma"],
               "Psi": c["h"], "h": c["Psi"]}
    p = coeffs.monotone
    return general_affine_family(
        mdims, coeffs.marks, -coeffs.R.T, matrices, offsets,
        psi_B=-A.h_W, h_W=-A.psi_B,
        monotone=MonotoneParams(p.theta2, p.theta1, p.beta2, p.beta1),
        constants=LipschitzConstants(coeffs.constants.c, coeffs.constants.gamma,
                                     coeffs.constants.gamma_prime),
        orientation=coeffs.orientation, name=f"Mirror({coeffs.name})",
    )


def mirror_field(field: SolutionField) -> SolutionField:
    """Map a solution to the mirror variables (see :func:`mirror_system`)."""
    return SolutionField(field.Y[::-1].copy(), field.y[::-1].copy(),
                         -field.Z[::-1].copy(), -field.z[::-1].copy(),
                         np.zeros(field.y.shape[:-1] + (field.y.shape[-1], 0)))
