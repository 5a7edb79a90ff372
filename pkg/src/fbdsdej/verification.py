"""Independent oracles and end-to-end checks.

The brute-force fixed point here deliberately shares nothing with the
continuation machinery beyond the :class:`SolutionField` container: it
evaluates the coefficients, steps both recursions itself and iterates a
damped fixed-point map on the whole node-indexed unknown.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

from .coefficients import BoundaryNoise, CoefficientSet, MonotoneParams, Quintuple
from .continuation import ContinuationConfig, continuation_solve
from .decoupled import SolutionField, composite_distance
from .noise import Dims, MarkSpace, TreeConfig, build_tree, make_grid


# ---------------------------------------------------------------------------
# Linear two-point boundary value problem


@dataclass(frozen=True)
class LinearBVPSpec:
    theta1: float
    theta2: float
    beta1: float
    beta2: float
    psi0: float
    phi0: float
    T: float = 1.0

    def __post_init__(self):
        bad = [v for v in MonotoneParams(self.theta1, self.theta2, self.beta1,
                                         self.beta2).violations(Dims(1, 1, 1, 1))
               if ">=0" in v]
        if bad:
            raise ValueError(f"invalid constants: {', '.join(bad)}")
        if not self.T > 0:
            raise ValueError("nonpositive horizon")


@dataclass
class BVPSolution:
    t: np.ndarray
    y: np.ndarray
    Y: np.ndarray


def linear_bvp_oracle(spec: LinearBVPSpec, N: int = 64) -> BVPSolution:
    """Exact ``(y, Y)`` of ``y' = -theta2 Y``, ``Y' = -theta1 y`` with
    ``y(0) = -beta2 Y(0) + psi0`` and ``Y(T) = beta1 y(T) + phi0`` on the
    ``N``-step grid."""
    A = np.array([[0.0, -spec.theta2], [-spec.theta1, 0.0]])
    E = expm(A * spec.T)
    # unknowns (y0, Y0)
    S = np.array([[1.0, spec.beta2],
                  [E[1, 0] - spec.beta1 * E[0, 0], E[1, 1] - spec.beta1 * E[0, 1]]])
    if np.linalg.cond(S) > 1e12:
        raise ValueError("singular boundary system")
    x0 = np.linalg.solve(S, [spec.psi0, spec.phi0])
    t = make_grid(spec.T, N).nodes
    traj = np.stack([expm(A * s) @ x0 for s in t])
    return BVPSolution(t, traj[:, 0], traj[:, 1])


# ---------------------------------------------------------------------------
# Brute-force global fixed point


class NonUniqueness(RuntimeError):
    pass


def _jacobi_image(coeffs: CoefficientSet, tree, v: SolutionField, noise) -> SolutionField:
    """Both recursions with every coefficient frozen at ``v``."""
    N, dt = tree.N, tree.dt
    t = tree.grid.nodes.reshape((-1,) + (1,) * len(tree.shape))
    ev = coeffs.evaluate(t, v)
    b, sig, phi, f, g = (ev[k] for k in ("b", "sigma", "phi", "f", "g"))
    J = coeffs.marks.J
    y, z = np.zeros_like(v.y), np.zeros_like(v.z)
    Y, Z, k = np.zeros_like(v.Y), np.zeros_like(v.Z), np.zeros_like(v.k)

    def dot(M, inc):
        inc = np.asarray(inc)
        return np.einsum("...ab,...b->...a", M, np.broadcast_to(inc, M.shape[:-2] + inc.shape[-1:]))

    def outer(x, inc):
        return np.einsum("...a,...b->...ab", x, np.broadcast_to(inc, x.shape[:-1] + np.shape(inc)[-1:]))

    y[0] = np.broadcast_to(coeffs.Psi(v.Y[0], noise), y[0].shape)
    for i in range(N):
        X = y[i] + b[i] * dt + dot(sig[i], tree.dW(i)) + dot(phi[i], tree.dNt(i))
        y[i + 1] = tree.cond_exp(X, i + 1)
        z[i + 1] = tree.cond_exp(outer(X, tree.dB(i)), i + 1) / dt
    z[0] = tree.cond_exp(z[1], 0)

    Y[N] = np.broadcast_to(coeffs.h(v.y[N], noise), Y[N].shape)
    var = tree.jump_variance
    for i in reversed(range(N)):
        M = Y[i + 1] - f[i] * dt - dot(g[i + 1], tree.dB(i))
        Y[i] = tree.cond_exp(M, i)
        Z[i] = tree.cond_exp(outer(M, tree.dW(i)), i) / dt
        if J:
            k[i] = tree.cond_exp(outer(M, tree.dNt(i)), i) / var
    Z[N] = tree.cond_exp(Z[N - 1], N)
    if J:
        k[N] = tree.cond_exp(k[N - 1], N)
    return SolutionField(y, Y, z, Z, k)


def _sup(v: Quintuple) -> float:
    return max((float(np.max(np.abs(p))) for p in v.parts() if p.size), default=0.0)


def brute_force_fixed_point(coeffs: CoefficientSet, tree, tolerance: float = 1e-11, *,
                            damping: float = 0.5, restarts: int = 8, seed: int = 0,
                            max_iterations: int = 20_000,
                            max_unknowns: int = 100_000) -> SolutionField:
    """Damped fixed-point iteration ``v <- (1 - w) v + w T(v)`` over the full
    unknown vector from ``restarts`` random starts.

    Converges when the sup-norm step is below ``tolerance``; every restart
    must land within ``10 * tolerance`` of the first, otherwise
    :class:`NonUniqueness` is raised.
    """
    lead = (tree.N + 1,) + tuple(tree.shape)
    shapes = coeffs.layout.shapes
    unknowns = math.prod(lead) * sum(math.prod(s) for s in shapes.values())
    if unknowns > max_unknowns:
        raise ValueError(f"tree too large for the brute-force oracle ({unknowns} unknowns)")
    noise = BoundaryNoise(tree.B(tree.N), tree.W(tree.N), tree.Nt(tree.N))
    rng = np.random.default_rng(seed)
    found: list[SolutionField] = []
    for r in range(restarts):
        v = SolutionField(*(rng.standard_normal(lead + s) for s in shapes.values()))
        for _ in range(max_iterations):
            image = _jacobi_image(coeffs, tree, v, noise)
            step = _sup(image - v)
            v = v.scale(1.0 - damping) + image.scale(damping)
            if step <= tolerance:
                v = image
                break
            if not np.isfinite(step) or step > 1e12:
                raise RuntimeError(f"brute-force iteration diverged (restart {r})")
        else:
            raise RuntimeError(f"brute-force iteration did not converge (restart {r})")
        if found and _sup(v - found[0]) > 10 * tolerance:
            raise NonUniqueness(f"possible non-uniqueness: restart {r} differs by "
                                f"{_sup(v - found[0]):.3e}")
        found.append(v)
    return found[0]


# ---------------------------------------------------------------------------
# Uniqueness


def random_field(engine, coeffs: CoefficientSet, seed, scale: float = 1.0) -> SolutionField:
    rng = np.random.default_rng(seed)
    lead = (engine.N + 1,) + tuple(engine.shape)
    return SolutionField(*(scale * rng.standard_normal(lead + s)
                           for s in coeffs.layout.shapes.values()))


def uniqueness_probe(coeffs: CoefficientSet, engine, config: ContinuationConfig | None = None,
                     trials: int = 5, seed: int = 0, threads: int = 1) -> float:
    """Largest pairwise composite distance between solutions started from
    ``trials`` independent random fields."""
    if trials < 2:
        raise ValueError("trials must be >= 2")
    config = config or ContinuationConfig()

    def run(t):
        init = random_field(engine, coeffs, seed=[seed, t])
        return continuation_solve(coeffs, replace(config, init=init), engine)[0]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        fields = list(pool.map(run, range(trials)))
    return max(composite_distance(a, b, engine, coeffs.marks)
               for a, b in itertools.combinations(fields, 2))


# ---------------------------------------------------------------------------
# Decay in the step size


def integral_residual(field: SolutionField, engine, coeffs: CoefficientSet) -> float:
    """Gap between the solved field and the integral form of the equations
    with the drift integrals taken by the trapezoid rule.

    The stochastic integrals are Riemann sums by definition, so only the
    ``dt``-integrals carry quadrature error; the returned value is the
    largest ``E|.|`` gap over nodes for ``y`` and ``Y``.
    """
    N, dt = engine.N, engine.dt
    t = engine.grid.nodes.reshape((-1,) + (1,) * len(engine.shape))
    ev = coeffs.evaluate(t, field)
    b, f = ev["b"], ev["f"]
    # scheme uses left-point drifts; the trapezoid correction accumulates
    corr_b = np.cumsum(0.5 * dt * (b[1:] - b[:-1]), axis=0)
    corr_f = np.cumsum((0.5 * dt * (f[1:] - f[:-1]))[::-1], axis=0)[::-1]
    gap_y = max(float(engine.expect(np.abs(corr_b[i]).sum(-1))) for i in range(N))
    gap_Y = max(float(engine.expect(np.abs(corr_f[i]).sum(-1))) for i in range(N))
    return max(gap_y, gap_Y)


@dataclass
class DecayRow:
    N: int
    dt: float
    residual: float
    error: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DecayTable:
    rows: list[DecayRow]
    residual_slope: float | None
    error_slope: float | None
    flagged: str | None

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "residual_slope": self.residual_slope,
                "error_slope": self.error_slope, "flagged": self.flagged}


def _slope(dts, values):
    v = np.asarray(values, dtype=float)
    if len(v) < 2 or np.any(~np.isfinite(v)) or np.any(v <= 0):
        return None
    return float(np.polyfit(np.log(dts), np.log(v), 1)[0])


def canonical_oracle(coeffs: CoefficientSet, T: float):
    """Oracle for the mean of a scalar canonical family, or ``None``."""
    d = coeffs.dims
    if (d.n, d.m) != (1, 1) or not coeffs.name.startswith("CanonicalMonotone") \
            or coeffs.params.get("flipped") or not np.allclose(coeffs.R, 1.0):
        return None
    p = coeffs.monotone
    spec = LinearBVPSpec(p.theta1, p.theta2, p.beta1, p.beta2,
                         float(coeffs.affine.offsets["Psi"][0]),
                         float(coeffs.affine.offsets["h"][0]), T)
    return lambda N: linear_bvp_oracle(spec, N)


def decay_study(coeffs: CoefficientSet, sizes=(2, 4, 8, 16), *, T: float = 1.0,
                tree_config: TreeConfig | None = None,
                config: ContinuationConfig | None = None, oracle=None,
                threads: int = 1) -> DecayTable:
    """Solve on trees of each size and tabulate the integral-form residual
    and the max-node error of the means against ``oracle`` (derived for
    scalar canonical families when not given); slopes are least-squares fits
    in log-log."""
    tree_config = tree_config or TreeConfig()
    config = config or ContinuationConfig()
    oracle = oracle or canonical_oracle(coeffs, T)

    def run(N):
        tree = build_tree(make_grid(T, N), coeffs.dims, coeffs.marks, tree_config)
        field, _ = continuation_solve(coeffs, config, tree)
        err = None
        if oracle is not None:
            ref = oracle(N)
            Ey = tree.expect(field.y[..., 0], lead=1)
            EY = tree.expect(field.Y[..., 0], lead=1)
            err = float(max(np.max(np.abs(Ey - ref.y)), np.max(np.abs(EY - ref.Y))))
        return DecayRow(N, T / N, integral_residual(field, tree, coeffs), err)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(run, sizes))
    dts = [r.dt for r in rows]
    res_slope = _slope(dts, [r.residual for r in rows])
    err_slope = _slope(dts, [r.error for r in rows]) if oracle is not None else None
    flagged = None
    if all(r.residual == 0 for r in rows) and all(not r.error for r in rows):
        flagged = "zero problem: nothing decays, slope undefined"
    elif res_slope is None:
        flagged = "residual slope undefined"
    return DecayTable(rows, res_slope, err_slope, flagged)


def jump_bvp_family(theta1=1.0, theta2=1.0, beta1=1.0, beta2=0.0, psi0=1.0, phi0=0.0,
                    intensity=0.5, h_N=0.5):
    """Scalar canonical family with one mark and a jump loading on the
    terminal condition; its means solve the deterministic boundary problem."""
    from .coefficients import canonical_monotone_family
    return canonical_monotone_family(
        Dims(1, 1, 1, 1), MarkSpace((intensity,)), theta1=theta1, theta2=theta2,
        beta1=beta1, beta2=beta2, psi0=psi0, phi0=phi0, h_N=np.array([[h_N]]))
