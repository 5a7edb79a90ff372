"""Exact solves of decoupled systems on a noise engine.

Discrete system on the grid ``t_0 < ... < t_N`` (``E_i`` is the conditional
expectation given the information at node ``i``):

    y_{i+1} = y_i + b_i dt + sigma_i dW_i + phi_i dNt_i - z_{i+1} dB_i
    Y_i     = Y_{i+1} - f_i dt - g_{i+1} dB_i - Z_i dW_i - k_i dNt_i

so ``y_{i+1} = E_{i+1}[X_i]`` with ``X_i`` the right side without the ``z``
term, ``z_{i+1}`` is the projection of ``X_i`` on ``dB_i``, ``Y_i = E_i[M_i]``
with ``M_i = Y_{i+1} - f_i dt - g_{i+1} dB_i``, and ``Z_i``, ``k_i`` are the
projections of ``M_i`` on ``dW_i`` and on the compensated jump indicators
(divided by their exact variance).

Fields are node-indexed: ``y, Y`` at node ``i``; ``z[i+1]`` is the backward
integrand on ``[t_i, t_{i+1}]``; ``Z[i], k[i]`` the forward integrands on the
same interval.  The entries with no interval are filled by
``z[0] = E_0[z[1]]``, ``Z[N] = E_N[Z[N-1]]``, ``k[N] = E_N[k[N-1]]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .coefficients import BoundaryNoise, CoefficientSet, Layout, Quintuple

FORCING_PARTS = ("b", "sigma", "phi", "f", "g", "psi", "terminal")


class SolutionField(Quintuple):
    """Quintuple with a leading node axis of length ``N + 1``."""

    @classmethod
    def zeros(cls, engine, layout: Layout) -> "SolutionField":
        lead = (engine.N + 1,) + tuple(engine.shape)
        return cls(*(np.zeros(lead + s) for s in layout.shapes.values()))

    def node(self, i: int) -> Quintuple:
        return Quintuple(*(x[i] for x in self.parts()))

    def vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(x) for x in self.parts()])

    def from_vector(self, x: np.ndarray) -> "SolutionField":
        parts, pos = [], 0
        for p in self.parts():
            parts.append(np.asarray(x[pos:pos + p.size]).reshape(p.shape))
            pos += p.size
        return SolutionField(*parts)


def _pair(h, inc):
    """Contract the trailing axis of ``h`` with the driver ``inc``."""
    inc = np.asarray(inc)
    extra = np.ndim(h) - inc.ndim
    inc = inc.reshape(inc.shape[:-1] + (1,) * extra + inc.shape[-1:])
    return np.sum(h * inc, axis=-1)


def _outer(M, inc):
    return M[..., :, None] * np.asarray(inc)[..., None, :]


def _full(engine, x, value_shape):
    return np.broadcast_to(x, tuple(engine.shape) + tuple(value_shape))


def _time(engine):
    return engine.grid.nodes.reshape((-1,) + (1,) * len(engine.shape))


# ---------------------------------------------------------------------------
# Norms


def _integrand_sq(field: Quintuple, marks) -> np.ndarray:
    """Per node ``|y_i|^2 + |Y_i|^2 + ||z_{i+1}||^2 + ||Z_i||^2 + |||k_i|||^2``
    for ``i < N``."""
    shifted = Quintuple(field.y[:-1], field.Y[:-1], field.z[1:], field.Z[:-1], field.k[:-1])
    return shifted.pointwise_norm_sq(marks)


def h2_norm(field: SolutionField, engine, marks) -> float:
    """``sqrt(E int_0^T |v_s|^2 ds)`` with the discrete integrand above."""
    per_node = engine.expect(_integrand_sq(field, marks), lead=1)
    return float(np.sqrt(np.sum(per_node) * engine.dt))


def h2_distance(u: SolutionField, v: SolutionField, engine, marks) -> float:
    return h2_norm(u - v, engine, marks)


def composite_distance(u: SolutionField, v: SolutionField, engine, marks) -> float:
    """``E int_0^T |u - v|^2 ds + E|y_T - y'_T|^2 + E|Y_0 - Y'_0|^2``.

    This is a squared quantity, the norm in which the continuation map
    contracts.
    """
    if u.y.shape != v.y.shape:
        raise ValueError(f"mismatched fields: {u.y.shape} vs {v.y.shape}")
    d = u - v
    body = np.sum(engine.expect(_integrand_sq(d, marks), lead=1)) * engine.dt
    yT = engine.expect(np.sum(d.y[-1] ** 2, -1))
    Y0 = engine.expect(np.sum(d.Y[0] ** 2, -1))
    return float(body + yT + Y0)


# ---------------------------------------------------------------------------
# Forcings


@dataclass
class FrozenForcing:
    """Known node-indexed forcings plus boundary data.

    ``b, sigma, phi, f, g`` are node-indexed; ``psi`` is the initial value
    added to ``y_0`` and ``terminal`` the value added to ``Y_N``.  ``None``
    means zero.
    """

    b: np.ndarray | None = None
    sigma: np.ndarray | None = None
    phi: np.ndarray | None = None
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    psi: np.ndarray | None = None
    terminal: np.ndarray | None = None

    def _zip(self, other, fn):
        out = {}
        for f in dc_fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            out[f.name] = a if b is None else b if a is None else fn(a, b)
        return FrozenForcing(**out)

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, c: float) -> "FrozenForcing":
        return FrozenForcing(**{f.name: None if getattr(self, f.name) is None
                                else c * getattr(self, f.name) for f in dc_fields(self)})

    def get(self, name, engine, shape):
        x = getattr(self, name)
        lead = () if name in ("psi", "terminal") else (engine.N + 1,)
        full = lead + tuple(engine.shape) + tuple(shape)
        if x is None:
            return np.zeros(lead + (1,) * len(engine.shape) + tuple(shape))
        x = np.asarray(x, dtype=float)
        try:
            np.broadcast_shapes(x.shape, full)
        except ValueError:
            raise ValueError(f"shape mismatch: forcing {name} is {x.shape}, expected {full}") from None
        return x


def coefficient_forcing(coeffs: CoefficientSet, field: SolutionField, engine,
                        noise: BoundaryNoise | None = None) -> FrozenForcing:
    """Every coefficient evaluated on ``field`` (frozen at that field)."""
    ev = coeffs.evaluate(_time(engine), field)
    return FrozenForcing(
        ev["b"], ev["sigma"], ev["phi"], ev["f"], ev["g"],
        coeffs.Psi(field.Y[0], noise), coeffs.h(field.y[-1], noise),
    )


def linear_terms(variant: int, coeffs: CoefficientSet, field: Quintuple,
                 sign: float = 1.0) -> FrozenForcing:
    """The self-coupling terms the homotopy starts from.

    Variant 1: ``f = -theta1 R y``, ``g = -theta1 R z``, terminal
    ``+theta1 R y_N``.  Variant 2: ``b = -theta2 R^T Y``,
    ``sigma = -theta2 R^T Z``, ``phi = -theta2 R^T k``, initial
    ``-R^T Y_0``.  ``sign = -1`` flips all of them (reversed inequalities).
    """
    R, p = coeffs.R, coeffs.monotone
    if variant == 1:
        c = sign * p.theta1
        return FrozenForcing(
            f=-c * (field.y @ R.T),
            g=-c * np.einsum("mn,...nl->...ml", R, field.z),
            terminal=c * (field.y[-1] @ R.T),
        )
    if variant == 2:
        c = sign * p.theta2
        return FrozenForcing(
            b=-c * (field.Y @ R),
            sigma=-c * np.einsum("nm,...md->...nd", R.T, field.Z),
            phi=-c * np.einsum("nm,...mj->...nj", R.T, field.k),
            psi=-sign * (field.Y[0] @ R),
        )
    raise ValueError(f"unknown variant {variant!r}")


def family_slots(coeffs: CoefficientSet, variant: int, alpha: float, field: SolutionField,
                 engine, forcing: FrozenForcing | None = None, sign: float = 1.0,
                 noise: BoundaryNoise | None = None) -> FrozenForcing:
    """Right-hand sides of the alpha-family evaluated at ``field``:
    ``alpha * coefficients + (1 - alpha) * linear terms + forcing``."""
    out = coefficient_forcing(coeffs, field, engine, noise).scale(alpha)
    out = out + linear_terms(variant, coeffs, field, sign).scale(1.0 - alpha)
    return out if forcing is None else out + forcing


# ---------------------------------------------------------------------------
# Sweeps


def _deterministic(engine) -> bool:
    return getattr(engine, "is_deterministic", False)


def solve_backward_component(engine, f, g, terminal, *, var_jump=None):
    """``(Y, Z, k)`` of the backward equation with known ``f``, ``g`` and
    terminal value; every conditional expectation is taken on ``engine``."""
    N, dt = engine.N, engine.dt
    m = np.shape(terminal)[-1]
    d, J, l = engine.dims.d, engine.marks.J, engine.dims.l
    lead = (N + 1,) + tuple(engine.shape)
    f = np.broadcast_to(f, lead + (m,))
    if _deterministic(engine):
        # no outcome axes: the sweep is a reversed cumulative sum
        tail = np.concatenate([np.cumsum(f[:N][::-1], axis=0)[::-1], np.zeros((1, m))])
        Y = terminal - dt * tail
        return Y, np.zeros(lead + (m, d)), np.zeros(lead + (m, J))
    g = np.broadcast_to(g, lead + (m, l))
    var = engine.jump_variance if var_jump is None else var_jump
    Y = np.empty(lead + (m,))
    Z = np.empty(lead + (m, d))
    k = np.empty(lead + (m, J))
    Y[N] = _full(engine, terminal, (m,))
    for i in range(N - 1, -1, -1):
        M = Y[i + 1] - f[i] * dt - _pair(g[i + 1], engine.dB(i))
        Y[i] = engine.cond_exp(M, i)
        Z[i] = engine.cond_exp(_outer(M, engine.dW(i)), i) / dt
        if J:
            k[i] = engine.cond_exp(_outer(M, engine.dNt(i)), i) / var
    Z[N] = engine.cond_exp(Z[N - 1], N)
    k[N] = engine.cond_exp(k[N - 1], N) if J else 0.0
    return Y, Z, k


def forward_recursion(engine, b, sigma, phi, initial):
    """``(y, z)`` of the forward doubly stochastic equation, stepping forward.

    ``y_{i+1} = E_{i+1}[X_i]`` and ``z_{i+1} = E_{i+1}[X_i dB_i^T] / dt``.
    """
    N, dt = engine.N, engine.dt
    n = np.shape(initial)[-1]
    d, J, l = engine.dims.d, engine.marks.J, engine.dims.l
    lead = (N + 1,) + tuple(engine.shape)
    b = np.broadcast_to(b, lead + (n,))
    if _deterministic(engine):
        head = np.concatenate([np.zeros((1, n)), np.cumsum(b[:N], axis=0)])
        return initial + dt * head, np.zeros(lead + (n, l))
    sigma = np.broadcast_to(sigma, lead + (n, d))
    phi = np.broadcast_to(phi, lead + (n, J))
    y = np.empty(lead + (n,))
    z = np.empty(lead + (n, l))
    y[0] = _full(engine, initial, (n,))
    for i in range(N):
        X = y[i] + b[i] * dt + _pair(sigma[i], engine.dW(i)) + _pair(phi[i], engine.dNt(i))
        y[i + 1] = engine.cond_exp(X, i + 1)
        z[i + 1] = engine.cond_exp(_outer(X, engine.dB(i)), i + 1) / dt
    z[0] = engine.cond_exp(z[1], 0)
    return y, z


def solve_forward_doubly_component(engine, b, sigma, phi, initial):
    """``(y, z)`` of the forward equation solved as a backward equation in
    reversed time.

    With ``y_check[s] = y[N-s]`` and the reversed drivers the forward
    equation becomes ``y_check_s = E_s[M_s]`` where
    ``M_s = y_check_{s+1} + b_check_{s+1} dt - sigma_check_{s+1} dW_check_s
    - phi_check_{s+1} dNt_check_s`` and ``z_check_s`` is minus the projection
    of ``M_s`` on ``dB_check_s``.  ``y_check_N = y_0`` is the initial value.
    """
    N, dt = engine.N, engine.dt
    n = np.shape(initial)[-1]
    d, J, l = engine.dims.d, engine.marks.J, engine.dims.l
    lead = (N + 1,) + tuple(engine.shape)
    if _deterministic(engine):
        return forward_recursion(engine, b, sigma, phi, initial)
    rev = engine.reversed()
    bc = np.broadcast_to(b, lead + (n,))[::-1]
    sc = np.broadcast_to(sigma, lead + (n, d))[::-1]
    pc = np.broadcast_to(phi, lead + (n, J))[::-1]
    yc = np.empty(lead + (n,))
    zc = np.empty(lead + (n, l))
    yc[N] = _full(engine, initial, (n,))
    for s in range(N - 1, -1, -1):
        M = yc[s + 1] + bc[s + 1] * dt - _pair(sc[s + 1], rev.dW(s)) - _pair(pc[s + 1], rev.dNt(s))
        yc[s] = rev.cond_exp(M, s)
        zc[s] = -rev.cond_exp(_outer(M, rev.dB(s)), s) / dt
    y, z = yc[::-1].copy(), zc[::-1].copy()
    z[0] = engine.cond_exp(z[1], 0)
    return y, z


# ---------------------------------------------------------------------------
# Decoupled systems


def decoupled_solve(engine, coeffs: CoefficientSet, variant: int, lin: float,
                    forcing: FrozenForcing, sign: float = 1.0,
                    forward=solve_forward_doubly_component) -> SolutionField:
    """Solve the system whose right-hand sides are ``forcing`` plus
    ``lin`` times the linear self-coupling terms of ``variant``.

    Variant 1 solves the forward part first (its forcing is fully known) and
    then the backward part with the ``y``- and ``z``-terms; variant 2 solves
    the backward part first and feeds ``Y, Z, k`` into the forward part.
    """
    dims, J = coeffs.dims, coeffs.marks.J
    n, m, d, l = dims.n, dims.m, dims.d, dims.l
    F = forcing
    if variant == 1:
        y, z = forward(engine, F.get("b", engine, (n,)), F.get("sigma", engine, (n, d)),
                       F.get("phi", engine, (n, J)), F.get("psi", engine, (n,)))
        L = linear_terms(1, coeffs, _partial(y=y, z=z), sign).scale(lin)
        Y, Z, k = solve_backward_component(
            engine, F.get("f", engine, (m,)) + L.f, F.get("g", engine, (m, l)) + L.g,
            F.get("terminal", engine, (m,)) + L.terminal)
    elif variant == 2:
        Y, Z, k = solve_backward_component(
            engine, F.get("f", engine, (m,)), F.get("g", engine, (m, l)),
            F.get("terminal", engine, (m,)))
        L = linear_terms(2, coeffs, _partial(Y=Y, Z=Z, k=k), sign).scale(lin)
        y, z = forward(engine, F.get("b", engine, (n,)) + L.b,
                       F.get("sigma", engine, (n, d)) + L.sigma,
                       F.get("phi", engine, (n, J)) + L.phi,
                       F.get("psi", engine, (n,)) + L.psi)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return SolutionField(y, Y, z, Z, k)


def _partial(**parts):
    full = dict.fromkeys(Quintuple.PARTS)
    full.update(parts)
    return Quintuple(**full)


def check_variant(variant: int, coeffs: CoefficientSet) -> None:
    dims = coeffs.dims
    if variant == 1 and dims.m < dims.n:
        raise ValueError("variant/dims mismatch: variant 1 needs m >= n")
    if variant == 2 and dims.m > dims.n:
        raise ValueError("variant/dims mismatch: variant 2 needs m <= n")


def solve_alpha0(engine, forcing: FrozenForcing, variant: int, coeffs: CoefficientSet,
                 sign: float = 1.0) -> SolutionField:
    """The decoupled start of the homotopy (parameter 0) for ``variant``."""
    check_variant(variant, coeffs)
    return decoupled_solve(engine, coeffs, variant, 1.0, forcing, sign)


# ---------------------------------------------------------------------------
# Residuals


@dataclass
class ResidualReport:
    forward_max: float
    forward_l2: float
    backward_max: float
    backward_l2: float
    initial: float
    terminal: float

    def to_dict(self) -> dict:
        return {k.name: getattr(self, k.name) for k in dc_fields(self)}

    @property
    def worst(self) -> float:
        return max(self.forward_max, self.backward_max, self.initial, self.terminal)


def residual(field: SolutionField, engine, slots: FrozenForcing) -> ResidualReport:
    """Plug ``field`` into both discrete equations and both boundary
    conditions with right-hand sides ``slots`` (see :func:`family_slots`).

    ``*_l2`` is ``sqrt(sum_i E|r_i|^2)``; ``*_max`` the largest entry.
    """
    N, dt = engine.N, engine.dt
    n, m = field.y.shape[-1], field.Y.shape[-1]
    d, l, J = field.Z.shape[-1], field.z.shape[-1], field.k.shape[-1]
    b = slots.get("b", engine, (n,))
    sigma = slots.get("sigma", engine, (n, d))
    phi = slots.get("phi", engine, (n, J))
    f = slots.get("f", engine, (m,))
    g = slots.get("g", engine, (m, l))
    fmax = bmax = 0.0
    fsq = bsq = 0.0
    for i in range(N):
        dW, dB, dNt = engine.dW(i), engine.dB(i), engine.dNt(i)
        rf = field.y[i + 1] - (field.y[i] + b[i] * dt + _pair(sigma[i], dW)
                               + _pair(phi[i], dNt) - _pair(field.z[i + 1], dB))
        rb = field.Y[i] - (field.Y[i + 1] - f[i] * dt - _pair(g[i + 1], dB)
                           - _pair(field.Z[i], dW) - _pair(field.k[i], dNt))
        fmax = max(fmax, float(np.max(np.abs(rf))))
        bmax = max(bmax, float(np.max(np.abs(rb))))
        fsq += float(engine.expect(np.sum(rf**2, -1)))
        bsq += float(engine.expect(np.sum(rb**2, -1)))
    r0 = field.y[0] - slots.get("psi", engine, (n,))
    rT = field.Y[N] - slots.get("terminal", engine, (m,))
    return ResidualReport(fmax, float(np.sqrt(fsq)), bmax, float(np.sqrt(bsq)),
                          float(np.max(np.abs(r0))), float(np.max(np.abs(rT))))


def apply_fills(field: SolutionField, engine) -> SolutionField:
    """Re-derive the interval-free entries ``z[0]``, ``Z[N]``, ``k[N]``."""
    N = engine.N
    z, Z, k = field.z.copy(), field.Z.copy(), field.k.copy()
    z[0] = engine.cond_exp(z[1], 0)
    Z[N] = engine.cond_exp(Z[N - 1], N)
    if k.shape[-1]:
        k[N] = engine.cond_exp(k[N - 1], N)
    return SolutionField(field.y, field.Y, z, Z, k)
