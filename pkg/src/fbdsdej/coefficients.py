"""Coefficient systems (b, sigma, phi, f, g, Psi, h) and their hypotheses.

A quintuple ``v = (y, Y, z, Z, k)`` has shapes ``y (n,)``, ``Y (m,)``,
``z (n, l)``, ``Z (m, d)`` and ``k (m, J)`` (mark axis last), with arbitrary
leading batch axes.  Its flat coordinate vector is the concatenation of the
row-major flattenings in that order; affine families act on it through one
matrix per coefficient.

The coupling matrix ``R`` is ``m x n``.  The monotonicity bracket is

    <A(v) - A(w), v - w> = <dy, R^T df> + <dY, R db> + <dz, R^T dg>
                           + <dZ, R dsigma> + sum_j Pi_j <dk_j, R dphi_j>.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .noise import Dims, MarkSpace

STANDARD, PRIMED = "standard", "primed"

COEFFICIENT_NAMES = ("b", "sigma", "phi", "f", "g")


# ---------------------------------------------------------------------------
# Quintuples


@dataclass(frozen=True)
class Layout:
    """Shapes and flat coordinates of a quintuple for given dimensions."""

    dims: Dims
    J: int

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        n, m, d, l = self.dims.n, self.dims.m, self.dims.d, self.dims.l
        return {"y": (n,), "Y": (m,), "z": (n, l), "Z": (m, d), "k": (m, self.J)}

    @property
    def slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, shape in self.shapes.items():
            size = math.prod(shape)
            out[name] = slice(pos, pos + size)
            pos += size
        return out

    @property
    def size(self) -> int:
        return sum(math.prod(s) for s in self.shapes.values())

    def weights(self, marks: MarkSpace) -> np.ndarray:
        """Per-coordinate weights of the pointwise norm (Pi_j on k)."""
        w = np.ones(self.size)
        if self.J:
            w[self.slices["k"]] = np.tile(marks.pi, self.dims.m)
        return w

    def out_shapes(self) -> dict[str, tuple[int, ...]]:
        n, m, d, l = self.dims.n, self.dims.m, self.dims.d, self.dims.l
        return {"b": (n,), "sigma": (n, d), "phi": (n, self.J), "f": (m,), "g": (m, l)}


@dataclass(frozen=True)
class Quintuple:
    y: np.ndarray
    Y: np.ndarray
    z: np.ndarray
    Z: np.ndarray
    k: np.ndarray

    PARTS = ("y", "Y", "z", "Z", "k")
    RANKS = {"y": 1, "Y": 1, "z": 2, "Z": 2, "k": 2}

    def parts(self) -> tuple[np.ndarray, ...]:
        return (self.y, self.Y, self.z, self.Z, self.k)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Quintuple":
        return type(self)(*(fn(x) for x in self.parts()))

    def combine(self, other: "Quintuple", fn) -> "Quintuple":
        return type(self)(*(fn(a, b) for a, b in zip(self.parts(), other.parts())))

    def __add__(self, other):
        return self.combine(other, np.add)

    def __sub__(self, other):
        return self.combine(other, np.subtract)

    def scale(self, c: float) -> "Quintuple":
        return self.map(lambda x: c * x)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(*(x.shape[: x.ndim - self.RANKS[n]]
                                     for n, x in zip(self.PARTS, self.parts())))

    def flat(self) -> np.ndarray:
        """Flat coordinates with shape ``(*batch, D)``."""
        batch = self.batch_shape
        cols = []
        for name, x in zip(self.PARTS, self.parts()):
            r = self.RANKS[name]
            x = np.broadcast_to(x, batch + x.shape[x.ndim - r:])
            cols.append(x.reshape(batch + (-1,)))
        return np.concatenate(cols, axis=-1)

    @classmethod
    def from_flat(cls, u: np.ndarray, layout: Layout) -> "Quintuple":
        batch = u.shape[:-1]
        parts = []
        for name, sl in layout.slices.items():
            parts.append(u[..., sl].reshape(batch + layout.shapes[name]))
        return cls(*parts)

    @classmethod
    def zeros(cls, layout: Layout, batch: tuple[int, ...] = ()) -> "Quintuple":
        return cls(*(np.zeros(batch + s) for s in layout.shapes.values()))

    def pointwise_norm_sq(self, marks: MarkSpace) -> np.ndarray:
        """``|y|^2 + |Y|^2 + ||z||^2 + ||Z||^2 + |||k|||^2`` per batch entry."""
        total = (np.sum(self.y**2, -1) + np.sum(self.Y**2, -1)
                 + np.sum(self.z**2, (-2, -1)) + np.sum(self.Z**2, (-2, -1)))
        if marks.J:
            total = total + np.sum(self.k**2 * marks.pi, (-2, -1))
        return total


# ---------------------------------------------------------------------------
# Constants


@dataclass(frozen=True)
class MonotoneParams:
    theta1: float = 0.0
    theta2: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0

    def violations(self, dims: Dims) -> list[str]:
        t1, t2, b1, b2 = self.theta1, self.theta2, self.beta1, self.beta2
        out = [f"{name}>=0 fails" for name, v in
               (("θ1", t1), ("θ2", t2), ("β1", b1), ("β2", b2)) if v < 0]
        for label, v in (("θ1+θ2>0", t1 + t2), ("β1+β2>0", b1 + b2),
                         ("θ1+β2>0", t1 + b2), ("θ2+β1>0", t2 + b1)):
            if not v > 0:
                out.append(f"{label} fails")
        if dims.m > dims.n:
            out += [f"{name}>0 fails (m>n)" for name, v in (("θ1", t1), ("β1", b1)) if not v > 0]
        if dims.n > dims.m:
            out += [f"{name}>0 fails (n>m)" for name, v in (("θ2", t2), ("β2", b2)) if not v > 0]
        return out


@dataclass(frozen=True)
class LipschitzConstants:
    c: float = 1.0
    gamma: float = 0.5
    gamma_prime: float = 0.25


@dataclass(frozen=True)
class BoundaryNoise:
    """Terminal driver values that random boundary data may load on.

    ``B_T`` is known at time 0 (it generates the backward filtration at 0);
    ``W_T`` and ``N_T`` (compensated) are known at the horizon.
    """

    B_T: np.ndarray
    W_T: np.ndarray
    N_T: np.ndarray

    @classmethod
    def from_engine(cls, engine) -> "BoundaryNoise":
        N = engine.N
        return cls(engine.B(N), engine.W(N), engine.Nt(N))


# ---------------------------------------------------------------------------
# Coefficient sets


@dataclass(frozen=True)
class AffineMaps:
    """Matrices acting on flat quintuple coordinates plus offsets.

    ``matrices[name]`` has shape ``(prod(out_shape), D)`` for the five
    process coefficients; ``Psi`` is ``(n, m)`` and ``h`` is ``(m, n)``.
    ``psi_B`` (n, l) loads ``Psi`` on ``B_T``; ``h_W`` (m, d) and ``h_N``
    (m, J) load ``h`` on ``W_T`` and the compensated ``N_T``.
    """

    matrices: Mapping[str, np.ndarray]
    offsets: Mapping[str, np.ndarray]
    psi_B: np.ndarray
    h_W: np.ndarray
    h_N: np.ndarray


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficient data with declared constants.

    ``b, sigma, phi, f, g`` are callables ``(t, q) -> array`` on a batched
    :class:`Quintuple`; ``phi`` returns all marks at once (mark axis last).
    ``Psi(Y, noise)`` and ``h(y, noise)`` take an optional
    :class:`BoundaryNoise`.  ``affine`` is set for the built-in families and
    enables exact Lipschitz ratios and linear inner solves.
    """

    dims: Dims
    marks: MarkSpace
    R: np.ndarray
    b: Callable
    sigma: Callable
    phi: Callable
    f: Callable
    g: Callable
    Psi: Callable
    h: Callable
    monotone: MonotoneParams = MonotoneParams()
    constants: LipschitzConstants = LipschitzConstants()
    orientation: str = STANDARD
    name: str = "custom"
    affine: AffineMaps | None = None
    reads_z: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (self.dims.m, self.dims.n):
            raise ValueError(f"shape mismatch: R is {R.shape}, expected {(self.dims.m, self.dims.n)}")
        object.__setattr__(self, "R", R)
        if self.orientation not in (STANDARD, PRIMED):
            raise ValueError(f"orientation must be {STANDARD!r} or {PRIMED!r}")

    @property
    def layout(self) -> Layout:
        return Layout(self.dims, self.marks.J)

    @property
    def is_affine(self) -> bool:
        return self.affine is not None

    def with_orientation(self, orientation: str) -> "CoefficientSet":
        return replace(self, orientation=orientation)

    def with_constants(self, **kw) -> "CoefficientSet":
        return replace(self, constants=replace(self.constants, **kw))

    def evaluate(self, t, q: Quintuple) -> dict[str, np.ndarray]:
        return {name: getattr(self, name)(t, q) for name in COEFFICIENT_NAMES}


def _affine_callables(layout: Layout, maps: AffineMaps):
    shapes = layout.out_shapes()

    def make(name):
        M = maps.matrices[name]
        c = maps.offsets[name]
        shape = shapes[name]

        def fn(t, q: Quintuple):
            u = q.flat()
            return (u @ M.T + c).reshape(u.shape[:-1] + shape)

        return fn

    P, H = maps.matrices["Psi"], maps.matrices["h"]
    psi0, phi0 = maps.offsets["Psi"], maps.offsets["h"]

    def Psi(Y, noise: BoundaryNoise | None = None):
        out = np.asarray(Y) @ P.T + psi0
        if noise is not None and maps.psi_B.any():
            out = out + noise.B_T @ maps.psi_B.T
        return out

    def h(y, noise: BoundaryNoise | None = None):
        out = np.asarray(y) @ H.T + phi0
        if noise is not None:
            if maps.h_W.any():
                out = out + noise.W_T @ maps.h_W.T
            if maps.h_N.any():
                out = out + noise.N_T @ maps.h_N.T
        return out

    return {name: make(name) for name in COEFFICIENT_NAMES} | {"Psi": Psi, "h": h}


def general_affine_family(
    dims: Dims,
    marks: MarkSpace,
    R,
    matrices: Mapping[str, np.ndarray],
    offsets: Mapping[str, np.ndarray] | None = None,
    *,
    psi_B=None,
    h_W=None,
    h_N=None,
    monotone: MonotoneParams = MonotoneParams(),
    constants: LipschitzConstants | None = None,
    orientation: str = STANDARD,
    name: str = "GeneralAffine",
    params: dict | None = None,
) -> CoefficientSet:
    """Affine coefficients from explicit matrices; missing entries are zero."""
    layout = Layout(dims, marks.J)
    D = layout.size
    outs = layout.out_shapes()
    full = {}
    for key, shape in outs.items():
        rows = math.prod(shape)
        M = np.asarray(matrices.get(key, np.zeros((rows, D))), dtype=float)
        if M.size == rows * D:
            M = M.reshape(rows, D)
        if M.shape != (rows, D):
            raise ValueError(f"shape mismatch: {key} matrix is {M.shape}, expected {(rows, D)}")
        full[key] = M
    for key, shape in (("Psi", (dims.n, dims.m)), ("h", (dims.m, dims.n))):
        M = np.asarray(matrices.get(key, np.zeros(shape)), dtype=float)
        if M.shape != shape:
            raise ValueError(f"shape mismatch: {key} matrix is {M.shape}, expected {shape}")
        full[key] = M
    offsets = dict(offsets or {})
    off = {}
    sizes = {k: math.prod(v) for k, v in outs.items()} | {"Psi": dims.n, "h": dims.m}
    for key, rows in sizes.items():
        v = np.ravel(np.asarray(offsets.get(key, 0.0), dtype=float))
        if v.size not in (1, rows):
            raise ValueError(f"shape mismatch: {key} offset has {v.size} entries, expected {rows}")
        off[key] = np.broadcast_to(v, (rows,)).copy()

    def loading(x, shape, label):
        if x is None:
            return np.zeros(shape)
        x = np.asarray(x, dtype=float)
        if x.shape != shape:
            raise ValueError(f"shape mismatch: {label} is {x.shape}, expected {shape}")
        return x

    maps = AffineMaps(
        full, off,
        loading(psi_B, (dims.n, dims.l), "psi_B"),
        loading(h_W, (dims.m, dims.d), "h_W"),
        loading(h_N, (dims.m, marks.J), "h_N"),
    )
    z_cols = layout.slices["z"]
    reads_z = any(np.any(full[k][:, z_cols]) for k in COEFFICIENT_NAMES)
    fns = _affine_callables(layout, maps)
    coeffs = CoefficientSet(
        dims, marks, R, **fns, monotone=monotone,
        constants=constants or LipschitzConstants(), orientation=orientation,
        name=name, affine=maps, reads_z=reads_z, params=dict(params or {}),
    )
    if constants is None:
        coeffs = coeffs.with_constants(c=smallest_lipschitz_c(coeffs))
    return coeffs


def zero_family(dims: Dims, marks: MarkSpace, R=None, **kw) -> CoefficientSet:
    R = _default_R(dims) if R is None else R
    return general_affine_family(dims, marks, R, {}, name="Zero", **kw)


def _default_R(dims: Dims) -> np.ndarray:
    return np.eye(dims.m, dims.n)


def canonical_monotone_family(
    dims: Dims,
    marks: MarkSpace,
    R=None,
    theta1: float = 0.0,
    theta2: float = 0.0,
    beta1: float = 0.0,
    beta2: float = 0.0,
    psi0=0.0,
    phi0=0.0,
    *,
    flipped: bool = False,
    psi_B=None,
    h_W=None,
    h_N=None,
    constants: LipschitzConstants | None = None,
    orientation: str = STANDARD,
) -> CoefficientSet:
    """Linear family meeting the monotonicity hypotheses with equality.

    ``f = -theta1 R y``, ``g = -theta1 R z``, ``b = -theta2 R^T Y``,
    ``sigma = -theta2 R^T Z``, ``phi_j = -theta2 R^T k_j``,
    ``Psi = -beta2 R^T Y + psi0``, ``h = beta1 R y + phi0``.
    ``flipped`` negates every linear part, which gives the family for the
    reversed (primed) inequalities.
    """
    R = _default_R(dims) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    params = MonotoneParams(theta1, theta2, beta1, beta2)
    bad = [v for v in params.violations(dims) if ">=0" in v]
    if bad:
        raise ValueError(f"invalid constants: {', '.join(bad)}")
    layout = Layout(dims, marks.J)
    sl, D = layout.slices, layout.size
    n, m, d, l, J = dims.n, dims.m, dims.d, dims.l, marks.J
    s = -1.0 if flipped else 1.0
    Rt = R.T

    def block(rows, part, A):
        M = np.zeros((rows, D))
        M[:, sl[part]] = A
        return M

    matrices = {
        "f": block(m, "y", -s * theta1 * R),
        "g": block(m * l, "z", -s * theta1 * np.kron(R, np.eye(l))),
        "b": block(n, "Y", -s * theta2 * Rt),
        "sigma": block(n * d, "Z", -s * theta2 * np.kron(Rt, np.eye(d))),
        "phi": block(n * J, "k", -s * theta2 * np.kron(Rt, np.eye(J))),
        "Psi": -s * beta2 * Rt,
        "h": s * beta1 * R,
    }
    offsets = {"Psi": psi0, "h": phi0}
    name = "CanonicalMonotoneFlipped" if flipped else "CanonicalMonotone"
    return general_affine_family(
        dims, marks, R, matrices, offsets, psi_B=psi_B, h_W=h_W, h_N=h_N,
        monotone=params, constants=constants, orientation=orientation, name=name,
        params={"theta1": theta1, "theta2": theta2, "beta1": beta1, "beta2": beta2,
                "flipped": flipped},
    )


# ---------------------------------------------------------------------------
# Bracket


def assemble_A(coeffs: CoefficientSet, t, q: Quintuple) -> tuple[np.ndarray, ...]:
    """``(R^T f, R b, R^T g, R sigma, R phi)`` at ``q``; ``R`` acts columnwise."""
    ev = coeffs.evaluate(t, q)
    R = coeffs.R
    return (
        ev["f"] @ R,                                   # R^T f
        ev["b"] @ R.T,                                 # R b
        np.einsum("nm,...ml->...nl", R.T, ev["g"]),    # R^T g
        np.einsum("mn,...nd->...md", R, ev["sigma"]),  # R sigma
        np.einsum("mn,...nj->...mj", R, ev["phi"]),    # R phi
    )


def bracket(coeffs: CoefficientSet, t, v: Quintuple, w: Quintuple) -> np.ndarray:
    """``<A(t, v) - A(t, w), v - w>`` with the Pi-weighted jump pairing."""
    Av, Aw = assemble_A(coeffs, t, v), assemble_A(coeffs, t, w)
    dA = [a - b for a, b in zip(Av, Aw)]
    dv = v - w
    total = (np.sum(dv.y * dA[0], -1) + np.sum(dv.Y * dA[1], -1)
             + np.sum(dv.z * dA[2], (-2, -1)) + np.sum(dv.Z * dA[3], (-2, -1)))
    if coeffs.marks.J:
        total = total + np.sum(dv.k * dA[4] * coeffs.marks.pi, (-2, -1))
    return total


def monotone_bound(coeffs: CoefficientSet, v: Quintuple, w: Quintuple) -> np.ndarray:
    """``theta1(|R dy|^2 + ||R dz||^2) + theta2(|R^T dY|^2 + ||R^T dZ||^2
    + |||R^T dk|||^2)``."""
    p, R = coeffs.monotone, coeffs.R
    dv = v - w
    Ry = dv.y @ R.T
    Rz = np.einsum("mn,...nl->...ml", R, dv.z)
    RtY = dv.Y @ R
    RtZ = np.einsum("nm,...md->...nd", R.T, dv.Z)
    Rtk = np.einsum("nm,...mj->...nj", R.T, dv.k)
    first = np.sum(Ry**2, -1) + np.sum(Rz**2, (-2, -1))
    second = np.sum(RtY**2, -1) + np.sum(RtZ**2, (-2, -1))
    if coeffs.marks.J:
        second = second + np.sum(Rtk**2 * coeffs.marks.pi, (-2, -1))
    return p.theta1 * first + p.theta2 * second


# ---------------------------------------------------------------------------
# Samplers and checkers


def sample_pairs(layout: Layout, count: int, seed: int = 0,
                 kind: str = "mixed") -> tuple[Quintuple, Quintuple]:
    """Pairs of quintuples: Gaussian clouds and sphere-stratified offsets.

    ``"sphere"`` places ``w - v`` on spheres of radius 10^-2 .. 10^2 around a
    Gaussian base point; ``"mixed"`` uses half of each.
    """
    rng = np.random.default_rng(seed)
    D = layout.size
    if kind == "gaussian":
        u = rng.standard_normal((count, D))
        w = rng.standard_normal((count, D))
    elif kind == "sphere":
        u = rng.standard_normal((count, D))
        dirs = rng.standard_normal((count, D))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = 10.0 ** rng.integers(-2, 3, size=(count, 1))
        w = u + radii * dirs
    elif kind == "mixed":
        half = count // 2
        a = sample_pairs(layout, half, seed, "gaussian")
        b = sample_pairs(layout, count - half, seed + 1, "sphere")
        return (Quintuple.from_flat(np.concatenate([a[0].flat(), b[0].flat()]), layout),
                Quintuple.from_flat(np.concatenate([a[1].flat(), b[1].flat()]), layout))
    else:
        raise ValueError(f"unknown sampler {kind!r}")
    return Quintuple.from_flat(u, layout), Quintuple.from_flat(w, layout)


@dataclass
class MonotonicityReport:
    samples: int
    orientation: str
    margins: dict[str, float]
    tolerance: float
    witness: dict | None = None

    @property
    def passed(self) -> bool:
        return all(v >= -self.tolerance for v in self.margins.values())

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "samples": self.samples,
                "orientation": self.orientation, "tolerance": self.tolerance,
                "margins": self.margins, "witness": self.witness}


def check_monotonicity(coeffs: CoefficientSet, samples: int = 10_000, seed: int = 0,
                       tolerance: float = 1e-10, sampler: str = "mixed",
                       orientation: str | None = None) -> MonotonicityReport:
    """Sampled margins of the monotonicity inequalities (non-negative = holds).

    Under the standard orientation the bracket must lie below minus the
    bound, ``<dPsi, R^T dY> <= -beta2 |R^T dY|^2`` and
    ``<dh, R dy> >= beta1 |R dy|^2``; the primed orientation reverses all
    three.  ``margins`` holds the worst margin per condition.
    """
    orientation = orientation or coeffs.orientation
    sign = 1.0 if orientation == STANDARD else -1.0
    v, w = sample_pairs(coeffs.layout, samples, seed, sampler)
    p, R = coeffs.monotone, coeffs.R
    margins = {}
    per = {"bracket": -sign * bracket(coeffs, 0.0, v, w) - monotone_bound(coeffs, v, w)}
    dY, dy = v.Y - w.Y, v.y - w.y
    RtY, Ry = dY @ R, dy @ R.T
    psi_pair = np.sum((coeffs.Psi(v.Y) - coeffs.Psi(w.Y)) * RtY, -1)
    h_pair = np.sum((coeffs.h(v.y) - coeffs.h(w.y)) * Ry, -1)
    if sign > 0:
        per["Psi"] = -p.beta2 * np.sum(RtY**2, -1) - psi_pair
        per["h"] = h_pair - p.beta1 * np.sum(Ry**2, -1)
    else:
        per["Psi"] = psi_pair - p.beta2 * np.sum(RtY**2, -1)
        per["h"] = -p.beta1 * np.sum(Ry**2, -1) - h_pair
    witness = None
    worst_val = np.inf
    for key, arr in per.items():
        idx = int(np.argmin(arr))
        margins[key] = float(arr[idx])
        if arr[idx] < -tolerance and arr[idx] < worst_val:
            worst_val = float(arr[idx])
            witness = {
                "condition": key, "margin": float(arr[idx]),
                "v": v.flat()[idx].tolist(), "w": w.flat()[idx].tolist(),
            }
    return MonotonicityReport(samples, orientation, margins, tolerance, witness)


# Argument groups and the declared constant that governs each.
_GROUPS = {
    "b": {"c": ("y", "Y", "z", "Z", "k")},
    "f": {"c": ("y", "Y", "z", "Z", "k")},
    "sigma": {"c": ("y", "Y", "Z", "k"), "gamma_prime": ("z",)},
    "phi": {"c": ("y", "Y", "Z", "k"), "gamma_prime": ("z",)},
    "g": {"c": ("y", "Y", "z"), "gamma": ("Z", "k")},
}


@dataclass
class LipschitzReport:
    samples: int
    # per coefficient: {"joint": sup ratio against the declared bound (<= 1
    # passes), "groups": {constant: sup |dF|^2 / |d arg|^2}}
    entries: dict[str, dict]
    declared: LipschitzConstants
    exact: bool
    tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        return all(e["joint"] <= 1.0 + self.tolerance for e in self.entries.values())

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "samples": self.samples, "exact": self.exact,
                "declared": {"c": self.declared.c, "gamma": self.declared.gamma,
                             "gamma_prime": self.declared.gamma_prime},
                "entries": self.entries}


def _group_columns(layout: Layout, parts) -> np.ndarray:
    index = np.arange(layout.size)
    return np.concatenate([index[layout.slices[p]] for p in parts])


def _rows_per_mark(layout: Layout, name: str) -> list[np.ndarray]:
    if name != "phi":
        rows = math.prod(layout.out_shapes()[name])
        return [np.arange(rows)]
    n, J = layout.dims.n, layout.J
    return [np.arange(n) * J + j for j in range(J)]


def _safe_ratio(num, den):
    num, den = np.asarray(num, float), np.asarray(den, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    return float(np.max(r, initial=0.0))


def check_lipschitz(coeffs: CoefficientSet, samples: int = 2_000, seed: int = 0,
                    tolerance: float = 1e-9) -> LipschitzReport:
    """Lipschitz ratios of every coefficient against the declared constants.

    For each coefficient and argument group the report gives the largest
    ``|dF|^2 / |d arg|^2`` (``phi`` maximized over marks).  ``joint`` is the
    largest ``|dF|^2 / (c |d rest|^2 + gamma |d group|^2)`` and must not
    exceed 1.  ``Psi`` and ``h`` are checked unsquared against ``c``.
    Affine families get exact values from singular values; other families
    are sampled.
    """
    layout, marks, K = coeffs.layout, coeffs.marks, coeffs.constants
    weights = layout.weights(marks)
    entries: dict[str, dict] = {}
    consts = {"c": K.c, "gamma": K.gamma, "gamma_prime": K.gamma_prime}
    if coeffs.is_affine:
        mats = coeffs.affine.matrices
        for name, groups in _GROUPS.items():
            M = mats[name]
            group_ratio, scale = {}, np.zeros(layout.size)
            for const, parts in groups.items():
                cols = _group_columns(layout, parts)
                scale[cols] = consts[const] * weights[cols]
                worst = 0.0
                for rows in _rows_per_mark(layout, name):
                    sub = M[np.ix_(rows, cols)] / np.sqrt(weights[cols])
                    worst = max(worst, _spec_sq(sub))
                group_ratio[const] = worst
            joint = 0.0
            for rows in _rows_per_mark(layout, name):
                sub = M[rows]
                live = np.any(sub != 0, axis=0)
                if np.any(live & (scale <= 0)):
                    joint = np.inf
                    break
                cols = np.flatnonzero(live)
                joint = max(joint, _spec_sq(sub[:, cols] / np.sqrt(scale[cols])) if cols.size else 0.0)
            entries[name] = {"joint": joint, "groups": group_ratio}
        for name in ("Psi", "h"):
            r = math.sqrt(_spec_sq(mats[name]))
            entries[name] = {"joint": _safe_ratio(r, K.c), "groups": {"c": r}}
        return LipschitzReport(samples, entries, K, True, tolerance)

    rng = np.random.default_rng(seed)
    u = rng.standard_normal((samples, layout.size))
    base = Quintuple.from_flat(u, layout)
    for name, groups in _GROUPS.items():
        fn = getattr(coeffs, name)
        f0 = fn(0.0, base)
        group_ratio = {}
        for const, parts in groups.items():
            cols = _group_columns(layout, parts)
            du = np.zeros_like(u)
            du[:, cols] = rng.standard_normal((samples, cols.size))
            diff = fn(0.0, Quintuple.from_flat(u + du, layout)) - f0
            den = np.sum(du**2 * weights, -1)
            group_ratio[const] = _safe_ratio(_sup_marks(name, diff), den)
        du = rng.standard_normal(u.shape)
        diff = fn(0.0, Quintuple.from_flat(u + du, layout)) - f0
        bound = np.zeros(samples)
        for const, parts in groups.items():
            cols = _group_columns(layout, parts)
            bound += consts[const] * np.sum(du[:, cols] ** 2 * weights[cols], -1)
        entries[name] = {"joint": _safe_ratio(_sup_marks(name, diff), bound), "groups": group_ratio}
    for name, arg, dim in (("Psi", "Y", layout.dims.m), ("h", "y", layout.dims.n)):
        fn = getattr(coeffs, name)
        a = rng.standard_normal((samples, dim))
        da = rng.standard_normal((samples, dim))
        num = np.linalg.norm(fn(a + da) - fn(a), axis=-1)
        r = _safe_ratio(num, np.linalg.norm(da, axis=-1))
        entries[name] = {"joint": _safe_ratio(r, K.c), "groups": {"c": r}}
    return LipschitzReport(samples, entries, K, False, tolerance)


def _sup_marks(name, diff):
    if name == "phi":
        return np.max(np.sum(diff**2, axis=-2), axis=-1, initial=0.0)
    return np.sum(diff.reshape(len(diff), -1) ** 2, -1)


def _spec_sq(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2) ** 2)


def smallest_lipschitz_c(coeffs: CoefficientSet) -> float:
    """Smallest ``c`` covering every c-group ratio of an affine family
    (1 when all of them vanish)."""
    report = check_lipschitz(coeffs.with_constants(c=1.0))
    vals = [e["groups"].get("c", 0.0) for e in report.entries.values()]
    c = max(vals, default=0.0)
    return float(c) if c > 0 else 1.0


# ---------------------------------------------------------------------------
# Preconditions and rank


@dataclass
class Verdict:
    valid: bool
    violations: list[str]
    branch: str

    def to_dict(self) -> dict:
        return {"valid": self.valid, "violations": self.violations, "branch": self.branch}


def rank_bounds(R) -> tuple[float, float]:
    """``(min, max)`` of ``|R x|`` over unit vectors of the smaller side.

    For ``m > n`` these bound ``|R y| / |y|``; for ``m < n`` they bound
    ``|R^T Y| / |Y|``; for square ``R`` the lower value is ``1/||R^-1||``.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    s = np.linalg.svd(R, compute_uv=False)
    if s.size == 0 or s[-1] <= s[0] * max(R.shape) * np.finfo(float).eps:
        raise ValueError("rank-deficient R: full rank required")
    return float(s[-1]), float(s[0])


def validate_theorem_preconditions(coeffs: CoefficientSet) -> Verdict:
    """Check declared constants against the existence-theorem hypotheses.

    Monotonicity constants must satisfy the positivity combinations for the
    dimensions at hand; ``0 < gamma < 1`` always; ``0 < gamma' < 1`` when
    ``m > n`` and ``0 < gamma' <= gamma / 2`` when ``m <= n``.
    """
    dims, K = coeffs.dims, coeffs.constants
    out = coeffs.monotone.violations(dims)
    if not K.c > 0:
        out.append("c>0 fails")
    if not 0 < K.gamma < 1:
        out.append("0<γ<1 fails")
    if dims.m > dims.n:
        branch = "m>n"
        if not 0 < K.gamma_prime < 1:
            out.append("0<γ′<1 fails")
    else:
        branch = "m<n" if dims.m < dims.n else "m=n"
        if not 0 < K.gamma_prime <= K.gamma / 2:
            out.append("0<γ′≤γ/2 fails")
    try:
        rank_bounds(coeffs.R)
    except ValueError:
        out.append("R full rank fails")
    return Verdict(not out, out, branch)


def integrability_check(coeffs: CoefficientSet) -> dict[str, float]:
    """Size of ``A(t, 0)``, ``Psi(0)`` and ``h(0)``; all must be finite."""
    zero = Quintuple.zeros(coeffs.layout)
    out = {f"A{i}": float(np.sum(np.square(x))) for i, x in enumerate(assemble_A(coeffs, 0.0, zero))}
    out["Psi0"] = float(np.sum(np.square(coeffs.Psi(zero.Y))))
    out["h0"] = float(np.sum(np.square(coeffs.h(zero.y))))
    return out
