"""Parametric MINLP benchmark families.

Four families share one calling convention.  A solution is a row vector
``[x_r, x_z]`` (continuous slice first); batches stack rows.  Constraints are
returned as ``g = lhs - rhs`` so that ``g <= 0`` means feasible.

* ``IQP``: min 1/2 x'Qx + p'x      s.t. Ax <= b,             x integer
* ``INP``: min 1/2 x'Qx + p'sin(x) s.t. (A + d e1' - d e2')x <= b
* ``MIRB``: min |a - x|^2 + 50|y - x^2|^2
              s.t. |x|^2 <= nb, 1'y >= nb/2, p'x <= 0, Q'y <= 0,  y integer
* ``ROSENBROCK2D``: MIRB with one continuous and one integer variable,
  p = 1 and Q = -1, so the constraints read x^2 <= b, y >= b/2, x <= 0, y >= 0.

Randomness comes from numpy's PCG64 bit generator.  Uniform draws use the
53-bit division of :meth:`numpy.random.Generator.random`; normal draws are
produced by Box-Muller from those uniforms so the sampled coefficients depend
only on the uniform stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

FAMILIES = ("IQP", "INP", "MIRB", "ROSENBROCK2D")

# stream ids for SeedSequence spawn keys
STREAM_COEFFS = 0
STREAM_TRAIN = 1
STREAM_VAL = 2
STREAM_TEST = 3


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


def uniform(rng: np.random.Generator, low: float, high: float, size) -> np.ndarray:
    return low + (high - low) * rng.random(size)


def normal(rng: np.random.Generator, mean: float, std: float, size) -> np.ndarray:
    """Box-Muller normal samples."""
    count = int(np.prod(size))
    pairs = (count + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])
    return mean + std * z[:count].reshape(size)


@dataclass(frozen=True)
class CoefficientSet:
    family: str
    n_r: int
    n_z: int
    n_c: int
    n_xi: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    n: int = 0
    m: int = 0

    @property
    def n_x(self) -> int:
        return self.n_r + self.n_z

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoefficientSet):
            return NotImplemented
        same_meta = (self.family, self.n_r, self.n_z, self.n_c, self.n_xi, self.seed,
                     self.n, self.m) == (other.family, other.n_r, other.n_z, other.n_c,
                                         other.n_xi, other.seed, other.n, other.m)
        return (same_meta and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))

    __hash__ = None


@dataclass(frozen=True)
class MixedIntegerSolution:
    x_r: np.ndarray
    x_z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_r", np.asarray(self.x_r, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "x_z", np.asarray(self.x_z, dtype=np.float64).reshape(-1))
        if not np.array_equal(self.x_z, np.rint(self.x_z)):
            raise ValueError("integer part is not integral")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x_r, self.x_z])

    @classmethod
    def from_vector(cls, x, n_r: int) -> "MixedIntegerSolution":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return cls(x[:n_r], x[n_r:])


def _normalize_family(family: str) -> str:
    key = {"rb2d": "ROSENBROCK2D"}.get(family.lower(), family.upper())
    if key not in FAMILIES:
        raise ValueError(f"unknown problem family {family!r}")
    return key


def build_family(family: str, n: int = 2, m: int = 2, seed: int = 0) -> CoefficientSet:
    family = _normalize_family(family)
    rng = make_rng(seed, STREAM_COEFFS)
    if family == "ROSENBROCK2D":
        return CoefficientSet(family, 1, 1, 4, 2, {}, seed, 1, 4)
    if n < 1:
        raise ValueError("n must be >= 1")
    if family in ("IQP", "INP"):
        if m < 1:
            raise ValueError("m must be >= 1")
        if family == "INP" and n < 2:
            raise ValueError("INP needs n >= 2 (the parameter d perturbs two columns)")
        q = np.diag(uniform(rng, 0.0, 0.01, n))
        p = uniform(rng, 0.0, 0.1, n)
        a = normal(rng, 0.0, 0.1, (m, n))
        n_xi = m if family == "IQP" else 2 * m
        return CoefficientSet(family, 0, n, m, n_xi, {"Q": q, "p": p, "A": a}, seed, n, m)
    p = normal(rng, 0.0, 1.0, n)
    q = normal(rng, 0.0, 1.0, n)
    return CoefficientSet("MIRB", n, n, 4, 1 + n, {"p": p, "Q": q}, seed, n, 4)


def sample_instances(coeffs: CoefficientSet, count: int, seed: int, stream: int = STREAM_TEST) -> np.ndarray:
    """Parameter vectors, one row per instance, in feature packing order."""
    rng = make_rng(seed, stream)
    fam = coeffs.family
    if count <= 0:
        return np.zeros((0, coeffs.n_xi))
    if fam == "IQP":
        return uniform(rng, -1.0, 1.0, (count, coeffs.m))
    if fam == "INP":
        b = uniform(rng, -1.0, 1.0, (count, coeffs.m))
        d = uniform(rng, -0.5, 0.5, (count, coeffs.m))
        return np.concatenate([b, d], axis=1)
    if fam == "MIRB":
        b = uniform(rng, 1.0, 8.0, (count, 1))
        a = uniform(rng, 0.5, 4.5, (count, coeffs.n))
        return np.concatenate([b, a], axis=1)
    a = uniform(rng, 0.5, 4.5, (count, 1))
    b = uniform(rng, 1.0, 8.0, (count, 1))
    return np.concatenate([a, b], axis=1)


def feature_vector(coeffs: CoefficientSet, xi) -> np.ndarray:
    """Network input for an instance: IQP b, INP (b, d), MIRB (b, a), ROSENBROCK2D (a, b)."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[-1] != coeffs.n_xi:
        raise ValueError(f"parameter length {xi.shape[-1]} != {coeffs.n_xi}")
    return xi.copy()


# ---------------------------------------------------------------------------
# differentiable evaluators (batched over rows)


def _prepare(coeffs: CoefficientSet, xi, sol):
    x = sol if isinstance(sol, dc.Node) else dc.constant(
        sol.as_vector() if isinstance(sol, MixedIntegerSolution) else sol)
    xi = np.asarray(xi, dtype=np.float64)
    single = x.value.ndim == 1
    if single:
        x = dc.build("slice", [x], index=(None, slice(None)))
        xi = xi.reshape(1, -1)
    if x.shape[-1] != coeffs.n_x:
        raise ValueError(f"solution length {x.shape[-1]} != {coeffs.n_x}")
    if xi.shape[-1] != coeffs.n_xi:
        raise ValueError(f"parameter length {xi.shape[-1]} != {coeffs.n_xi}")
    if xi.shape[0] != x.shape[0]:
        if xi.shape[0] != 1:
            raise ValueError(f"batch mismatch: {x.shape[0]} solutions, {xi.shape[0]} parameters")
        xi = np.broadcast_to(xi, (x.shape[0], xi.shape[1]))
    return x, xi, single


def _finish(node: dc.Node, single: bool) -> dc.Node:
    return node[0] if single else node


def objective(coeffs: CoefficientSet, xi, sol) -> dc.Node:
    """Objective value per row (a scalar node for a single solution)."""
    x, xi, single = _prepare(coeffs, xi, sol)
    fam, arr = coeffs.family, coeffs.arrays
    if fam in ("IQP", "INP"):
        quad = 0.5 * dc.sum((x @ arr["Q"]) * x, axis=1)
        lin = dc.sin(x) @ arr["p"] if fam == "INP" else x @ arr["p"]
        out = quad + lin
    else:
        n = coeffs.n_r
        xr, xz = x[:, :n], x[:, n:]
        a = xi[:, :1] if fam == "ROSENBROCK2D" else xi[:, 1:]
        out = dc.sum(dc.square(a - xr), axis=1) + 50.0 * dc.sum(dc.square(xz - dc.square(xr)), axis=1)
    return _finish(out, single)


def constraints(coeffs: CoefficientSet, xi, sol) -> dc.Node:
    """Constraint values ``g`` per row, shape (rows, n_c)."""
    x, xi, single = _prepare(coeffs, xi, sol)
    fam, arr = coeffs.family, coeffs.arrays
    if fam == "IQP":
        out = x @ arr["A"].T - xi
    elif fam == "INP":
        m = coeffs.m
        b, d = xi[:, :m], xi[:, m:]
        shift = (x[:, 0:1] - x[:, 1:2]) * d
        out = x @ arr["A"].T + shift - b
    else:
        n = coeffs.n_r
        xr, xz = x[:, :n], x[:, n:]
        if fam == "MIRB":
            b = xi[:, :1]
            p, q = arr["p"], arr["Q"]
        else:
            b = xi[:, 1:2]
            p, q = np.ones(1), -np.ones(1)
        nb = float(n) * b
        col = (slice(None), None)
        parts = [
            dc.sum(dc.square(xr), axis=1)[col] - nb,
            0.5 * nb - dc.sum(xz, axis=1)[col],
            (xr @ p)[col],
            (xz @ q)[col],
        ]
        out = dc.concat(parts, axis=1)
    return _finish(out, single)


def violation(coeffs: CoefficientSet, xi, sol) -> dc.Node:
    """Sum of positive constraint parts per row; zero exactly when feasible."""
    g = constraints(coeffs, xi, sol)
    return dc.pos_l1(g, axis=-1)
