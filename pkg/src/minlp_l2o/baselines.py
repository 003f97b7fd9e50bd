"""Non-learned reference methods.

``solve_relaxation`` minimizes ``f + μ‖g₊‖₁`` with integrality dropped,
escalating μ over a few rounds of Adam.  ``rr_baseline`` rounds that point;
``brute_force_oracle`` enumerates integer assignments in a window around a
center (solving for the continuous part of each) and keeps the best
feasible one.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import correction as cr
from . import diffcore as dc
from . import problems as pb


class OracleCapExceeded(ValueError):
    pass


class RelaxationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RelaxationConfig:
    mu0: float = 1.0
    growth: float = 10.0
    rounds: int = 6
    inner_steps: int = 2000
    lr: float = 1.0
    tol: float = 1e-6
    final_lr_ratio: float = 1e-3
    lr_round_decay: float = 0.1

    def __post_init__(self):
        if not (self.mu0 > 0 and self.growth > 1 and self.tol > 0 and self.lr > 0):
            raise ValueError("need mu0 > 0, growth > 1, lr > 0, tol > 0")
        if self.rounds < 1 or self.inner_steps < 1:
            raise ValueError("rounds and inner_steps must be positive")


@dataclass(frozen=True)
class OracleConfig:
    window: int = 2
    cap: int = 1_000_000

    def __post_init__(self):
        if self.window < 1 or self.cap < 1:
            raise ValueError("window and cap must be at least 1")


@dataclass(frozen=True)
class Problem:
    """Batched objective/constraint callables over rows ``[x_r, x_z]``."""
    objective: Callable[[dc.Node], dc.Node]
    constraints: Callable[[dc.Node], dc.Node]
    n_r: int
    n_z: int

    @classmethod
    def from_family(cls, coeffs: pb.CoefficientSet, xi) -> "Problem":
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        return cls(lambda x: pb.objective(coeffs, xi, x),
                   lambda x: pb.constraints(coeffs, xi, x),
                   coeffs.n_r, coeffs.n_z)


@dataclass
class RelaxationResult:
    x: np.ndarray
    objective: np.ndarray
    violation: np.ndarray
    success: np.ndarray


def _violation_rows(g: np.ndarray) -> np.ndarray:
    return np.maximum(g, 0.0).sum(axis=1)


def penalty_minimize(problem: Problem, x0, config: RelaxationConfig = RelaxationConfig(),
                     free=None) -> RelaxationResult:
    """Escalating-penalty Adam on every row of ``x0`` at once.

    Each round restarts Adam with the learning rate decaying geometrically
    from its starting value to ``final_lr_ratio`` times that.  After a round,
    rows whose last iterate is feasible shrink their starting rate by
    ``lr_round_decay`` (refinement); the others keep it and multiply their
    penalty weight by ``growth``.

    ``free`` masks the columns that may move.  The returned point per row is
    the best feasible iterate seen, or the last iterate if none was feasible.
    """
    x = np.array(np.atleast_2d(x0), dtype=np.float64)
    mask = np.ones(x.shape[1]) if free is None else np.asarray(free, dtype=np.float64)
    rows = x.shape[0]
    best_x = x.copy()
    best_f = np.full(rows, math.inf)
    found = np.zeros(rows, dtype=bool)
    mu = np.full((rows, 1), config.mu0)
    lr0 = np.full((rows, 1), config.lr)
    decay = config.final_lr_ratio ** (1.0 / max(config.inner_steps - 1, 1))
    b1, b2, eps = 0.9, 0.999, 1e-8

    def consider(point: np.ndarray) -> np.ndarray:
        node = dc.constant(point)
        f = problem.objective(node).value
        v = _violation_rows(problem.constraints(node).value)
        ok = (v <= config.tol) & (f < best_f)
        best_x[ok], best_f[ok] = point[ok], f[ok]
        found[ok] = True
        return v

    for _ in range(config.rounds):
        before = best_f.copy()
        m = np.zeros_like(x)
        s = np.zeros_like(x)
        lr = lr0.copy()
        for t in range(1, config.inner_steps + 1):
            leaf = dc.leaf(x)
            viol = dc.pos_l1(problem.constraints(leaf), axis=1)
            loss = dc.sum(problem.objective(leaf)) + dc.sum(viol * mu[:, 0])
            grad = dc.backward(loss).get(leaf, np.zeros_like(x)) * mask
            if not np.all(np.isfinite(grad)):
                raise RelaxationDiverged("non-finite gradient in relaxation solve")
            m = b1 * m + (1 - b1) * grad
            s = b2 * s + (1 - b2) * grad * grad
            x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(s / (1 - b2 ** t)) + eps)
            lr *= decay
            last_ok = consider(x) <= config.tol
        # stop once every row ends feasible and the round no longer helped
        if np.all(last_ok) and np.all(before - best_f <= config.tol * (1.0 + np.abs(best_f))):
            break
        # rows ending infeasible get a stiffer penalty, the others a finer step
        mu[~last_ok] *= config.growth
        lr0[last_ok] *= config.lr_round_decay
    out = np.where(found[:, None], best_x, x)
    node = dc.constant(out)
    f = problem.objective(node).value
    v = _violation_rows(problem.constraints(node).value)
    return RelaxationResult(out, f, v, v <= config.tol)


def solve_relaxation(coeffs: pb.CoefficientSet, xi, config: RelaxationConfig = RelaxationConfig(),
                     x0=None) -> RelaxationResult:
    """Continuous relaxation for one parameter row or a batch of them."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    start = np.zeros((len(xi), coeffs.n_x)) if x0 is None else np.atleast_2d(x0)
    return penalty_minimize(Problem.from_family(coeffs, xi), start, config)


def rr_baseline(coeffs: pb.CoefficientSet, xi, config: RelaxationConfig = RelaxationConfig()) -> np.ndarray:
    """Nearest rounding of the relaxation; rows of ``[x_r, x_z]``."""
    relaxed = solve_relaxation(coeffs, xi, config).x
    return cr.rs_round(relaxed, coeffs.n_r, straight_through=False).x_hat.value


@dataclass
class OracleResult:
    x: np.ndarray | None
    objective: float

    @property
    def found(self) -> bool:
        return self.x is not None


def _window(center_z: np.ndarray, config: OracleConfig) -> np.ndarray:
    n_z = center_z.shape[0]
    size = (2 * config.window + 1) ** n_z
    if size > config.cap:
        raise OracleCapExceeded(f"enumeration cap exceeded: window needs {size} > cap {config.cap}")
    offsets = np.array(list(itertools.product(range(-config.window, config.window + 1), repeat=n_z)),
                       dtype=np.float64).reshape(size, n_z)
    return dc.round_half_down(center_z) + offsets


def _pick(x: np.ndarray, f: np.ndarray, v: np.ndarray, tol: float) -> OracleResult:
    f = np.where(v <= tol, f, math.inf)
    best = int(np.argmin(f))
    if not math.isfinite(f[best]):
        return OracleResult(None, math.inf)
    return OracleResult(x[best], float(f[best]))


def enumerate_window(problem: Problem, center, config: OracleConfig = OracleConfig(),
                     relax: RelaxationConfig = RelaxationConfig(), tol: float = 1e-6) -> OracleResult:
    """Best feasible point with ``x_z`` in ``round(center_z) ± window``.

    Assignments are enumerated in lexicographic order; ties keep the first.
    """
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    n_r = problem.n_r
    z = _window(center[n_r:], config)
    x = np.concatenate([np.broadcast_to(center[:n_r], (len(z), n_r)), z], axis=1)
    if n_r:
        free = np.concatenate([np.ones(n_r), np.zeros(problem.n_z)])
        x = penalty_minimize(problem, x, relax, free).x
    node = dc.constant(x)
    return _pick(x, problem.objective(node).value, _violation_rows(problem.constraints(node).value), tol)


def brute_force_oracle(coeffs: pb.CoefficientSet, xi, centers=None, config: OracleConfig = OracleConfig(),
                       relax: RelaxationConfig = RelaxationConfig(), tol: float = 1e-6) -> list[OracleResult]:
    """Window enumeration for each parameter row, all instances solved in one batch.

    ``centers`` default to the relaxation solutions.  Returns one result per
    row of ``xi``; a result without ``x`` means nothing feasible was found.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    size = (2 * config.window + 1) ** coeffs.n_z
    if size > config.cap:
        raise OracleCapExceeded(f"enumeration cap exceeded: window needs {size} > cap {config.cap}")
    if centers is None:
        centers = solve_relaxation(coeffs, xi, relax).x
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    n_r = coeffs.n_r
    blocks = []
    for c in centers:
        z = _window(c[n_r:], config)
        blocks.append(np.concatenate([np.broadcast_to(c[:n_r], (len(z), n_r)), z], axis=1))
    x = np.concatenate(blocks)
    xi_rep = np.repeat(xi, size, axis=0)
    problem = Problem.from_family(coeffs, xi_rep)
    if n_r:
        free = np.concatenate([np.ones(n_r), np.zeros(coeffs.n_z)])
        x = penalty_minimize(problem, x, relax, free).x
    node = dc.constant(x)
    f = problem.objective(node).value
    v = _violation_rows(problem.constraints(node).value)
    return [_pick(x[i * size:(i + 1) * size], f[i * size:(i + 1) * size], v[i * size:(i + 1) * size], tol)
            for i in range(len(xi))]
