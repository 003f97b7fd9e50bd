"""Feasibility projection by gradient descent through the correction layer.

At inference the relaxed point is moved along ``-∇_x̄ ‖g(φ(x̄), ξ)₊‖₁``,
with φ the deterministic (noise-free, EVAL-mode) correction and its
straight-through gradients, until the corrected point is feasible.

The module also carries the executable checks of the descent guarantees.
They run on a smooth stand-in ``Ṽ`` of the violation, where the hard
direction ``b`` is replaced by its soft value ``v``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import correction as cr
from . import diffcore as dc
from . import netcore
from . import problems as pb

FEASIBLE = "FEASIBLE"
MAX_ITER = "MAX_ITER"


class ProjectionDiverged(RuntimeError):
    def __init__(self, iterate: int):
        super().__init__(f"non-finite gradient at iterate {iterate}")
        self.iterate = iterate


@dataclass(frozen=True)
class ProjectionConfig:
    step: float = 0.01
    max_iter: int = 1000
    tol: float = 1e-6
    lipschitz: float | None = None

    def __post_init__(self):
        if not self.step > 0 or self.max_iter < 1 or not self.tol >= 0:
            raise ValueError("need step > 0, max_iter >= 1, tol >= 0")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ValueError("Lipschitz cap must be positive")

    @property
    def effective_step(self) -> float:
        if self.lipschitz is None:
            return self.step
        return min(self.step, 1.0 / self.lipschitz)


@dataclass
class ProjectionReport:
    iterations: int
    violations: list[float]
    grad_norms: list[float]
    reason: str
    x_hat: np.ndarray
    xbar: np.ndarray
    smooth: list[float] = field(default_factory=list)

    def write_trace(self, path) -> None:
        """CSV with columns iteration, V, smooth_V, grad_norm."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "V", "smooth_V", "grad_norm"])
            for k, v in enumerate(self.violations):
                s = self.smooth[k] if k < len(self.smooth) else ""
                gn = self.grad_norms[k] if k < len(self.grad_norms) else ""
                w.writerow([k, repr(v), repr(s) if s != "" else "", repr(gn) if gn != "" else ""])


def descend(x0, fn: Callable[[dc.Node], tuple[dc.Node, np.ndarray]], step: float, max_iter: int,
            tol: float, smooth_fn: Callable[[dc.Node], dc.Node] | None = None) -> ProjectionReport:
    """Gradient descent on ``fn(x)[0]`` until it is ``<= tol`` or ``max_iter`` updates.

    ``fn`` returns the scalar violation node and the point to report.  The
    violation and gradient-norm traces include the starting point.
    """
    x = np.array(x0, dtype=np.float64)
    viols, norms, smooth = [], [], []
    k = 0
    while True:
        leaf = dc.leaf(x)
        v_node, x_hat = fn(leaf)
        v = float(v_node.value)
        viols.append(v)
        if smooth_fn is not None:
            smooth.append(float(smooth_fn(dc.constant(x)).value))
        if v <= tol:
            return ProjectionReport(k, viols, norms, FEASIBLE, x_hat, x, smooth)
        if k == max_iter:
            return ProjectionReport(k, viols, norms, MAX_ITER, x_hat, x, smooth)
        grad = dc.backward(v_node).get(leaf, np.zeros_like(x))
        if not np.all(np.isfinite(grad)):
            raise ProjectionDiverged(k)
        norms.append(float(np.linalg.norm(grad)))
        x = x - step * grad
        k += 1


def _check_method(config: cr.CorrectionConfig) -> cr.CorrectionConfig:
    if config.method not in cr.LEARNABLE:
        raise ValueError(f"projection needs a learnable correction (RC or LT), not {config.method}")
    return config.deterministic()


def hard_violation(xbar, xi, coeffs: pb.CoefficientSet, delta: netcore.MlpWeights,
                   config: cr.CorrectionConfig) -> tuple[dc.Node, np.ndarray]:
    """``‖g(φ(x̄), ξ)₊‖₁`` with straight-through gradients, plus ``φ(x̄)``."""
    out = cr.correct(xbar, xi, delta, config, coeffs.n_r)
    return pb.violation(coeffs, xi, out.x_hat), out.x_hat.value


def project(xbar0, xi, coeffs: pb.CoefficientSet, delta: netcore.MlpWeights,
            config: cr.CorrectionConfig, pconfig: ProjectionConfig = ProjectionConfig(),
            trace_smooth: bool = False) -> tuple[pb.MixedIntegerSolution, ProjectionReport]:
    config = _check_method(config)
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    xbar0 = np.asarray(xbar0, dtype=np.float64).reshape(-1)
    if xbar0.shape[0] != coeffs.n_x:
        raise dc.ShapeError(f"relaxed point has length {xbar0.shape[0]}, expected {coeffs.n_x}")
    smooth_fn = None
    if trace_smooth:
        def smooth_fn(x):
            return smooth_violation(x, xi, coeffs, delta, config)
    report = descend(xbar0, lambda x: hard_violation(x, xi, coeffs, delta, config),
                     pconfig.effective_step, pconfig.max_iter, pconfig.tol, smooth_fn)
    return pb.MixedIntegerSolution.from_vector(report.x_hat, coeffs.n_r), report


def smooth_map(xbar, xi, coeffs: pb.CoefficientSet, delta: netcore.MlpWeights,
               config: cr.CorrectionConfig) -> dc.Node:
    """Correction with soft directions: ``[x̄_r + h_r, floor(x̄_z) + v]``.

    The floor is held fixed, so the map is smooth inside each integer cell
    and its graph gradient is the true derivative there.
    """
    config = _check_method(config)
    rows = xbar if isinstance(xbar, dc.Node) else dc.constant(xbar)
    single = rows.value.ndim == 1
    if single:
        rows = dc.build("slice", [rows], index=(None, slice(None)))
    n_r = coeffs.n_r
    h = cr.correction_logits(rows, np.atleast_2d(xi), delta)
    xr, xz = rows[:, :n_r], rows[:, n_r:]
    hr, hz = h[:, :n_r], h[:, n_r:]
    fl = np.floor(xz.value)
    if config.method == cr.RC:
        v = dc.sigmoid(hz / config.tau)
    else:
        v = dc.sigmoid((xz - fl - dc.sigmoid(hz)) * config.beta)
    out = dc.concat([xr + hr, v + fl], axis=1)
    return out[0] if single else out


def smooth_violation(xbar, xi, coeffs: pb.CoefficientSet, delta: netcore.MlpWeights,
                     config: cr.CorrectionConfig) -> dc.Node:
    """Violation of the soft-direction correction, a scalar node."""
    x = smooth_map(xbar, xi, coeffs, delta, config)
    return dc.sum(pb.violation(coeffs, xi, x))


@dataclass(frozen=True)
class DescentDiagnostics:
    monotone: bool
    bound_satisfied: bool
    min_grad_bound: float
    checked_steps: int


def descent_diagnostics(values, grad_norms, eta: float, rel_tol: float = 1e-9) -> DescentDiagnostics:
    """Check a gradient-descent trace against the descent guarantees.

    ``values[k]`` is Ṽ at iterate k and ``grad_norms[k]`` its gradient norm.
    Monotone: ``Ṽ(k+1) <= Ṽ(k) + rel_tol (1 + |Ṽ(k)|)``.  Min-gradient bound:
    ``min_{k<K} ‖∇Ṽ(k)‖² <= 2 (Ṽ(0) - Ṽ(K)) / (η K)`` for every K whose
    iterate is still infeasible (Ṽ(K) > 0); once the iterate has left the
    infeasible set the violation is clamped at zero and the bound no longer
    applies.  ``min_grad_bound`` is the right-hand side at the last checked K.
    """
    values = np.asarray(values, dtype=np.float64)
    grads = np.asarray(grad_norms, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty trace")
    if not eta > 0:
        raise ValueError("eta must be positive")
    steps = min(values.size - 1, grads.size)
    monotone = bool(np.all(values[1:steps + 1] <= values[:steps] + rel_tol * (1.0 + np.abs(values[:steps]))))
    ok, bound, checked = True, 0.0, 0
    running_min = math.inf
    for K in range(1, steps + 1):
        running_min = min(running_min, grads[K - 1] ** 2)
        if values[K] <= 0.0 and values[0] > 0.0:
            break
        bound = 2.0 * (values[0] - values[K]) / (eta * K)
        checked = K
        if running_min > bound + rel_tol * (1.0 + abs(bound)):
            ok = False
    return DescentDiagnostics(monotone, ok, bound, checked)


def k_epsilon(v0: float, eta: float, eps: float) -> int:
    """Iteration count after which some iterate has squared gradient norm or violation below eps."""
    if v0 < 0 or not eta > 0 or not eps > 0:
        raise ValueError("need v0 >= 0, eta > 0, eps > 0")
    return int(math.ceil(2.0 * v0 / (eta * eps)))


def constraint_bounds(coeffs: pb.CoefficientSet, xi, radius: float) -> tuple[float, float]:
    """``(G_g, L_g)``: bounds on the constraint Jacobian norm and its Lipschitz constant.

    Linear families use ``‖A‖`` and 0.  MIRB-type families bound the
    Jacobian over the ball ``‖x‖ <= radius``: the norm constraint has
    gradient ``2 x_r`` and curvature 2.
    """
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    fam, arr = coeffs.family, coeffs.arrays
    if fam == "IQP":
        return cr.spectral_norm(arr["A"]), 0.0
    if fam == "INP":
        d = xi[coeffs.m:]
        a = arr["A"].copy()
        a[:, 0] += d
        a[:, 1] -= d
        return cr.spectral_norm(a), 0.0
    if fam == "MIRB":
        p, q = arr["p"], arr["Q"]
    else:
        p, q = np.ones(1), -np.ones(1)
    rows = (2.0 * radius) ** 2 + coeffs.n_z + p @ p + q @ q
    return math.sqrt(rows), 2.0


def estimate_lipschitz(coeffs: pb.CoefficientSet, xi, delta: netcore.MlpWeights,
                       config: cr.CorrectionConfig, trajectory) -> cr.LipschitzEstimate:
    """``L = n̄_c (G_g L_φ + G_φ L_g)`` along a trajectory of relaxed points.

    ``n̄_c`` is the largest number of violated constraints seen along the
    trajectory (at least 1) and ``G_φ = 1 + s·G_δ`` with ``s`` the peak
    surrogate slope (``1/(4τ)`` for RC, ``β/4`` for LT).
    """
    config = _check_method(config)
    traj = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    g_delta = cr.network_jacobian_bound(delta)
    est = cr.lipschitz_bound(config, g_delta)
    slope = 0.25 / config.tau if config.method == cr.RC else config.beta / 4.0
    g_phi = 1.0 + slope * g_delta
    hats = np.stack([cr.correct(x, xi, delta, config, coeffs.n_r).x_hat.value for x in traj])
    g = pb.constraints(coeffs, np.asarray(xi, dtype=np.float64).reshape(1, -1), hats).value
    n_c_bar = max(1, int((g > 0).sum(axis=1).max()))
    radius = float(np.linalg.norm(hats, axis=1).max())
    g_g, l_g = constraint_bounds(coeffs, xi, radius)
    return est.with_constraints(g_g, l_g, g_phi, n_c_bar)



@dataclass(frozen=True)
class QuadraticProblem:
    """Smooth test problem Ṽ(x) = (Σ h_i (φ̃(x) − c)_i² − r²)₊ with φ̃(x) = x + σ((Wx + c0)/τ)."""
    w: np.ndarray
    c0: np.ndarray
    h: np.ndarray
    center: np.ndarray
    radius: float
    x0: np.ndarray
    tau: float = 1.0

    def violation(self, x: dc.Node) -> dc.Node:
        y = x + dc.sigmoid((dc.constant(self.w) @ x + self.c0) / self.tau)
        q = dc.sum(dc.square(y - self.center) * self.h) - self.radius ** 2
        return dc.relu(q)

    def lipschitz(self) -> float:
        """``G_g L_φ + G_φ² L_g`` with a single constraint (``n̄_c = 1``).

        ``G_g`` holds on the sublevel set ``{Ṽ <= Ṽ(x0)}``, which descent
        never leaves.
        """
        w_norm = float(np.linalg.norm(self.w, 2))
        h_max = float(self.h.max())
        v0 = float(self.violation(dc.constant(self.x0)).value)
        l_phi = cr.GUMBEL_CURVATURE * w_norm ** 2 / self.tau ** 2
        g_phi = 1.0 + 0.25 * w_norm / self.tau
        g_g = 2.0 * math.sqrt(h_max * (v0 + self.radius ** 2))
        return g_g * l_phi + g_phi ** 2 * 2.0 * h_max


def quadratic_suite(count: int = 20, dim: int = 4, seed: int = 0) -> list[QuadraticProblem]:
    """Ellipsoid constraints with curvatures spread over [0.01, 1], started off the weak axes."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for _ in range(count):
        w = rng.normal(size=(dim, dim))
        w *= rng.uniform(0.2, 1.0) / np.linalg.norm(w, 2)
        h = np.geomspace(0.01, 1.0, dim)
        center = rng.normal(size=dim)
        radius = float(rng.uniform(0.5, 1.5))
        d = rng.normal(size=dim) / np.sqrt(h)
        d /= math.sqrt(float(d @ (h * d)))
        x0 = center + d * (radius + rng.uniform(1.0, 3.0))
        out.append(QuadraticProblem(w, rng.normal(size=dim), h, center, radius, x0))
    return out


def run_quadratic(problem: QuadraticProblem, max_iter: int = 1000) -> tuple[ProjectionReport, float]:
    """Gradient descent with ``η = 1/L̂``; returns the report and ``η``."""
    eta = 1.0 / problem.lipschitz()
    report = descend(problem.x0, lambda x: (problem.violation(x), x.value), eta, max_iter, 0.0)
    return report, eta
