"""Integer correction layers.

Given a relaxed solution ``x̄`` (rows of ``[x̄_r, x̄_z]``) a correction layer
returns a mixed-integer ``x̂`` whose integer part is ``floor(x̄_z) + b`` with
``b`` in {0, 1}.  The methods differ in how ``b`` is chosen:

``RC``  rounding classification: ``b = 1[σ((h_z + ε₁ - ε₂)/τ) > 0.5]``
``LT``  learnable threshold: ``b = 1[frac(x̄_z) > σ(h_z)]`` with a σ(β·r) surrogate
``RS``  nearest rounding (half down) with an identity straight-through gradient
``RL``  nearest rounding applied after training, no gradient at all

``h = δ(x̄, ξ)`` is the correction network.  RC and LT also shift the
continuous part, ``x̂_r = x̄_r + h_r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import netcore
from .problems import MixedIntegerSolution

RC, LT, RS, RL = "RC", "LT", "RS", "RL"
METHODS = (RC, LT, RS, RL)
LEARNABLE = (RC, LT)

# max |d/dz σ(z)(1 - σ(z))| = 1 / (6 sqrt 3)
GUMBEL_CURVATURE = 1.0 / (6.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class CorrectionConfig:
    method: str = RC
    tau: float = 1.0
    beta: float = 10.0
    noise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.upper())
        if self.method not in METHODS:
            raise ValueError(f"unknown correction method {self.method!r}")
        if not self.tau > 0 or not self.beta > 0:
            raise ValueError("tau and beta must be positive")

    @property
    def uses_delta(self) -> bool:
        return self.method in LEARNABLE

    def deterministic(self) -> "CorrectionConfig":
        return CorrectionConfig(self.method, self.tau, self.beta, False)


@dataclass
class CorrectionOutput:
    """Corrected rows as a graph node plus the soft and hard directions."""
    x_hat: dc.Node
    v: np.ndarray
    b: np.ndarray
    n_r: int

    def solutions(self) -> list[MixedIntegerSolution]:
        rows = np.atleast_2d(self.x_hat.value)
        return [MixedIntegerSolution.from_vector(r, self.n_r) for r in rows]


@dataclass(frozen=True)
class LipschitzEstimate:
    surrogate_bound: float
    g_delta: float
    l_phi: float
    g_g: float | None = None
    l_g: float | None = None
    g_phi: float | None = None
    n_c_bar: int | None = None

    @property
    def total(self) -> float:
        """``n̄_c (G_g L_φ + G_φ L_g)``; needs the constraint factors."""
        if None in (self.g_g, self.l_g, self.g_phi, self.n_c_bar):
            raise ValueError("constraint bounds not attached; use with_constraints()")
        return self.n_c_bar * (self.g_g * self.l_phi + self.g_phi * self.l_g)

    def with_constraints(self, g_g: float, l_g: float, g_phi: float, n_c_bar: int) -> "LipschitzEstimate":
        if min(g_g, l_g, g_phi, n_c_bar) < 0:
            raise ValueError("Lipschitz factors must be nonnegative")
        return LipschitzEstimate(self.surrogate_bound, self.g_delta, self.l_phi, g_g, l_g, g_phi, n_c_bar)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))


def gumbel_sigmoid(h, eps1, eps2, tau: float) -> dc.Node:
    """``σ((h + ε₁ - ε₂)/τ)``; its derivative in h is ``v(1 - v)/τ``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    h = h if isinstance(h, dc.Node) else dc.constant(h)
    eps1 = np.broadcast_to(np.asarray(eps1, dtype=np.float64), h.shape)
    eps2 = np.broadcast_to(np.asarray(eps2, dtype=np.float64), h.shape)
    return dc.sigmoid((h + (eps1 - eps2)) / tau)


def _as_rows(x) -> tuple[dc.Node, bool]:
    node = x if isinstance(x, dc.Node) else dc.constant(x)
    if node.value.ndim == 1:
        return dc.build("slice", [node], index=(None, slice(None))), True
    if node.value.ndim != 2:
        raise dc.ShapeError(f"expected a vector or a matrix, got shape {node.shape}")
    return node, False


def _split(x: dc.Node, n_r: int) -> tuple[dc.Node, dc.Node]:
    if not 0 <= n_r <= x.shape[1]:
        raise dc.ShapeError(f"n_r={n_r} outside [0, {x.shape[1]}]")
    return x[:, :n_r], x[:, n_r:]


def correction_logits(xbar: dc.Node, xi, delta: netcore.MlpWeights, mode: str = netcore.EVAL,
                      rng: np.random.Generator | None = None, params=None) -> dc.Node:
    """``h = δ(concat(x̄, ξ))``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    if xi.shape[0] != xbar.shape[0]:
        if xi.shape[0] != 1:
            raise dc.ShapeError(f"batch mismatch: {xbar.shape[0]} solutions, {xi.shape[0]} parameters")
        xi = np.broadcast_to(xi, (xbar.shape[0], xi.shape[1]))
    inp = dc.concat([xbar, dc.constant(xi)], axis=1)
    width_in, width_out = delta.spec.widths[0], delta.spec.widths[-1]
    if inp.shape[1] != width_in or width_out != xbar.shape[1]:
        raise dc.ShapeError(
            f"correction net maps {width_in}->{width_out}, inputs need {inp.shape[1]}->{xbar.shape[1]}")
    return netcore.forward(delta, inp, mode, rng, params)


def apply_rc(xbar, h, n_r: int, config: CorrectionConfig,
             rng: np.random.Generator | None = None) -> CorrectionOutput:
    """RC step given precomputed logits ``h`` (same shape as x̄)."""
    xbar, single = _as_rows(xbar)
    h, _ = _as_rows(h)
    if h.shape != xbar.shape:
        raise dc.ShapeError(f"logits shape {h.shape} != relaxed shape {xbar.shape}")
    xr, xz = _split(xbar, n_r)
    hr, hz = _split(h, n_r)
    if config.noise:
        if rng is None:
            raise ValueError("Gumbel noise requested without a random generator")
        e1, e2 = gumbel_noise(rng, hz.shape), gumbel_noise(rng, hz.shape)
    else:
        e1 = e2 = np.zeros(hz.shape)
    v = gumbel_sigmoid(hz, e1, e2, config.tau)
    b = dc.attach_surrogate(v, dc.STEP_STE)
    x_z = dc.attach_surrogate(xz, dc.FLOOR_STE) + b
    return _finish(xr + hr, x_z, v.value, b.value, n_r, single)


def apply_lt(xbar, h, n_r: int, config: CorrectionConfig) -> CorrectionOutput:
    """LT step given precomputed logits ``h``."""
    xbar, single = _as_rows(xbar)
    h, _ = _as_rows(h)
    if h.shape != xbar.shape:
        raise dc.ShapeError(f"logits shape {h.shape} != relaxed shape {xbar.shape}")
    xr, xz = _split(xbar, n_r)
    hr, hz = _split(h, n_r)
    t = dc.sigmoid(hz)
    frac = xz.value - np.floor(xz.value)
    # r = frac - t; ∂v/∂t = -β v (1 - v), the fractional part carries no gradient
    v = dc.sigmoid((frac - t) * config.beta)
    b = dc.attach_surrogate(v, dc.STEP_STE)
    x_z = dc.attach_surrogate(xz, dc.FLOOR_STE) + b
    return _finish(xr + hr, x_z, v.value, b.value, n_r, single)


def _finish(x_r, x_z, v, b, n_r, single) -> CorrectionOutput:
    x_hat = dc.concat([x_r, x_z], axis=1)
    if single:
        x_hat, v, b = x_hat[0], v[0], b[0]
    return CorrectionOutput(x_hat, v, b, n_r)


def rc_correct(xbar, xi, delta: netcore.MlpWeights, config: CorrectionConfig, n_r: int,
               rng: np.random.Generator | None = None, mode: str = netcore.EVAL,
               params=None) -> CorrectionOutput:
    if config.method != RC:
        raise ValueError(f"rc_correct called with method {config.method}")
    rows, single = _as_rows(xbar)
    h = correction_logits(rows, xi, delta, mode, rng, params)
    out = apply_rc(rows, h, n_r, config, rng)
    return _squeeze(out, single)


def lt_correct(xbar, xi, delta: netcore.MlpWeights, config: CorrectionConfig, n_r: int,
               rng: np.random.Generator | None = None, mode: str = netcore.EVAL,
               params=None) -> CorrectionOutput:
    if config.method != LT:
        raise ValueError(f"lt_correct called with method {config.method}")
    rows, single = _as_rows(xbar)
    h = correction_logits(rows, xi, delta, mode, rng, params)
    out = apply_lt(rows, h, n_r, config)
    return _squeeze(out, single)


def _squeeze(out: CorrectionOutput, single: bool) -> CorrectionOutput:
    if not single:
        return out
    return CorrectionOutput(out.x_hat[0], out.v[0], out.b[0], out.n_r)


def rs_round(xbar, n_r: int, straight_through: bool = True) -> CorrectionOutput:
    """Nearest rounding of the integer part, exact halves going down.

    With ``straight_through`` the rounding passes gradients unchanged (RS
    training); otherwise the result is a constant (post-hoc rounding for RL).
    """
    rows, single = _as_rows(xbar)
    if not straight_through:
        rows = dc.constant(rows.value)
    xr, xz = _split(rows, n_r)
    frac = xz.value - np.floor(xz.value)
    b = (frac > 0.5).astype(np.float64)
    x_z = dc.attach_surrogate(xz, dc.ROUND_STE)
    return _squeeze(_finish(xr, x_z, frac, b, n_r, False), single)


def correct(xbar, xi, delta: netcore.MlpWeights | None, config: CorrectionConfig, n_r: int,
            rng: np.random.Generator | None = None, mode: str = netcore.EVAL,
            params=None) -> CorrectionOutput:
    """Dispatch on ``config.method``."""
    if config.method == RC:
        return rc_correct(xbar, xi, delta, config, n_r, rng, mode, params)
    if config.method == LT:
        return lt_correct(xbar, xi, delta, config, n_r, rng, mode, params)
    return rs_round(xbar, n_r, straight_through=config.method == RS)


def spectral_norm(matrix, steps: int = 50, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``MᵀM``."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise dc.ShapeError("spectral_norm expects a matrix")
    if not np.any(m):
        return 0.0
    v = np.random.Generator(np.random.PCG64(seed)).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(steps):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_sigma = float(np.linalg.norm(m @ v))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            return new_sigma
        sigma = new_sigma
    return sigma


def network_jacobian_bound(weights: netcore.MlpWeights, steps: int = 50, tol: float = 1e-8) -> float:
    """Upper bound on the input Jacobian norm of an EVAL-mode network.

    Product of the layers' spectral norms; batch-norm contributes its largest
    per-unit gain ``|scale| / sqrt(running_var + eps)`` and ReLU contributes 1.
    """
    bound = 1.0
    for i, w in enumerate(weights.weights):
        bound *= spectral_norm(w, steps, tol)
        if i < len(weights.bn_scale):
            gain = np.abs(weights.bn_scale[i]) / np.sqrt(weights.running_var[i] + netcore.BN_EPS)
            bound *= float(gain.max()) if gain.size else 1.0
    return bound


def lipschitz_bound(config: CorrectionConfig, g_delta: float) -> LipschitzEstimate:
    """Lipschitz constant of the surrogate Jacobian: RC ``0.0962/τ²·G_δ``, LT ``β/4·G_δ``."""
    if g_delta < 0:
        raise ValueError("G_delta must be nonnegative")
    if config.method == RC:
        surrogate = GUMBEL_CURVATURE / config.tau ** 2
    elif config.method == LT:
        surrogate = config.beta / 4.0
    else:
        raise ValueError(f"{config.method} has no learnable surrogate")
    return LipschitzEstimate(surrogate, g_delta, surrogate * g_delta)
