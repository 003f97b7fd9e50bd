"""Self-supervised training of the solution mapping and correction net.

The loss is the batch mean of ``f(x̂, ξ) + λ ‖g(x̂, ξ)₊‖₁`` evaluated on the
corrected output.  RL is the exception: it trains on the relaxed output and
rounds only at inference.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import correction as cr
from . import diffcore as dc
from . import netcore
from . import problems as pb


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 100.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (batch-norm)")
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be positive")


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @classmethod
    def generate(cls, coeffs: pb.CoefficientSet, n_train: int = 8000, n_val: int = 1000,
                 n_test: int = 100, seed: int = 0) -> "Dataset":
        return cls(
            pb.sample_instances(coeffs, n_train, seed, pb.STREAM_TRAIN),
            pb.sample_instances(coeffs, n_val, seed, pb.STREAM_VAL),
            pb.sample_instances(coeffs, n_test, seed, pb.STREAM_TEST),
        )


@dataclass
class ModelWeights:
    pi: netcore.MlpWeights
    delta: netcore.MlpWeights | None
    method: str
    n_r: int

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.pi.copy(), None if self.delta is None else self.delta.copy(),
                            self.method, self.n_r)


@dataclass
class LossBreakdown:
    total: dc.Node
    objective: float
    penalty: float


@dataclass
class InstanceRecord:
    idx: int
    obj: float
    violation: float
    time_s: float
    proj_iters: int = 0


@dataclass
class Metrics:
    method: str
    obj_mean: float
    obj_median: float
    feasible_frac: float
    mean_time_s: float
    instances: list[InstanceRecord]
    heatmap: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pre_projection: "Metrics | None" = None

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "obj_mean": self.obj_mean,
            "obj_median": self.obj_median,
            "feasible_frac": self.feasible_frac,
            "mean_time_s": self.mean_time_s,
            "instances": [vars(r).copy() for r in self.instances],
        }
        if self.pre_projection is not None:
            out["pre_projection"] = self.pre_projection.to_json()
        return out


def build_models(coeffs: pb.CoefficientSet, method: str, seed: int = 0,
                 width: int | None = None) -> ModelWeights:
    method = method.upper()
    if width is None:
        width = netcore.hidden_width_for(coeffs.family, coeffs.n, coeffs.m)
    pi = netcore.init_mlp(netcore.solution_mapping_spec(coeffs.n_xi, coeffs.n_x, width), seed)
    delta = None
    if method in cr.LEARNABLE:
        spec = netcore.correction_net_spec(coeffs.n_x + coeffs.n_xi, coeffs.n_x, width)
        delta = netcore.init_mlp(spec, seed + 1)
    return ModelWeights(pi, delta, method, coeffs.n_r)


def penalty_loss(coeffs: pb.CoefficientSet, xi, x_hat, lam: float) -> LossBreakdown:
    """Batch mean of objective plus ``lam`` times the violation."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    if xi.shape[0] == 0:
        raise ValueError("empty batch")
    f = dc.mean(pb.objective(coeffs, xi, x_hat))
    v = dc.mean(pb.violation(coeffs, xi, x_hat))
    total = f + lam * v
    return LossBreakdown(total, float(f.value), float(v.value))


def relaxed_output(models: ModelWeights, xi, params=None) -> dc.Node:
    return netcore.forward(models.pi, np.atleast_2d(xi), netcore.EVAL, None, params)


def predict(models: ModelWeights, xi, config: cr.CorrectionConfig, mode: str = netcore.EVAL,
            rng: np.random.Generator | None = None, params=None) -> tuple[dc.Node, cr.CorrectionOutput]:
    """Relaxed output ``x̄ = π(ξ)`` and its correction."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    xbar = relaxed_output(models, xi, params)
    return xbar, cr.correct(xbar, xi, models.delta, config, models.n_r, rng, mode, params)


class AdamW:
    """Adam with decoupled weight decay over a dict of numpy arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            p *= 1.0 - self.lr * self.weight_decay
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _trainable(models: ModelWeights) -> dict[str, np.ndarray]:
    params = {f"pi.{k}": v for k, v in models.pi.params().items()}
    if models.method in cr.LEARNABLE:
        params.update({f"delta.{k}": v for k, v in models.delta.params().items()})
    return params


def _batch_loss(coeffs, models, xi, config, lam, mode, rng, leaves=None) -> LossBreakdown:
    pi_p = delta_p = None
    if leaves is not None:
        pi_p = {k[3:]: v for k, v in leaves.items() if k.startswith("pi.")}
        delta_p = {k[6:]: v for k, v in leaves.items() if k.startswith("delta.")}
    xbar = netcore.forward(models.pi, xi, mode, rng, pi_p)
    if models.method == cr.RL:
        return penalty_loss(coeffs, xi, xbar, lam)
    out = cr.correct(xbar, xi, models.delta, config, models.n_r, rng, mode, delta_p)
    return penalty_loss(coeffs, xi, out.x_hat, lam)


def validation_loss(coeffs, models: ModelWeights, xi, config: cr.CorrectionConfig, lam: float) -> float:
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    return float(_batch_loss(coeffs, models, xi, config.deterministic(), lam, netcore.EVAL, None).total.value)


def loss_gradients(coeffs, models: ModelWeights, xi, config: cr.CorrectionConfig, lam: float,
                   mode: str = netcore.EVAL, rng=None) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss and its gradient for every parameter of π and δ (zeros where unused)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    arrays = {f"pi.{k}": v for k, v in models.pi.params().items()}
    if models.delta is not None:
        arrays.update({f"delta.{k}": v for k, v in models.delta.params().items()})
    leaves = {k: dc.leaf(v, name=k) for k, v in arrays.items()}
    loss = _batch_loss(coeffs, models, xi, config, lam, mode, rng, leaves)
    grads = dc.backward(loss.total)
    return loss, {k: grads.get(node, np.zeros_like(arrays[k])) for k, node in leaves.items()}


def train(coeffs: pb.CoefficientSet, dataset: Dataset, models: ModelWeights,
          config: cr.CorrectionConfig, tconfig: TrainingConfig,
          log=None) -> tuple[ModelWeights, list[dict]]:
    """Train in place on ``dataset.train``; return the best-validation copy and the history.

    History entry 0 holds the validation loss before any update.
    """
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if models.method != config.method:
        raise ValueError(f"models built for {models.method}, config says {config.method}")
    rng = pb.make_rng(tconfig.seed, 100)
    params = _trainable(models)
    opt = AdamW(params, tconfig.lr, tconfig.betas, tconfig.eps, tconfig.weight_decay)

    best_val = validation_loss(coeffs, models, dataset.val, config, tconfig.lam)
    if not math.isfinite(best_val):
        raise TrainingDivergence(0, best_val)
    history = [{"epoch": 0, "train_loss": None, "val_loss": best_val}]
    best = models.copy()
    since_best = 0
    n = len(dataset.train)
    for epoch in range(1, tconfig.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, tconfig.batch_size):
            idx = order[start:start + tconfig.batch_size]
            if len(idx) < 2:
                continue
            xi = dataset.train[idx]
            leaves = {k: dc.leaf(v, name=k) for k, v in params.items()}
            loss = _batch_loss(coeffs, models, xi, config, tconfig.lam, netcore.TRAIN, rng, leaves)
            value = float(loss.total.value)
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, value)
            grads = dc.backward(loss.total)
            opt.step({k: grads[node] for k, node in leaves.items() if node in grads})
            total += value * len(idx)
            seen += len(idx)
        val = validation_loss(coeffs, models, dataset.val, config, tconfig.lam)
        if not math.isfinite(val):
            raise TrainingDivergence(epoch, val)
        history.append({"epoch": epoch, "train_loss": total / max(seen, 1), "val_loss": val})
        if log is not None:
            log(history[-1])
        if val < best_val:
            best_val, best, since_best = val, models.copy(), 0
        else:
            since_best += 1
            if since_best >= tconfig.patience:
                break
    return best, history


def _summarize(method, objs, viols, times, iters, tol, heatmap) -> Metrics:
    records = [InstanceRecord(i, float(o), float(v), float(t), int(k))
               for i, (o, v, t, k) in enumerate(zip(objs, viols, times, iters))]
    return Metrics(
        method,
        float(np.mean(objs)),
        float(np.median(objs)),
        float(np.mean(np.asarray(viols) <= tol)),
        float(np.mean(times)),
        records,
        heatmap,
    )


def metrics_from_solutions(coeffs: pb.CoefficientSet, xi, solutions, method: str, tol: float = 1e-6,
                           times=None, iters=None) -> Metrics:
    """Metrics for already computed solutions (rows of ``[x_r, x_z]``)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    sols = np.atleast_2d(np.asarray(solutions, dtype=np.float64))
    objs = pb.objective(coeffs, xi, sols).value
    g = pb.constraints(coeffs, xi, sols).value
    viols = np.maximum(g, 0.0).sum(axis=1)
    times = np.zeros(len(xi)) if times is None else times
    iters = np.zeros(len(xi), dtype=int) if iters is None else iters
    return _summarize(method, objs, viols, times, iters, tol, np.maximum(g, 0.0))


def evaluate(coeffs: pb.CoefficientSet, xi_test, models: ModelWeights, config: cr.CorrectionConfig,
             tol: float = 1e-6, projection=None) -> Metrics:
    """Per-instance EVAL inference, noise off, optionally followed by projection.

    ``projection`` is a ProjectionConfig; when given, the returned metrics are
    post-projection and ``pre_projection`` holds the uncorrected-by-projection
    ones.  Time per instance covers forward, correction and projection.
    """
    from . import projection as pj

    xi_test = np.atleast_2d(np.asarray(xi_test, dtype=np.float64))
    if len(xi_test) == 0:
        raise ValueError("empty test set")
    config = config.deterministic()
    if projection is not None and config.method not in cr.LEARNABLE:
        raise ValueError(f"projection needs a learnable correction, not {config.method}")
    pre_rows, post_rows, times, iters = [], [], [], []
    for row in xi_test:
        start = time.perf_counter()
        xi = row[None, :]
        xbar = relaxed_output(models, xi)
        out = cr.correct(xbar, xi, models.delta, config, models.n_r)
        pre = out.x_hat.value[0]
        post, k = pre, 0
        if projection is not None:
            sol, report = pj.project(xbar.value[0], row, coeffs, models.delta, config, projection)
            post, k = sol.as_vector(), report.iterations
        times.append(time.perf_counter() - start)
        pre_rows.append(pre)
        post_rows.append(post)
        iters.append(k)
    method = config.method + ("-P" if projection is not None else "")
    post_m = metrics_from_solutions(coeffs, xi_test, post_rows, method, tol, times, iters)
    if projection is not None:
        post_m.pre_projection = metrics_from_solutions(coeffs, xi_test, pre_rows, config.method, tol, times)
        post_m.heatmap = post_m.pre_projection.heatmap
    return post_m
