"""Fully connected networks on top of :mod:`diffcore`.

Hidden blocks run affine -> batch-norm -> ReLU -> dropout (each stage
optional); the last layer is affine only.  Dropout is inverted, so EVAL mode
needs no rescaling.  Batch-norm keeps running statistics with momentum 0.1.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

TRAIN = "TRAIN"
EVAL = "EVAL"

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    relu: bool = True
    batchnorm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"invalid layer widths {self.widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def solution_mapping_spec(n_in: int, n_out: int, width: int) -> MlpSpec:
    """Five affine layers with ReLU, no normalization."""
    return MlpSpec((n_in, width, width, width, width, n_out))


def correction_net_spec(n_in: int, n_out: int, width: int) -> MlpSpec:
    """Four affine layers with ReLU, batch-norm and dropout 0.2."""
    return MlpSpec((n_in, width, width, width, n_out), batchnorm=True, dropout=0.2)


@dataclass
class MlpWeights:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray] = field(default_factory=list)
    bn_shift: list[np.ndarray] = field(default_factory=list)
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (views into this object)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        for i, (s, t) in enumerate(zip(self.bn_scale, self.bn_shift)):
            out[f"bn_scale{i}"] = s
            out[f"bn_shift{i}"] = t
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.running_mean, self.running_var)):
            out[f"bn_mean{i}"] = m
            out[f"bn_var{i}"] = v
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def copy(self) -> "MlpWeights":
        return copy.deepcopy(self)

    @classmethod
    def from_arrays(cls, spec: MlpSpec, arrays: dict[str, np.ndarray]) -> "MlpWeights":
        n = spec.n_layers
        hidden = n - 1 if spec.batchnorm else 0
        w = cls(
            spec,
            [np.array(arrays[f"W{i}"], dtype=np.float64) for i in range(n)],
            [np.array(arrays[f"b{i}"], dtype=np.float64) for i in range(n)],
            [np.array(arrays[f"bn_scale{i}"], dtype=np.float64) for i in range(hidden)],
            [np.array(arrays[f"bn_shift{i}"], dtype=np.float64) for i in range(hidden)],
            [np.array(arrays[f"bn_mean{i}"], dtype=np.float64) for i in range(hidden)],
            [np.array(arrays[f"bn_var{i}"], dtype=np.float64) for i in range(hidden)],
        )
        w.validate()
        return w

    def validate(self) -> None:
        widths = self.spec.widths
        for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
            if wt.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i}: weight shape {wt.shape} inconsistent with widths {widths}")
        if any(np.any(v <= 0) for v in self.running_var):
            raise ValueError("running variance must be positive")


def init_mlp(spec: MlpSpec, seed: int) -> MlpWeights:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, identity batch-norm."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    hidden = spec.widths[1:-1] if spec.batchnorm else ()
    return MlpWeights(
        spec, weights, biases,
        [np.ones(w) for w in hidden], [np.zeros(w) for w in hidden],
        [np.zeros(w) for w in hidden], [np.ones(w) for w in hidden],
    )


def forward(weights: MlpWeights, batch, mode: str = EVAL, rng: np.random.Generator | None = None,
            params: dict[str, dc.Node] | None = None) -> dc.Node:
    """Run the network on a (B, in) batch and return the (B, out) output node.

    ``params`` maps parameter names to leaf nodes when gradients with respect
    to the weights are wanted; otherwise the weights enter as constants.
    TRAIN mode updates the batch-norm running statistics in place.
    """
    spec = weights.spec
    x = batch if isinstance(batch, dc.Node) else dc.constant(batch)
    if x.value.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise dc.ShapeError(f"network input shape {x.shape} does not match width {spec.widths[0]}")
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == TRAIN and spec.batchnorm and x.shape[0] < 2:
        raise ValueError("TRAIN mode with batch-norm needs a batch of at least 2 rows")
    if mode == TRAIN and spec.dropout > 0 and rng is None:
        raise ValueError("TRAIN mode with dropout needs a random generator")

    def p(name: str) -> dc.Node:
        if params is not None and name in params:
            return params[name]
        return dc.constant(weights.params()[name])

    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        x = x @ dc.transpose(p(f"W{i}")) + p(f"b{i}")
        if i == last:
            break
        if spec.batchnorm:
            x = _batchnorm(weights, i, x, mode, p)
        if spec.relu:
            x = dc.relu(x)
        if spec.dropout > 0 and mode == TRAIN:
            keep = 1.0 - spec.dropout
            mask = (rng.random(x.shape) < keep) / keep
            x = x * mask
    return x


def _batchnorm(weights: MlpWeights, i: int, x: dc.Node, mode: str, p) -> dc.Node:
    if mode == TRAIN:
        mu = dc.mean(x, axis=0)
        centered = x - mu
        var = dc.mean(dc.square(centered), axis=0)
        rows = x.shape[0]
        weights.running_mean[i] *= 1.0 - BN_MOMENTUM
        weights.running_mean[i] += BN_MOMENTUM * mu.value
        weights.running_var[i] *= 1.0 - BN_MOMENTUM
        weights.running_var[i] += BN_MOMENTUM * var.value * rows / (rows - 1)
        normed = centered / dc.sqrt(var + BN_EPS)
    else:
        inv_std = 1.0 / np.sqrt(weights.running_var[i] + BN_EPS)
        normed = (x - weights.running_mean[i]) * inv_std
    return normed * p(f"bn_scale{i}") + p(f"bn_shift{i}")


# anchors from the reported architecture table: (problem size, hidden width)
_QP_WIDTHS = ((20, 64), (50, 128), (100, 256), (200, 512), (500, 1024), (1000, 2048))
_MIRB_ANCHORS = ((2, 4), (20, 16), (10000, 1024))


def hidden_width_for(family: str, n: int, m: int = 0) -> int:
    """Hidden-layer width used for a problem of the given size.

    IQP/INP use the width of the nearest listed size (log distance).  MIRB
    interpolates log-linearly between the anchors n=2 -> 4, n=20 -> 16 and
    n=10000 -> 1024, then snaps to the nearest power of two.  The 2-D
    Rosenbrock instance is the two-variable MIRB case.
    """
    fam = family.upper()
    if fam in ("IQP", "INP"):
        size = max(int(n), 1)
        return min(_QP_WIDTHS, key=lambda sw: abs(math.log(sw[0]) - math.log(size)))[1]
    if fam in ("ROSENBROCK2D", "RB2D"):
        return 4
    if fam != "MIRB":
        raise ValueError(f"unknown problem family {family!r}")
    size = min(max(int(n), _MIRB_ANCHORS[0][0]), _MIRB_ANCHORS[-1][0])
    for (n0, w0), (n1, w1) in zip(_MIRB_ANCHORS[:-1], _MIRB_ANCHORS[1:]):
        if size <= n1:
            t = (math.log(size) - math.log(n0)) / (math.log(n1) - math.log(n0))
            log_w = math.log2(w0) + t * (math.log2(w1) - math.log2(w0))
            return 2 ** int(round(log_w))
    return _MIRB_ANCHORS[-1][1]
