"""Reading and writing coefficients, instance splits and trained weights."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from . import container
from . import netcore
from . import problems as pb
from .training import ModelWeights

COEFFS_FILE = "coeffs.milo"
SPLITS = ("train", "val", "test")


def manifest(command: str, coeffs: pb.CoefficientSet | None = None, seeds: dict | None = None,
             config: dict | None = None) -> dict:
    """Provenance block embedded in every written file (no timestamps, so files stay reproducible)."""
    out = {"command": command, "tool_version": __version__, "seeds": seeds or {}, "config": config or {}}
    if coeffs is not None:
        out["family"] = coeffs.family
        out["dims"] = {"n": coeffs.n, "m": coeffs.m, "n_r": coeffs.n_r, "n_z": coeffs.n_z,
                       "n_c": coeffs.n_c, "n_xi": coeffs.n_xi}
    return out


def write_coeffs(path, coeffs: pb.CoefficientSet, man: dict) -> None:
    meta = {"kind": "coefficients", "family": coeffs.family, "n": coeffs.n, "m": coeffs.m,
            "seed": coeffs.seed, "n_r": coeffs.n_r, "n_z": coeffs.n_z, "n_c": coeffs.n_c,
            "n_xi": coeffs.n_xi, "manifest": man}
    container.write(path, meta, dict(sorted(coeffs.arrays.items())))


def read_coeffs(path) -> pb.CoefficientSet:
    meta, arrays = container.read(path)
    if meta.get("kind") != "coefficients":
        raise container.ContainerError(f"{path} does not hold coefficients")
    return pb.CoefficientSet(meta["family"], meta["n_r"], meta["n_z"], meta["n_c"], meta["n_xi"],
                             arrays, meta["seed"], meta["n"], meta["m"])


def write_split(path, name: str, xi: np.ndarray, man: dict) -> None:
    container.write(path, {"kind": "instances", "split": name, "manifest": man}, {"xi": xi})


def read_split(path) -> np.ndarray:
    meta, arrays = container.read(path)
    if meta.get("kind") != "instances":
        raise container.ContainerError(f"{path} does not hold instances")
    return arrays["xi"]


def load_data_dir(directory) -> tuple[pb.CoefficientSet, dict[str, np.ndarray]]:
    d = Path(directory)
    coeffs = read_coeffs(d / COEFFS_FILE)
    splits = {}
    for name in SPLITS:
        f = d / f"{name}.milo"
        if f.exists():
            xi = read_split(f)
            if xi.ndim != 2 or xi.shape[1] != coeffs.n_xi:
                raise container.ContainerError(f"{f}: instance width does not match coefficients")
            splits[name] = xi
    return coeffs, splits


def _spec_meta(spec: netcore.MlpSpec) -> dict:
    return {"widths": list(spec.widths), "relu": spec.relu, "batchnorm": spec.batchnorm,
            "dropout": spec.dropout}


def _spec_from(meta: dict) -> netcore.MlpSpec:
    return netcore.MlpSpec(tuple(meta["widths"]), meta["relu"], meta["batchnorm"], meta["dropout"])


def write_weights(path, models: ModelWeights, man: dict, extra: dict | None = None) -> None:
    arrays = {f"pi.{k}": v for k, v in models.pi.arrays().items()}
    meta = {"kind": "weights", "method": models.method, "n_r": models.n_r,
            "pi": _spec_meta(models.pi.spec), "delta": None, "manifest": man}
    if models.delta is not None:
        arrays.update({f"delta.{k}": v for k, v in models.delta.arrays().items()})
        meta["delta"] = _spec_meta(models.delta.spec)
    meta.update(extra or {})
    container.write(path, meta, arrays)


def read_weights(path) -> tuple[ModelWeights, dict]:
    meta, arrays = container.read(path)
    if meta.get("kind") != "weights":
        raise container.ContainerError(f"{path} does not hold weights")
    pi = netcore.MlpWeights.from_arrays(
        _spec_from(meta["pi"]), {k[3:]: v for k, v in arrays.items() if k.startswith("pi.")})
    delta = None
    if meta["delta"] is not None:
        delta = netcore.MlpWeights.from_arrays(
            _spec_from(meta["delta"]), {k[6:]: v for k, v in arrays.items() if k.startswith("delta.")})
    return ModelWeights(pi, delta, meta["method"], meta["n_r"]), meta


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
