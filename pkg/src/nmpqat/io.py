"""Frozen-model files and atomic report writing.

A model file is indented, key-sorted JSON.  Quantized layers store integer
codes plus one scale per neuron; full-precision layers store raw weights.
Floats go through ``repr`` (shortest round-trip form), so a file written,
loaded and written again is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import FP_BITS, FrozenLayer, FrozenModel

FORMAT = "nmpqat-frozen-model"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]


def _layer_to_dict(layer: FrozenLayer) -> dict:
    d = {
        "d_in": layer.d_in,
        "d_out": layer.d_out,
        "nonlinearity": layer.nonlinearity,
        "bias": _floats(layer.bias),
        "weight_bits": _floats(layer.weight_bits),
    }
    if layer.full_precision:
        # one row per neuron, like the codes of quantized layers
        d["weights"] = [_floats(col) for col in layer.codes.T]
    else:
        codes = layer.codes.T
        if not np.array_equal(codes, np.round(codes)):
            raise ModelFileError("quantized layer has non-integer codes")
        d["scales"] = _floats(layer.scales)
        d["codes"] = [[int(c) for c in col] for col in codes]
    if layer.act_bits is not None:
        d["act_bits"] = [int(b) for b in layer.act_bits]
        d["alpha"] = _floats(layer.alpha)
    return d


def model_to_dict(model: FrozenModel) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "task": model.task,
        "mode": model.mode,
        "n_classes": model.n_classes,
        "label_map": model.label_map,
        "feature_mean": None if model.feature_mean is None else _floats(model.feature_mean),
        "feature_std": None if model.feature_std is None else _floats(model.feature_std),
        "provenance": model.provenance,
        "layers": [_layer_to_dict(layer) for layer in model.layers],
    }


def _arr(values, name, shape=None) -> np.ndarray:
    try:
        a = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise ModelFileError(f"field {name!r} is not numeric") from None
    if shape is not None and a.shape != shape:
        raise ModelFileError(f"field {name!r} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ModelFileError(f"field {name!r} has non-finite entries")
    return a


def _layer_from_dict(d: dict, i: int) -> FrozenLayer:
    try:
        d_in, d_out = int(d["d_in"]), int(d["d_out"])
        bits = _arr(d["weight_bits"], f"layers[{i}].weight_bits", (d_out,))
        bias = _arr(d["bias"], f"layers[{i}].bias", (d_out,))
        if "weights" in d:
            if not np.all(bits == FP_BITS):
                raise ModelFileError(f"layers[{i}]: raw weights require {FP_BITS:g}-bit neurons")
            codes = _arr(d["weights"], f"layers[{i}].weights", (d_out, d_in)).T.copy()
            scales = np.ones(d_out)
        else:
            codes = _arr(d["codes"], f"layers[{i}].codes", (d_out, d_in)).T.copy()
            scales = _arr(d["scales"], f"layers[{i}].scales", (d_out,))
        act_bits = alpha = None
        if d.get("act_bits") is not None:
            act_bits = _arr(d["act_bits"], f"layers[{i}].act_bits", (d_out,))
            alpha = _arr(d["alpha"], f"layers[{i}].alpha", (d_out,))
        return FrozenLayer(bits, scales, codes, bias, d["nonlinearity"], act_bits, alpha)
    except KeyError as exc:
        raise ModelFileError(f"layers[{i}] is missing field {exc.args[0]!r}") from None


def model_from_dict(d: dict) -> FrozenModel:
    if d.get("format") != FORMAT:
        raise ModelFileError("not a frozen model file")
    if d.get("version") != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model file version {d.get('version')!r} "
                             f"(this build reads version {FORMAT_VERSION})")
    layers = [_layer_from_dict(ld, i) for i, ld in enumerate(d["layers"])]
    for a, b in zip(layers, layers[1:]):
        if a.d_out != b.d_in:
            raise ModelFileError("layer dimensions do not chain")
    mean = None if d.get("feature_mean") is None else _arr(d["feature_mean"], "feature_mean")
    std = None if d.get("feature_std") is None else _arr(d["feature_std"], "feature_std")
    return FrozenModel(layers, task=d["task"], mode=d["mode"], n_classes=d.get("n_classes"),
                       feature_mean=mean, feature_std=std, label_map=d.get("label_map"),
                       provenance=d.get("provenance") or {})


def dumps_model(model: FrozenModel) -> str:
    return dumps_json(model_to_dict(model))


def save_model(model: FrozenModel, path) -> None:
    atomic_write_text(path, dumps_model(model))


def load_model(path) -> FrozenModel:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: malformed model file ({exc})") from None
    return model_from_dict(d)
