"""Quantized dense layers, the MLP, and its hand-written backward pass.

Forward passes are always hard: each neuron's weight column is quantized at
the bit-width its strength currently selects, and (when enabled) its hidden
activation is clipped to ``[0, alpha]`` and quantized likewise.  The
backward pass uses

* a straight-through estimator for weights (``dQ(w)/dw = 1``),
* a straight-through estimator for activations inside ``[0, alpha]``,
* the gate-weighted mixture of all candidate quantizations for strengths,
* the clip indicator ``1[z > alpha]`` for ``alpha``.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gates
from .gates import ThresholdLadder
from .quantizers import _activation_codes, quantize_weight_matrix, weight_codes

FP_BITS = 32.0
NONLINEARITIES = ("relu", "identity")
ALPHA_FALLBACK = 6.0
ALPHA_PERCENTILE = 95.0
ALPHA_MIN = 1e-3


class StaleTraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantMode:
    """Which quantization regime a model trains under.

    ``kind`` is ``"full_precision"``, ``"uniform"`` or ``"nmp"``.  Uniform
    modes pin every neuron to ``weight_bits`` (and ``act_bits`` when given);
    NMP modes learn per-neuron bit-widths from the ladders.
    """

    kind: str = "nmp"
    weight_bits: Optional[float] = None
    act_bits: Optional[int] = None
    quantize_activations: bool = False
    weight_thresholds: tuple = gates.DEFAULT_WEIGHT_THRESHOLDS
    weight_candidates: tuple = gates.DEFAULT_WEIGHT_CANDIDATES
    act_thresholds: tuple = gates.DEFAULT_ACT_THRESHOLDS
    act_candidates: tuple = gates.DEFAULT_ACT_CANDIDATES
    act_init_bits: float = 4
    tau: float = gates.DEFAULT_TAU

    def __post_init__(self):
        if self.kind not in ("full_precision", "uniform", "nmp"):
            raise ValueError(f"unknown quant mode kind {self.kind!r}")
        if self.kind == "uniform" and self.weight_bits is None:
            raise ValueError("uniform mode needs weight_bits")
        # build ladders eagerly so bad thresholds fail at construction
        self.weight_ladder()
        self.act_ladder()

    @classmethod
    def full_precision(cls):
        return cls(kind="full_precision")

    @classmethod
    def uniform(cls, weight_bits, act_bits=None, **kw):
        return cls(kind="uniform", weight_bits=weight_bits, act_bits=act_bits, **kw)

    @classmethod
    def nmp(cls, quantize_activations=False, **kw):
        return cls(kind="nmp", quantize_activations=quantize_activations, **kw)

    @classmethod
    def parse(cls, text: str, **kw) -> "QuantMode":
        """Parse ``full_precision``, ``nmp_weights_only``, ``nmp_weights_acts``,
        ``uniform(4)`` or ``uniform(1,a4)``."""
        text = text.strip()
        if text in ("full_precision", "fp"):
            return cls.full_precision()
        if text in ("nmp_weights_only", "nmp_w"):
            return cls.nmp(False, **kw)
        if text in ("nmp_weights_acts", "nmp_wa"):
            return cls.nmp(True, **kw)
        m = re.fullmatch(r"uniform\(\s*([0-9.]+)\s*(?:,\s*a\s*([0-9]+)\s*)?\)", text)
        if m:
            wb = float(m.group(1))
            wb = int(wb) if wb.is_integer() else wb
            ab = int(m.group(2)) if m.group(2) else None
            return cls.uniform(wb, ab, **{k: v for k, v in kw.items() if k == "tau"})
        raise ValueError(f"cannot parse quant mode {text!r}")

    @property
    def name(self) -> str:
        if self.kind == "full_precision":
            return "full_precision"
        if self.kind == "nmp":
            return "nmp_weights_acts" if self.quantize_activations else "nmp_weights_only"
        wb = self.weight_bits
        wb = int(wb) if float(wb).is_integer() else wb
        return f"uniform({wb})" if self.act_bits is None else f"uniform({wb},a{self.act_bits})"

    @property
    def quantizes_activations(self) -> bool:
        if self.kind == "nmp":
            return self.quantize_activations
        return self.kind == "uniform" and self.act_bits is not None

    def weight_ladder(self) -> Optional[ThresholdLadder]:
        if self.kind == "full_precision":
            return None
        if self.kind == "uniform":
            return ThresholdLadder.fixed(self.weight_bits, self.tau)
        return ThresholdLadder(tuple(self.weight_thresholds), tuple(self.weight_candidates), self.tau)

    def act_ladder(self) -> Optional[ThresholdLadder]:
        if not self.quantizes_activations:
            return None
        if self.kind == "uniform":
            return ThresholdLadder.fixed(self.act_bits, self.tau)
        return ThresholdLadder(tuple(self.act_thresholds), tuple(self.act_candidates), self.tau)


@dataclass
class LayerTrace:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w_bits: Optional[np.ndarray]
    w_q: np.ndarray
    a_bits: Optional[np.ndarray]
    version: int


@dataclass
class ForwardTrace:
    layers: list
    batch_size: int


def _nonlin(y: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(y, 0.0) if kind == "relu" else y


def dense_forward(x, w_q, bias, nonlinearity, a_bits=None, alpha=None):
    """Shared forward kernel for live and frozen layers.

    Returns ``(y, z, out)``: pre-activation, post-nonlinearity, layer output.
    """
    y = x @ w_q + bias
    z = _nonlin(y, nonlinearity)
    if a_bits is None:
        return y, z, z
    codes, step = _activation_codes(z, 2.0**a_bits - 1.0, alpha)
    return y, z, codes * step


class QuantDenseLayer:
    """Dense layer with per-neuron weight (and optional activation) precision."""

    def __init__(self, W, bias, nonlinearity="relu", weight_ladder=None, act_ladder=None,
                 weight_strengths=None, act_strengths=None, alpha=None, act_init_bits=4):
        if nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")
        self.W = np.array(W, dtype=np.float64)
        d_out = self.W.shape[1]
        self.bias = np.array(bias, dtype=np.float64).reshape(d_out)
        self.nonlinearity = nonlinearity
        self.weight_ladder = weight_ladder
        self.act_ladder = act_ladder
        if weight_ladder is not None and weight_strengths is None:
            weight_strengths = gates.initial_strengths(d_out, weight_ladder)
        self.s = None if weight_strengths is None else np.array(weight_strengths, dtype=np.float64)
        if act_ladder is not None:
            if act_strengths is None:
                init = act_init_bits if float(act_init_bits) in act_ladder.candidates else None
                act_strengths = gates.initial_strengths(d_out, act_ladder, init)
            if alpha is None:
                alpha = np.full(d_out, ALPHA_FALLBACK)
            self.s_act = np.array(act_strengths, dtype=np.float64)
            self.alpha = np.array(alpha, dtype=np.float64)
        else:
            if act_strengths is not None or alpha is not None:
                raise ValueError("activation strengths/alpha given without an activation ladder")
            self.s_act = None
            self.alpha = None
        self.version = 0

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def weight_bits(self) -> np.ndarray:
        if self.weight_ladder is None:
            return np.full(self.d_out, FP_BITS)
        return np.asarray(gates.hard_bits(self.s, self.weight_ladder), dtype=np.float64).reshape(-1)

    def act_bits(self) -> Optional[np.ndarray]:
        if self.act_ladder is None:
            return None
        return np.asarray(gates.hard_bits(self.s_act, self.act_ladder), dtype=np.float64).reshape(-1)

    def quantized_weights(self, bits=None):
        """``(W_q, codes, scales)`` under the current hard assignment."""
        if self.weight_ladder is None:
            return self.W, self.W, np.ones(self.d_out)
        codes, scale = weight_codes(self.W, self.weight_bits() if bits is None else bits)
        return codes * scale, codes, scale

    def params(self) -> dict:
        p = {"W": self.W, "bias": self.bias}
        if self.s is not None and self.weight_ladder.n_bands > 1:
            p["s"] = self.s
        if self.act_ladder is not None:
            if self.act_ladder.n_bands > 1:
                p["s_act"] = self.s_act
            p["alpha"] = self.alpha
        return p

    def forward(self, x):
        w_bits = None if self.weight_ladder is None else self.weight_bits()
        w_q = self.quantized_weights(w_bits)[0]
        a_bits = self.act_bits()
        y, z, out = dense_forward(x, w_q, self.bias, self.nonlinearity, a_bits, self.alpha)
        return out, LayerTrace(x, y, z, w_bits, w_q, a_bits, self.version)

    def backward(self, tr: LayerTrace, grad_out: np.ndarray):
        if tr.version != self.version:
            raise StaleTraceError("trace was recorded before the last parameter update")
        if grad_out.shape != tr.z.shape:
            raise StaleTraceError(f"gradient shape {grad_out.shape} != output shape {tr.z.shape}")
        grads = {}
        dz = grad_out
        if self.act_ladder is not None:
            z = tr.z
            above = z > self.alpha
            grads["alpha"] = (grad_out * above).sum(axis=0)
            dz = grad_out * ((z >= 0.0) & ~above)
            if self.act_ladder.n_bands > 1:
                dg = gates.gate_gradients(self.s_act, self.act_ladder)
                ds = np.zeros(self.d_out)
                for k, b in enumerate(self.act_ladder.candidates):
                    codes, step = _activation_codes(z, 2.0**b - 1.0, self.alpha)
                    ds += dg[:, k] * step * (grad_out * codes).sum(axis=0)
                grads["s_act"] = ds
        dy = dz * (tr.y > 0.0) if self.nonlinearity == "relu" else dz
        dW = tr.x.T @ dy
        grads["W"] = dW
        grads["bias"] = dy.sum(axis=0)
        if self.weight_ladder is not None and self.weight_ladder.n_bands > 1:
            dg = gates.gate_gradients(self.s, self.weight_ladder)
            ds = np.zeros(self.d_out)
            for k, b in enumerate(self.weight_ladder.candidates):
                qk = quantize_weight_matrix(self.W, b)
                ds += dg[:, k] * (dW * qk).sum(axis=0)
            grads["s"] = ds
        dx = dy @ tr.w_q.T
        return dx, grads

    def clamp(self) -> None:
        if self.s is not None:
            np.clip(self.s, 0.0, 1.0, out=self.s)
        if self.s_act is not None:
            np.clip(self.s_act, 0.0, 1.0, out=self.s_act)
            np.maximum(self.alpha, ALPHA_MIN, out=self.alpha)

    def freeze(self) -> "FrozenLayer":
        w_q, codes, scales = self.quantized_weights()
        return FrozenLayer(
            weight_bits=self.weight_bits(),
            scales=np.array(scales, dtype=np.float64),
            codes=np.array(codes, dtype=np.float64),
            bias=self.bias.copy(),
            nonlinearity=self.nonlinearity,
            act_bits=self.act_bits(),
            alpha=None if self.alpha is None else self.alpha.copy(),
        )


def kaiming_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class MlpModel:
    """Stack of ``QuantDenseLayer``; the head is linear and never activation-quantized."""

    def __init__(self, layers, task="regression", mode: QuantMode | None = None, n_classes=None):
        if task not in ("regression", "classification"):
            raise ValueError(f"unknown task {task!r}")
        self.layers = list(layers)
        self.task = task
        self.mode = mode or QuantMode.full_precision()
        self.n_classes = n_classes
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError("consecutive layer dimensions do not chain")
        head = self.layers[-1]
        if head.nonlinearity != "identity" or head.act_ladder is not None:
            raise ValueError("last layer must be linear with unquantized outputs")

    @classmethod
    def build(cls, n_inputs, hidden_sizes, n_outputs, task="regression",
              mode: QuantMode | None = None, rng=None, n_classes=None):
        mode = mode or QuantMode.full_precision()
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [n_inputs, *hidden_sizes, n_outputs]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(QuantDenseLayer(
                kaiming_uniform(rng, d_in, d_out), np.zeros(d_out),
                nonlinearity="identity" if last else "relu",
                weight_ladder=mode.weight_ladder(),
                act_ladder=None if last else mode.act_ladder(),
                act_init_bits=mode.act_init_bits,
            ))
        return cls(layers, task, mode, n_classes)

    @property
    def n_inputs(self) -> int:
        return self.layers[0].d_in

    def init_alpha(self, x: np.ndarray) -> None:
        """Set each clip range to the 95th percentile of its activations on ``x``."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            if layer.act_ladder is not None:
                z = _nonlin(h @ layer.quantized_weights()[0] + layer.bias, layer.nonlinearity)
                a = np.percentile(z, ALPHA_PERCENTILE, axis=0)
                layer.alpha[:] = np.where(np.isfinite(a) & (a > ALPHA_MIN), a, ALPHA_FALLBACK)
            h = layer.forward(h)[0]

    def forward(self, x, train=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ValueError(f"expected input with {self.n_inputs} columns, got shape {x.shape}")
        traces = []
        h = x
        for layer in self.layers:
            h, tr = layer.forward(h)
            traces.append(tr)
        return h, (ForwardTrace(traces, x.shape[0]) if train else None)

    def predict_raw(self, x) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def backward(self, trace: ForwardTrace, output_grad):
        if len(trace.layers) != len(self.layers):
            raise StaleTraceError("trace layer count does not match model")
        g = np.asarray(output_grad, dtype=np.float64)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(trace.layers[i], g)
        return grads

    def input_gradient(self, trace, output_grad):
        g = np.asarray(output_grad, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            g, _ = self.layers[i].backward(trace.layers[i], g)
        return g

    def sgd_step(self, grads, lr: float) -> None:
        for layer, g in zip(self.layers, grads):
            for name, p in layer.params().items():
                p -= lr * g[name]
            layer.clamp()
            layer.version += 1

    def weight_bits(self) -> list:
        return [layer.weight_bits() for layer in self.layers]

    def act_bits(self) -> list:
        return [layer.act_bits() for layer in self.layers]

    def get_state(self) -> list:
        return [{k: v.copy() for k, v in layer.params().items()} for layer in self.layers]

    def set_state(self, state) -> None:
        for layer, st in zip(self.layers, state):
            for name, p in layer.params().items():
                p[...] = st[name]
            layer.version += 1

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def freeze(self, **meta) -> "FrozenModel":
        return FrozenModel([layer.freeze() for layer in self.layers], task=self.task,
                           mode=self.mode.name, n_classes=self.n_classes, **meta)


@dataclass
class FrozenLayer:
    weight_bits: np.ndarray
    scales: np.ndarray
    codes: np.ndarray
    bias: np.ndarray
    nonlinearity: str
    act_bits: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    @property
    def d_in(self) -> int:
        return self.codes.shape[0]

    @property
    def d_out(self) -> int:
        return self.codes.shape[1]

    @property
    def full_precision(self) -> bool:
        return bool(np.all(self.weight_bits == FP_BITS))

    def weights(self) -> np.ndarray:
        return self.codes * self.scales

    def forward(self, x):
        return dense_forward(x, self.weights(), self.bias, self.nonlinearity,
                             self.act_bits, self.alpha)[2]


@dataclass
class FrozenModel:
    """Static mixed-precision inference model: integer codes plus per-neuron scales."""

    layers: list
    task: str = "regression"
    mode: str = "full_precision"
    n_classes: Optional[int] = None
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None
    label_map: Optional[list] = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        return self.layers[0].d_in

    def predict_raw(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, found {h.shape[-1]}")
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def preprocess(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.feature_mean is None:
            return x
        if x.shape[1] != self.feature_mean.shape[0]:
            raise ValueError(f"expected {self.feature_mean.shape[0]} features, found {x.shape[1]}")
        # same arithmetic as data.standardize: constant features pass through
        constant = self.feature_std == 0
        return np.where(constant, x, (x - self.feature_mean) / np.where(constant, 1.0, self.feature_std))
