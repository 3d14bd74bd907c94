"""Bit/memory reports, quantization-error bounds and gradient checking."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import gates
from .model import FP_BITS, FrozenModel, MlpModel, _nonlin
from .quantizers import (activation_codes, quantize_weight_matrix, symmetric_codes,
                         weight_codes)
from .training import loss as task_loss

SCALE_BITS = 32
BIAS_BITS = 32
FP_ACT_BITS = 32
PARAM_CLASSES = ("W", "bias", "s", "s_act", "alpha")


# ---------------------------------------------------------------------------
# bit and memory reporting
# ---------------------------------------------------------------------------

def _hist(bits) -> dict:
    vals, counts = np.unique(np.asarray(bits, dtype=np.float64), return_counts=True)
    return {float(v): int(c) for v, c in zip(vals, counts)}


@dataclass
class BitReport:
    weight_hist: list
    act_hist: list
    mean_weight_bits: float
    weighted_mean_weight_bits: float
    mean_act_bits: Optional[float]
    neurons_per_layer: list

    def weight_fractions(self, candidates: Sequence[float]) -> list:
        return [[h.get(float(c), 0) / n for c in candidates]
                for h, n in zip(self.weight_hist, self.neurons_per_layer)]

    def act_fractions(self, candidates: Sequence[float]) -> list:
        return [None if h is None else [h.get(float(c), 0) / n for c in candidates]
                for h, n in zip(self.act_hist, self.neurons_per_layer)]

    def to_dict(self) -> dict:
        def keys(h):
            return None if h is None else {repr(k): v for k, v in h.items()}
        return {
            "weight_hist": [keys(h) for h in self.weight_hist],
            "act_hist": [keys(h) for h in self.act_hist],
            "mean_weight_bits": self.mean_weight_bits,
            "weighted_mean_weight_bits": self.weighted_mean_weight_bits,
            "mean_act_bits": self.mean_act_bits,
            "neurons_per_layer": self.neurons_per_layer,
        }


def bit_report(frozen: FrozenModel) -> BitReport:
    """Per-layer histograms plus unweighted and fan-in-weighted mean bits."""
    w_bits = [layer.weight_bits for layer in frozen.layers]
    fan_in = np.concatenate([np.full(layer.d_out, layer.d_in) for layer in frozen.layers])
    all_w = np.concatenate(w_bits)
    acts = [layer.act_bits for layer in frozen.layers if layer.act_bits is not None]
    return BitReport(
        weight_hist=[_hist(b) for b in w_bits],
        act_hist=[None if layer.act_bits is None else _hist(layer.act_bits)
                  for layer in frozen.layers],
        mean_weight_bits=float(all_w.mean()),
        weighted_mean_weight_bits=float(np.sum(fan_in * all_w) / np.sum(fan_in)),
        mean_act_bits=float(np.concatenate(acts).mean()) if acts else None,
        neurons_per_layer=[layer.d_out for layer in frozen.layers],
    )


@dataclass
class MemoryFootprint:
    weight_bits_total: float
    scale_overhead_bits: int
    bias_bits: int
    activation_bits_per_sample: float
    batch_size: int
    weight_bytes: int = 0
    scale_bytes: int = 0
    bias_bytes: int = 0
    activation_bytes: int = 0
    total_bytes: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def memory_bytes(frozen: FrozenModel, batch_size: int = 1) -> MemoryFootprint:
    """Theoretical storage: packed weights, one 32-bit scale and bias per neuron,
    and hidden activations for ``batch_size`` samples.

    Full-precision layers carry no scales.  Unquantized hidden activations
    are counted at 32 bits so quantized and float models stay comparable.
    """
    w_bits = 0.0
    scale_bits = 0
    bias_bits = 0
    act_bits = 0.0
    for i, layer in enumerate(frozen.layers):
        w_bits += float(np.sum(layer.d_in * layer.weight_bits))
        if not layer.full_precision:
            scale_bits += SCALE_BITS * layer.d_out
        bias_bits += BIAS_BITS * layer.d_out
        if i < len(frozen.layers) - 1:
            act_bits += (float(np.sum(layer.act_bits)) if layer.act_bits is not None
                         else FP_ACT_BITS * layer.d_out)
    fp = MemoryFootprint(w_bits, scale_bits, bias_bits, act_bits, batch_size)
    fp.weight_bytes = math.ceil(w_bits / 8)
    fp.scale_bytes = math.ceil(scale_bits / 8)
    fp.bias_bytes = math.ceil(bias_bits / 8)
    fp.activation_bytes = math.ceil(batch_size * act_bits / 8)
    fp.total_bytes = fp.weight_bytes + fp.scale_bytes + fp.bias_bytes + fp.activation_bytes
    return fp


# ---------------------------------------------------------------------------
# quantization-error model and loss-gap bound
# ---------------------------------------------------------------------------

def epsilon_bound(sigma2, bits):
    """Per-neuron mean-squared quantization error model ``sigma2 / (3 * 4**bits)``."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    if np.any(sigma2 < 0) or np.any(bits < 1):
        raise ValueError("need sigma2 >= 0 and bits >= 1")
    out = sigma2 / (3.0 * 4.0**bits)
    return float(out) if out.ndim == 0 else out


@dataclass
class RhoBound:
    rho: float
    empirical: float


def rho_from_columns(reference_weights: Sequence[np.ndarray], bits: Sequence[np.ndarray]) -> float:
    total = 0.0
    for w, b in zip(reference_weights, bits):
        w = np.asarray(w, dtype=np.float64)
        sigma2 = w.var(axis=0)
        total += float(np.sum(w.shape[0] * epsilon_bound(sigma2, b)))
    return math.sqrt(total)


def rho_bound(frozen: FrozenModel, reference_weights: Sequence[np.ndarray]) -> RhoBound:
    """``sqrt(sum_j d_in * eps_j(b_j))`` from reference-weight variances, next to
    the measured ``||W_q - W_ref||_F`` over all layers."""
    if len(reference_weights) != len(frozen.layers):
        raise ValueError("one reference matrix per layer is required")
    emp = 0.0
    for layer, w in zip(frozen.layers, reference_weights):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != layer.codes.shape:
            raise ValueError(f"reference shape {w.shape} != layer shape {layer.codes.shape}")
        emp += float(np.sum((layer.weights() - w) ** 2))
    rho = rho_from_columns(reference_weights, [layer.weight_bits for layer in frozen.layers])
    return RhoBound(rho, math.sqrt(emp))


@dataclass
class RidgeProblem:
    """``0.5/n ||X w - y||^2 + 0.5 * lam * ||w||^2`` with one column per output neuron."""

    X: np.ndarray
    Y: np.ndarray
    lam: float = 0.1

    @classmethod
    def random(cls, rng, d, n_outputs=1, n=None, lam=None):
        n = n or 4 * d
        X = rng.standard_normal((n, d))
        Y = X @ rng.standard_normal((d, n_outputs)) + 0.1 * rng.standard_normal((n, n_outputs))
        return cls(X, Y, float(rng.uniform(0.01, 1.0)) if lam is None else lam)

    def loss(self, W) -> float:
        R = self.X @ W - self.Y
        return 0.5 * float(np.sum(R * R)) / self.X.shape[0] + 0.5 * self.lam * float(np.sum(W * W))

    def grad(self, W) -> np.ndarray:
        return self.X.T @ (self.X @ W - self.Y) / self.X.shape[0] + self.lam * W

    def hessian(self) -> np.ndarray:
        d = self.X.shape[1]
        return self.X.T @ self.X / self.X.shape[0] + self.lam * np.eye(d)

    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian())[-1])

    def optimum(self) -> np.ndarray:
        return np.linalg.solve(self.hessian(), self.X.T @ self.Y / self.X.shape[0])


@dataclass
class LossGapResult:
    gap: float
    bound: float
    holds: bool


def loss_gap_check(problem: RidgeProblem, frozen_W, optimal_W, smoothness_L: float,
                   grad_tol: float = 1e-6) -> LossGapResult:
    """Check ``L(W_q) - L(W*) <= (L/2) ||W_q - W*||_F^2`` at a verified optimum."""
    W_star = np.asarray(optimal_W, dtype=np.float64)
    W_q = np.asarray(frozen_W, dtype=np.float64)
    gnorm = float(np.linalg.norm(problem.grad(W_star)))
    if gnorm > grad_tol:
        raise ValueError(f"reference is not optimal: gradient norm {gnorm:.3e}")
    gap = problem.loss(W_q) - problem.loss(W_star)
    bound = 0.5 * smoothness_L * float(np.sum((W_q - W_star) ** 2))
    return LossGapResult(gap, bound, gap <= bound + 1e-9)


def loss_gap_trials(n_trials=100, seed=0, max_dim=10, bit_choices=(1, 2, 4, 8)) -> list:
    """Random ridge instances, each optimum quantized at random per-neuron bits."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trials):
        d = int(rng.integers(2, max_dim + 1))
        m = int(rng.integers(1, 4))
        prob = RidgeProblem.random(rng, d, m)
        W_star = prob.optimum()
        bits = rng.choice(bit_choices, size=m)
        W_q = quantize_weight_matrix(W_star, bits)
        out.append(loss_gap_check(prob, W_q, W_star, prob.smoothness()))
    return out


@dataclass
class BitBudget:
    bits: float
    saturated: bool
    rho: float
    target: float


def bit_budget(epsilon_tolerance, smoothness_L, sigma2_per_neuron, fan_in,
               candidates=(1, 2, 4, 8, 16)) -> BitBudget:
    """Smallest uniform bit-width whose modelled perturbation meets ``sqrt(2 eps / L)``."""
    if epsilon_tolerance <= 0 or smoothness_L <= 0:
        raise ValueError("tolerance and smoothness must be positive")
    sigma2 = np.asarray(sigma2_per_neuron, dtype=np.float64)
    fan_in = np.broadcast_to(np.asarray(fan_in, dtype=np.float64), sigma2.shape)
    target = math.sqrt(2.0 * epsilon_tolerance / smoothness_L)
    rho = math.inf
    for b in candidates:
        rho = math.sqrt(float(np.sum(fan_in * epsilon_bound(sigma2, b))))
        if rho <= target:
            return BitBudget(float(b), False, rho, target)
    return BitBudget(float(candidates[-1]), True, rho, target)


# ---------------------------------------------------------------------------
# Monte Carlo quantizer error
# ---------------------------------------------------------------------------

@dataclass
class QuantizerMse:
    bits: int
    mse: float
    predicted: float

    @property
    def rel_error(self) -> float:
        return abs(self.mse - self.predicted) / self.predicted


def uniform_quantizer_mse(bits: int, n_samples=10**6, seed=0, half_range=1.0) -> QuantizerMse:
    """MSE of the symmetric weight grid on inputs uniform over its range vs ``step**2 / 12``."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(-half_range, half_range, size=(n_samples, 1))
    codes, scale = symmetric_codes(w, bits)
    err = codes * scale - w
    return QuantizerMse(bits, float(np.mean(err**2)), float(scale[0] ** 2 / 12.0))


# ---------------------------------------------------------------------------
# convergence diagnostic
# ---------------------------------------------------------------------------

def stationarity_trend(grad_sq: Sequence[float]) -> dict:
    """Fit the running mean of squared gradient norms against epoch count.

    Reports the log-log slope (negative means decay; -0.5 is the
    inverse-square-root rate) and the least-squares coefficient on
    ``1/sqrt(t)``.
    """
    g = np.asarray(grad_sq, dtype=np.float64)
    if g.size < 3:
        return {"slope_loglog": float("nan"), "coef_inv_sqrt": float("nan"), "decaying": False}
    t = np.arange(1, g.size + 1, dtype=np.float64)
    running = np.cumsum(g) / t
    slope = float(np.polyfit(np.log(t), np.log(running), 1)[0])
    A = np.column_stack([np.ones_like(t), 1.0 / np.sqrt(t)])
    coef = float(np.linalg.lstsq(A, running, rcond=None)[0][1])
    decaying = slope < 0
    if not decaying:
        warnings.warn(f"running squared-gradient mean is not decaying (slope {slope:.3f})")
    return {"slope_loglog": slope, "coef_inv_sqrt": coef, "decaying": decaying}


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _base_cache(model: MlpModel, x):
    """Hard forward at the current parameters, keeping what the surrogate needs."""
    cache = []
    h = x
    for layer in model.layers:
        w_bits = layer.weight_bits()
        entry = {"w_hard": layer.quantized_weights(None if layer.weight_ladder is None else w_bits)[0]}
        if layer.weight_ladder is not None:
            entry["w_cands"] = [quantize_weight_matrix(layer.W, b) for b in layer.weight_ladder.candidates]
        y = h @ entry["w_hard"] + layer.bias
        z = _nonlin(y, layer.nonlinearity)
        out = z
        if layer.act_ladder is not None:
            zc = np.minimum(np.maximum(z, 0.0), layer.alpha)
            codes, step = activation_codes(z, layer.act_bits(), layer.alpha)
            out = codes * step
            entry["zc"] = zc
            entry["z_hard"] = out
            entry["a_cands"] = [np.multiply(*activation_codes(z, b, layer.alpha))
                                for b in layer.act_ladder.candidates]
        entry["relu"] = y > 0
        entry["above"] = z > layer.alpha if layer.alpha is not None else None
        cache.append(entry)
        h = out
    return cache


EXT = np.longdouble  # extended precision keeps finite-difference round-off far below 1e-7


def _gates_ext(s, ladder) -> np.ndarray:
    """Telescoping logistic gates evaluated in extended precision."""
    s = np.asarray(s, dtype=EXT)[..., None]
    t = np.asarray(ladder.thresholds, dtype=EXT)
    steps = 1 / (1 + np.exp(-(s - t) / EXT(ladder.tau)))
    ones = np.ones(steps.shape[:-1] + (1,), dtype=EXT)
    return np.concatenate([ones, steps], axis=-1) - np.concatenate([steps, 0 * ones], axis=-1)


def _loss_ext(out, y, task):
    if task == "regression":
        d = out - np.asarray(y, dtype=EXT).reshape(out.shape)
        return np.mean(d * d)
    idx = np.asarray(y).astype(np.int64).reshape(-1)
    m = out.max(axis=1, keepdims=True)
    lse = np.log(np.exp(out - m).sum(axis=1)) + m[:, 0]
    return np.mean(lse - out[np.arange(out.shape[0]), idx])


def surrogate_loss(model: MlpModel, base: list, params: list, x, y) -> tuple[float, bool]:
    """Loss of the straight-through/soft-gate surrogate around a base point.

    Every quantizer output is its hard value at the base point plus
    first-order terms: weights and in-range activations pass perturbations
    straight through, and strength perturbations move the output along the
    gate-weighted mixture of candidate quantizations.  Evaluated in extended
    precision.  Returns the loss and whether any ReLU or clip kink changed
    side relative to the base point.
    """
    h = np.asarray(x, dtype=EXT)
    kink = False
    for layer, entry, p in zip(model.layers, base, params):
        w_eff = entry["w_hard"].astype(EXT) + (p["W"] - layer.W)
        if "s" in p:
            dg = _gates_ext(p["s"], layer.weight_ladder) - _gates_ext(layer.s, layer.weight_ladder)
            for k, qk in enumerate(entry["w_cands"]):
                w_eff = w_eff + dg[:, k] * qk
        yv = h @ w_eff + p["bias"]
        z = np.maximum(yv, 0) if layer.nonlinearity == "relu" else yv
        if layer.nonlinearity == "relu":
            kink |= bool(np.any((yv > 0) != entry["relu"]))
        if layer.act_ladder is not None:
            alpha = p["alpha"]
            kink |= bool(np.any((z > alpha) != entry["above"]))
            zc = np.minimum(np.maximum(z, 0), alpha)
            out = entry["z_hard"] + (zc - entry["zc"])
            if "s_act" in p:
                dg = _gates_ext(p["s_act"], layer.act_ladder) - _gates_ext(layer.s_act, layer.act_ladder)
                for k, qk in enumerate(entry["a_cands"]):
                    out = out + dg[:, k] * qk
            z = out
        h = z
    return _loss_ext(h, y, model.task), kink


@dataclass
class ClassReport:
    max_rel_error: float = 0.0
    checked: int = 0
    excluded: int = 0
    below_floor: int = 0
    notes: list = field(default_factory=list)


def gradient_check(model: MlpModel, x, y, step=1e-4, abs_floor=1e-6,
                   threshold_margin: Optional[float] = None) -> dict:
    """Compare ``model.backward`` with finite differences of the surrogate loss.

    Uses the fourth-order central stencil at ``+-step`` and ``+-2 step``.  A
    scalar is excluded as a non-smooth point when any of those perturbations
    flips a ReLU or clip indicator, or (for strengths) when it lies within
    ``threshold_margin`` of a ladder threshold (default ``10 * step``).
    Entries where both gradients are at most ``abs_floor`` are counted but
    not scored.  Returns ``{class: ClassReport}``.
    """
    x = np.asarray(x, dtype=np.float64)
    margin = 10 * step if threshold_margin is None else threshold_margin
    out, trace = model.forward(x)
    _, g_out = task_loss(out, y, model.task)
    analytic = model.backward(trace, g_out)
    base = _base_cache(model, x)
    params = [{k: v.astype(EXT) for k, v in layer.params().items()} for layer in model.layers]
    h = EXT(step)
    report = {c: ClassReport() for c in PARAM_CLASSES}
    for li, layer in enumerate(model.layers):
        for name, arr in params[li].items():
            rep = report[name]
            ladder = {"s": layer.weight_ladder, "s_act": layer.act_ladder}.get(name)
            for idx in np.ndindex(arr.shape):
                note = f"layer {li} {name}{list(idx)}: excluded: non-smooth point"
                if ladder is not None and gates.distance_to_thresholds(float(arr[idx]), ladder) <= margin:
                    rep.excluded += 1
                    rep.notes.append(note)
                    continue
                orig = arr[idx]
                f, kink = {}, False
                for m in (-2, -1, 1, 2):
                    arr[idx] = orig + m * h
                    f[m], k = surrogate_loss(model, base, params, x, y)
                    kink |= k
                arr[idx] = orig
                if kink:
                    rep.excluded += 1
                    rep.notes.append(note)
                    continue
                fd = float((f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h))
                a = float(analytic[li][name][idx])
                scale = max(abs(a), abs(fd))
                if scale <= abs_floor:
                    rep.below_floor += 1
                    continue
                rep.checked += 1
                rep.max_rel_error = max(rep.max_rel_error, abs(a - fd) / scale)
    return report
