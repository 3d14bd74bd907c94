"""Deterministic uniform fake-quantizers.

Weights use a signed symmetric grid with one scale per neuron (per column of
the ``d_in x d_out`` weight matrix).  Activations use an unsigned grid on
``[0, alpha]``.  Every quantizer is expressed as ``codes * scale`` so that
the frozen integer representation reproduces the training-time values
bit for bit.
"""

from __future__ import annotations

import numpy as np

TERNARY_BITS = 1.58
WEIGHT_BITS = (1, 2, 4, 8, 16)
ACT_BITS = (4, 8, 16)
TERNARY_THRESHOLD = 0.7


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero.

    ``|x| - floor(|x|)`` is exact in binary floating point, so the tie test
    does not suffer from the ``floor(x + 0.5)`` double-rounding problem.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    fl = np.floor(a)
    a -= fl
    fl += a >= 0.5
    np.copysign(fl, x, out=fl)
    fl += 0.0  # turns -0.0 into 0.0
    return fl


def _col_abs_sum(a: np.ndarray) -> np.ndarray:
    # one contiguous row per neuron: identical reduction order whether a
    # column is quantized alone or as part of a wider matrix
    return np.ascontiguousarray(a.T).sum(axis=1)


_ALLOWED_WEIGHT_BITS = frozenset(float(b) for b in WEIGHT_BITS + (TERNARY_BITS,))


def _validate_weight_bits(bits) -> None:
    values = (float(bits),) if np.ndim(bits) == 0 else np.unique(bits).tolist()
    for b in values:
        if b not in _ALLOWED_WEIGHT_BITS:
            raise ValueError(f"unsupported weight bit-width {b!r}")


def _codes_at(w, b):
    if b == 1:
        return binary_codes(w)
    if b == TERNARY_BITS:
        return ternary_codes(w)
    return symmetric_codes(w, int(b))


def symmetric_codes(w: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes and per-column scales of the ``bits``-bit symmetric grid.

    Works for any integer ``bits >= 2``; codes lie in ``[-qmax, qmax]`` with
    ``qmax = 2**(bits-1) - 1`` and ``scale = max|w| / qmax``.
    """
    w = np.asarray(w, dtype=np.float64)
    if bits < 2 or int(bits) != bits:
        raise ValueError(f"symmetric grid needs integer bits >= 2, got {bits}")
    qmax = float(2 ** (int(bits) - 1) - 1)
    max_abs = np.abs(w).max(axis=0) if w.size else np.zeros(w.shape[1])
    zero = max_abs == 0.0
    scale = np.where(zero, 1.0, max_abs / qmax)
    codes = np.minimum(np.maximum(round_half_away(w / scale), -qmax), qmax)
    codes[:, zero] = 0.0
    return codes, scale


def _exact_mean(total, n, a_max, a_min):
    # a floating sum of equal magnitudes can miss n * a by an ulp; when all
    # magnitudes agree the mean is known exactly (keeps re-quantization idempotent)
    return np.where(a_max == a_min, a_max, total / n)


def binary_codes(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    a = np.abs(w)
    scale = _exact_mean(_col_abs_sum(a), n, a.max(axis=0), a.min(axis=0))
    zero = scale == 0.0
    scale = np.where(zero, 1.0, scale)
    codes = np.where(w >= 0.0, 1.0, -1.0)
    codes[:, zero] = 0.0
    return codes, scale


def ternary_codes(w: np.ndarray, threshold_factor: float = TERNARY_THRESHOLD):
    if threshold_factor <= 0:
        raise ValueError("threshold_factor must be positive")
    w = np.asarray(w, dtype=np.float64)
    a = np.abs(w)
    delta = threshold_factor * _col_abs_sum(a) / w.shape[0]
    keep = a > delta
    n_keep = keep.sum(axis=0)
    kept = np.where(keep, a, 0.0)
    mu = _exact_mean(_col_abs_sum(kept), np.maximum(n_keep, 1), kept.max(axis=0),
                     np.where(keep, a, np.inf).min(axis=0))
    scale = np.where(n_keep == 0, 1.0, mu)
    codes = np.where(keep, np.where(w >= 0.0, 1.0, -1.0), 0.0)
    return codes, scale


def weight_codes(w: np.ndarray, bits) -> tuple[np.ndarray, np.ndarray]:
    """Codes and scales for a weight matrix with one bit-width per column.

    ``bits`` is a scalar or a vector of length ``w.shape[1]``; each entry is
    one of ``WEIGHT_BITS`` or ``TERNARY_BITS``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weight matrix must be 2-D")
    if np.ndim(bits) == 0:
        _validate_weight_bits(bits)
        return _codes_at(w, float(bits))
    bits = np.broadcast_to(np.asarray(bits, dtype=np.float64), (w.shape[1],))
    _validate_weight_bits(bits)
    first = bits[0]
    if np.all(bits == first):
        return _codes_at(w, float(first))
    codes = np.zeros_like(w)
    scale = np.ones(w.shape[1])
    for b in np.unique(bits):
        cols = np.flatnonzero(bits == b)
        codes[:, cols], scale[cols] = _codes_at(w[:, cols], float(b))
    return codes, scale


def quantize_weight_matrix(w: np.ndarray, bits) -> np.ndarray:
    codes, scale = weight_codes(w, bits)
    return codes * scale


def quantize_weights(column, bits) -> tuple[np.ndarray, float]:
    """Quantize one neuron's incoming weights; returns ``(values, scale)``."""
    col = np.asarray(column, dtype=np.float64).reshape(-1, 1)
    codes, scale = weight_codes(col, bits)
    return (codes * scale)[:, 0], float(scale[0])


def quantize_ternary(column, threshold_factor: float = TERNARY_THRESHOLD) -> np.ndarray:
    col = np.asarray(column, dtype=np.float64).reshape(-1, 1)
    codes, scale = ternary_codes(col, threshold_factor)
    return (codes * scale)[:, 0]


def _activation_codes(z, n_levels, alpha):
    step = alpha / n_levels
    codes = np.minimum(round_half_away(np.minimum(np.maximum(z, 0.0), alpha) / step), n_levels)
    return codes, step


def activation_codes(z, bits, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Codes and step sizes for unsigned activation quantization.

    ``bits`` and ``alpha`` broadcast against the last axis of ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    for b in np.unique(bits).tolist():
        if b not in ACT_BITS:
            raise ValueError(f"unsupported activation bit-width {b!r}")
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    return _activation_codes(z, 2.0**bits - 1.0, alpha)


def quantize_activation(z, bits, alpha) -> np.ndarray:
    codes, step = activation_codes(z, bits, alpha)
    return codes * step


def weight_levels(bits, scale: float) -> np.ndarray:
    """The level set induced by a weight quantizer at ``scale``."""
    if bits == 1:
        k = np.array([-1.0, 1.0])
    elif bits == TERNARY_BITS:
        k = np.array([-1.0, 0.0, 1.0])
    else:
        qmax = 2 ** (int(bits) - 1) - 1
        k = np.arange(-qmax, qmax + 1, dtype=np.float64)
    return k * scale


def activation_levels(bits: int, alpha: float) -> np.ndarray:
    n = 2**bits - 1
    return np.arange(n + 1, dtype=np.float64) * (alpha / n)


def nearest_level_oracle(x: float, levels) -> float:
    """Brute-force nearest level; ties go to the larger magnitude, then to +."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("levels must be non-empty")
    best = None
    for lv in levels:
        d = abs(x - lv)
        if best is None:
            best, best_d = lv, d
            continue
        if d < best_d or (d == best_d and (abs(lv) > abs(best) or (abs(lv) == abs(best) and lv > best))):
            best, best_d = lv, d
    return float(best)
