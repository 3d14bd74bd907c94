"""Threshold-ladder bit assignment and sigmoid soft gates.

A ladder partitions ``[0, 1]`` into ``K`` bands with cut-points
``0 < t_1 < ... < t_{K-1} < 1``.  The forward pass only ever uses the hard
band lookup; the soft gates exist so that a precision strength receives a
gradient in the backward pass.

Gate ``k`` is the difference of two logistic steps,
``g_k(s) = sigmoid((s - t_{k-1}) / tau) - sigmoid((s - t_k) / tau)``, with
``t_0 = -inf`` and ``t_K = +inf``.  The sum telescopes to exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_WEIGHT_THRESHOLDS = (0.25, 0.5, 0.75)
DEFAULT_WEIGHT_CANDIDATES = (1, 2, 4, 8)
DEFAULT_ACT_THRESHOLDS = (0.33, 0.66)
DEFAULT_ACT_CANDIDATES = (4, 8, 16)
DEFAULT_TAU = 0.05


@dataclass(frozen=True)
class ThresholdLadder:
    thresholds: tuple[float, ...]
    candidates: tuple[float, ...]
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        c = tuple(float(x) for x in self.candidates)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "candidates", c)
        if len(c) == 0:
            raise ValueError("ladder needs at least one candidate")
        if len(t) != len(c) - 1:
            raise ValueError(
                f"{len(c)} candidates need {len(c) - 1} thresholds, got {len(t)}")
        if any(not 0.0 < x < 1.0 for x in t) or any(a >= b for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly increasing in (0, 1): {t}")
        if any(a >= b for a, b in zip(c, c[1:])):
            raise ValueError(f"candidates must be strictly increasing: {c}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @classmethod
    def weights(cls, thresholds=DEFAULT_WEIGHT_THRESHOLDS,
                candidates=DEFAULT_WEIGHT_CANDIDATES, tau=DEFAULT_TAU):
        return cls(tuple(thresholds), tuple(candidates), tau)

    @classmethod
    def activations(cls, thresholds=DEFAULT_ACT_THRESHOLDS,
                    candidates=DEFAULT_ACT_CANDIDATES, tau=DEFAULT_TAU):
        return cls(tuple(thresholds), tuple(candidates), tau)

    @classmethod
    def fixed(cls, bits, tau=DEFAULT_TAU):
        """Single-band ladder that assigns ``bits`` everywhere."""
        return cls((), (bits,), tau)

    @property
    def n_bands(self) -> int:
        return len(self.candidates)

    def band_bounds(self, k: int) -> tuple[float, float]:
        edges = (0.0,) + self.thresholds + (1.0,)
        return edges[k], edges[k + 1]

    def band_midpoint(self, k: int) -> float:
        lo, hi = self.band_bounds(k)
        return 0.5 * (lo + hi)

    def band_of_bits(self, bits: float) -> int:
        try:
            return self.candidates.index(float(bits))
        except ValueError:
            raise ValueError(f"{bits} is not a candidate of {self.candidates}") from None


def _check_strength(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError("precision strength must lie in [0, 1]")
    return s


def band_index(s, ladder: ThresholdLadder) -> np.ndarray:
    """Band index per strength; a strength equal to ``t_k`` stays in band ``k-1``."""
    s = _check_strength(s)
    return np.searchsorted(np.asarray(ladder.thresholds), s, side="left")


def hard_bits(s, ladder: ThresholdLadder):
    idx = band_index(s, ladder)
    bits = np.asarray(ladder.candidates)[idx]
    return float(bits) if np.ndim(bits) == 0 else bits


def _logit_args(s, ladder):
    s = np.asarray(s, dtype=np.float64)[..., None]
    return (s - np.asarray(ladder.thresholds)) / ladder.tau


def soft_gates(s, ladder: ThresholdLadder) -> np.ndarray:
    """Gate weights over the ladder candidates, shape ``s.shape + (K,)``."""
    steps = expit(_logit_args(s, ladder))
    shape = steps.shape[:-1] + (1,)
    upper = np.concatenate([np.ones(shape), steps], axis=-1)
    lower = np.concatenate([steps, np.zeros(shape)], axis=-1)
    return upper - lower


def gate_gradients(s, ladder: ThresholdLadder) -> np.ndarray:
    """Derivative of ``soft_gates`` with respect to ``s``."""
    sig = expit(_logit_args(s, ladder))
    dsteps = sig * (1.0 - sig) / ladder.tau
    shape = dsteps.shape[:-1] + (1,)
    zero = np.zeros(shape)
    return np.concatenate([zero, dsteps], axis=-1) - np.concatenate([dsteps, zero], axis=-1)


def surrogate_mix(column, s: float, ladder: ThresholdLadder,
                  quantize: Callable[[np.ndarray, float], np.ndarray]) -> np.ndarray:
    """Gate-weighted mixture of the candidate quantizations of ``column``.

    Backward-pass construct only; ``quantize(column, bits)`` must return the
    quantized vector.
    """
    g = soft_gates(s, ladder)
    column = np.asarray(column, dtype=np.float64)
    out = np.zeros_like(column)
    for gk, b in zip(g, ladder.candidates):
        out = out + gk * quantize(column, b)
    return out


def initial_strengths(n: int, ladder: ThresholdLadder, bits: float | None = None) -> np.ndarray:
    """Strengths placed at the midpoint of the band for ``bits`` (lowest band by default)."""
    k = 0 if bits is None else ladder.band_of_bits(bits)
    return np.full(n, ladder.band_midpoint(k))


def distance_to_thresholds(s, ladder: ThresholdLadder) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not ladder.thresholds:
        return np.full(s.shape, np.inf)
    return np.min(np.abs(s[..., None] - np.asarray(ladder.thresholds)), axis=-1)


def ladder_from_config(thresholds: Sequence[float] | None, candidates: Sequence[float],
                       tau: float) -> ThresholdLadder:
    if thresholds is None:
        k = len(candidates)
        thresholds = tuple(i / k for i in range(1, k))
    return ThresholdLadder(tuple(thresholds), tuple(candidates), tau)
