"""Static per-channel entropy model: a discretized Laplace over a bounded
integer alphabet, quantized to integer frequencies for the range coder.

The model is fit per channel with robust statistics (median location,
mean-absolute-deviation diversity) and carries a small guard band around
the observed alphabet so near-boundary symbols from re-quantized data stay
codable. The quantized frequency table is what gets serialized, so a
decoder never has to reproduce any floating-point fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TOTAL_BITS = 14
TOTAL = 1 << TOTAL_BITS            # frequency quantization total (fits u16)
MAX_ALPHABET = TOTAL // 2          # keep headroom above the min-1 frequencies
MIN_DIVERSITY = 1e-3               # floor for b, in step units
PMF_FLOOR = 2.0 ** -32             # estimate floor for out-of-alphabet symbols


class AlphabetOverflowError(ValueError):
    """Symbol spread too wide for a static frequency table."""


@dataclass(frozen=True)
class EntropyModel:
    """Frequency table over the integer alphabet [lo, hi]."""

    lo: int
    freqs: np.ndarray                      # uint32, each >= 1, sums to TOTAL
    mu: float = 0.0
    b: float = MIN_DIVERSITY
    cumfreq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=np.uint32)
        object.__setattr__(self, "freqs", freqs)
        if freqs.size == 0:
            raise ValueError("empty alphabet")
        if freqs.size > MAX_ALPHABET:
            raise AlphabetOverflowError("alphabet too large")
        if int(freqs.sum()) != TOTAL or freqs.min() < 1:
            raise ValueError("frequencies must be >= 1 and sum to the total")
        cum = np.zeros(freqs.size + 1, dtype=np.int64)
        np.cumsum(freqs, out=cum[1:])
        object.__setattr__(self, "cumfreq", cum)

    @property
    def hi(self) -> int:
        return self.lo + len(self.freqs) - 1

    @property
    def total(self) -> int:
        return TOTAL

    def pmf(self) -> np.ndarray:
        """Normalized probabilities; sums to 1 exactly up to float rounding."""
        return self.freqs.astype(np.float64) / TOTAL

    @classmethod
    def from_pmf(cls, lo: int, probabilities, mu: float = 0.0,
                 b: float = MIN_DIVERSITY) -> "EntropyModel":
        return cls(lo, _quantize_pmf(np.asarray(probabilities, np.float64)),
                   mu, b)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "EntropyModel":
        n = hi - lo + 1
        return cls.from_pmf(lo, np.full(n, 1.0 / n))


def _quantize_pmf(p: np.ndarray) -> np.ndarray:
    """Deterministically turn a PMF into integer frequencies >= 1 summing
    to TOTAL; residual mass goes to (or comes from) the largest bins."""
    n = p.size
    if n > MAX_ALPHABET:
        raise AlphabetOverflowError("alphabet larger than the table capacity")
    p = p / p.sum()
    f = np.maximum(1, np.floor(p * TOTAL).astype(np.int64))
    excess = int(f.sum()) - TOTAL
    if excess > 0:
        order = np.argsort(-f, kind="stable")
        k = 0
        while excess > 0:
            i = order[k % n]
            take = min(excess, int(f[i]) - 1)
            f[i] -= take
            excess -= take
            k += 1
    elif excess < 0:
        f[int(np.argmax(f))] += -excess
    return f.astype(np.uint32)


def _laplace_cdf(x: float, mu: float, b: float) -> float:
    if x < mu:
        return 0.5 * math.exp((x - mu) / b)
    return 1.0 - 0.5 * math.exp(-(x - mu) / b)


def fit_entropy_model(symbols) -> EntropyModel:
    """Fit a discretized Laplace to one channel of integer symbols."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        raise ValueError("need at least one symbol")
    mu = float(np.median(symbols))
    b = max(float(np.mean(np.abs(symbols - mu))), MIN_DIVERSITY)
    guard = max(2, int(math.ceil(4.0 * b)))
    lo = int(symbols.min()) - guard
    hi = int(symbols.max()) + guard
    if hi - lo + 1 > MAX_ALPHABET:
        raise AlphabetOverflowError("symbol spread too large for a static model")
    ks = np.arange(lo, hi + 1)
    upper = np.array([_laplace_cdf(k + 0.5, mu, b) for k in ks])
    lower = np.array([_laplace_cdf(k - 0.5, mu, b) for k in ks])
    p = np.maximum(upper - lower, 0.0)
    if p.sum() <= 0:
        p = np.full(ks.size, 1.0 / ks.size)
    return EntropyModel(lo, _quantize_pmf(p), mu, b)


def estimate_bits(symbols, model: EntropyModel) -> float:
    """Ideal code length sum(-log2 p) under the quantized model, with
    out-of-alphabet symbols charged at the 2^-32 probability floor."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return 0.0
    idx = symbols - model.lo
    inside = (idx >= 0) & (idx < len(model.freqs))
    bits = np.full(symbols.shape, -math.log2(PMF_FLOOR), dtype=np.float64)
    p = model.freqs[idx[inside]].astype(np.float64) / TOTAL
    bits[inside] = -np.log2(p)
    return float(bits.sum())
