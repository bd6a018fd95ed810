"""Per-channel uniform quantization and rate-distortion step selection.

Inference-path quantization is plain rounding to step multiples. The
noise-injection variant simulates quantization with uniform dither and is
kept for training-style evaluation of the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatstream.codec.entropy import (
    AlphabetOverflowError,
    estimate_bits,
    fit_entropy_model,
)


@dataclass(frozen=True)
class QuantizationSpec:
    """Positive per-channel step sizes, matched to the last data axis."""

    steps: np.ndarray

    def __post_init__(self):
        steps = np.atleast_1d(np.asarray(self.steps, dtype=np.float64))
        object.__setattr__(self, "steps", steps)
        if steps.size == 0 or np.any(steps <= 0):
            raise ValueError("quantization steps must be positive")

    @classmethod
    def uniform(cls, step: float, channels: int = 1) -> "QuantizationSpec":
        return cls(np.full(channels, float(step)))


def _broadcast_steps(x: np.ndarray, spec: QuantizationSpec) -> np.ndarray:
    steps = spec.steps
    if steps.size == 1:
        return np.broadcast_to(steps, x.shape)
    if x.ndim == 0 or x.shape[-1] != steps.size:
        raise ValueError("last axis of x must match the channel count")
    return np.broadcast_to(steps, x.shape)


def symbols_for(x, spec: QuantizationSpec) -> np.ndarray:
    """Integer symbols round(x / step) per channel."""
    x = np.asarray(x, dtype=np.float64)
    return np.round(x / _broadcast_steps(x, spec)).astype(np.int64)


def values_from(symbols, spec: QuantizationSpec) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=np.int64)
    return symbols * _broadcast_steps(symbols.astype(np.float64), spec)


def quantize(x, spec: QuantizationSpec) -> np.ndarray:
    """Round each element to the nearest step multiple (idempotent)."""
    return values_from(symbols_for(x, spec), spec)


def inject_noise(x, spec: QuantizationSpec, rng_seed: int) -> np.ndarray:
    """Perturb by uniform noise in [-step/2, +step/2); deterministic in
    the seed. Simulates quantization without the rounding nonlinearity."""
    x = np.asarray(x, dtype=np.float64)
    steps = _broadcast_steps(x, spec)
    rng = np.random.default_rng(rng_seed)
    return x + rng.uniform(-0.5, 0.5, size=x.shape) * steps


def rd_select_step(F, candidate_steps, distortion_callback,
                   lambda_q: float) -> QuantizationSpec:
    """Pick the candidate step minimizing lambda_q * bits + distortion.

    The rate term fits a per-channel entropy model on the candidate's
    symbols and sums the estimated bits; ties break toward the larger
    step. Candidates too fine for the static frequency tables (symbol
    spread overflowing the alphabet capacity) are infeasible and skipped.
    Returns a per-channel spec broadcasting the winning scalar.
    """
    F = np.asarray(F, dtype=np.float64)
    candidates = sorted(float(s) for s in candidate_steps)
    if not candidates:
        raise ValueError("need at least one candidate step")
    channels = F.shape[-1] if F.ndim > 1 else 1
    cols = F.reshape(-1, channels)

    best = None
    best_cost = np.inf
    for st in candidates:
        spec = QuantizationSpec.uniform(st, channels)
        syms = symbols_for(cols, spec)
        try:
            bits = sum(estimate_bits(syms[:, c], fit_entropy_model(syms[:, c]))
                       for c in range(channels))
        except AlphabetOverflowError:
            continue
        cost = lambda_q * bits + float(distortion_callback(
            values_from(syms, spec).reshape(F.shape)))
        if cost <= best_cost:      # ascending order: ties keep the larger step
            best, best_cost = spec, cost
    if best is None:
        raise AlphabetOverflowError(
            "every candidate step overflows the entropy-model alphabet")
    return best
