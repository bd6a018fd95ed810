"""Map increments: attribute-space deltas between consecutive map stages.

An increment stores raw element-wise differences (quaternion components
subtracted directly) for the frozen seen-anchor ordering. Application adds
the delta and then repairs parameters (quaternion renormalization, [0,1]
clamps, non-negative scales, flat-axis re-zero), so the encoded stream
itself stays lossless up to quantization. Increment streams embed the
color/opacity/rotation delta block at half the full-map dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from splatstream.codec.bitstream import (
    DEFAULT_CANDIDATE_STEPS,
    DISTORTION_GAIN,
    INCREMENT_D,
    ParsedStream,
    PayloadKind,
    fit_stream,
    parse_stream,
    serialize_increment_stream,
)
from splatstream.codec.embedding import ATTRS_PER_GAUSSIAN
from splatstream.core import GaussianKind, GaussianMap, normalize_map_params


class OutOfOrderUpdateError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianIncrement:
    """Per-slot attribute deltas aligned to the frozen anchor ordering."""

    d_positions: np.ndarray
    d_scales: np.ndarray
    d_rotations: np.ndarray
    d_opacities: np.ndarray
    d_colors: np.ndarray
    stage_id: int
    anchor_count: int
    K: int

    def __post_init__(self):
        n = self.anchor_count * self.K
        shapes = (self.d_positions.shape, self.d_scales.shape,
                  self.d_rotations.shape, self.d_opacities.shape,
                  self.d_colors.shape)
        if shapes != ((n, 3), (n, 3), (n, 4), (n,), (n, 3)):
            raise ValueError("delta array shapes disagree with anchor layout")

    @property
    def size(self) -> int:
        return self.anchor_count * self.K


def _require_aligned(target: GaussianMap, prev: GaussianMap):
    if target.anchor_positions is None or prev.anchor_positions is None:
        raise ValueError("increments require anchored maps")
    if target.K != prev.K or target.anchor_count != prev.anchor_count:
        raise ValueError("anchor layout mismatch between stages")
    if not np.array_equal(target.anchor_positions, prev.anchor_positions):
        raise ValueError("anchor ordering mismatch between stages")


def compute_increment(target: GaussianMap, prev: GaussianMap) -> GaussianIncrement:
    """Element-wise target minus prev over the shared anchor ordering."""
    _require_aligned(target, prev)
    return GaussianIncrement(
        target.positions - prev.positions,
        target.scales - prev.scales,
        target.rotations - prev.rotations,
        target.opacities - prev.opacities,
        target.colors - prev.colors,
        prev.stage_id + 1, prev.anchor_count, prev.K)


def apply_increment(prev: GaussianMap, inc: GaussianIncrement) -> GaussianMap:
    """prev + delta with post-hoc parameter repair; advances the stage id."""
    if inc.stage_id != prev.stage_id + 1:
        raise OutOfOrderUpdateError(
            f"increment stage {inc.stage_id} does not follow {prev.stage_id}")
    if prev.anchor_positions is None or inc.size != prev.size \
            or inc.K != prev.K:
        raise ValueError("increment layout disagrees with the map")
    out = prev.copy()
    out.positions += inc.d_positions
    out.scales += inc.d_scales
    out.rotations += inc.d_rotations
    out.opacities += inc.d_opacities
    out.colors += inc.d_colors
    normalize_map_params(out)
    out.stage_id = inc.stage_id
    return out


def _attr_delta_rows(inc: GaussianIncrement) -> np.ndarray:
    per_slot = np.concatenate([inc.d_colors, inc.d_opacities[:, None],
                               inc.d_rotations], axis=1)
    return per_slot.reshape(inc.anchor_count, inc.K * ATTRS_PER_GAUSSIAN)


def encode_increment(inc: GaussianIncrement, lambda_q: float = 0.0025,
                     candidate_steps=DEFAULT_CANDIDATE_STEPS,
                     distortion_gain: float = DISTORTION_GAIN,
                     epsilon: float = 0.0,
                     gaussian_kind: GaussianKind = GaussianKind.FLAT2D,
                     D: int = INCREMENT_D) -> bytes:
    """Compress an increment: fit the half-dimension embedding on the delta
    attribute block, quantize every channel, entropy-code."""
    art = fit_stream(_attr_delta_rows(inc), inc.d_scales, inc.d_positions,
                     D, lambda_q, candidate_steps, distortion_gain)
    return serialize_increment_stream(art, inc.stage_id, inc.anchor_count,
                                      inc.K, epsilon, gaussian_kind)


def increment_from_parsed(parsed: ParsedStream) -> GaussianIncrement:
    """Rebuild the quantized delta arrays a stream transports."""
    from splatstream.codec.bitstream import _dequantize

    if parsed.payload_kind is not PayloadKind.INCREMENT:
        raise ValueError("stream does not carry an increment")
    emb, scales, offsets = _dequantize(parsed)
    n = parsed.anchor_count * parsed.K
    rows = (parsed.weights.mean + emb @ parsed.weights.basis.T).reshape(
        n, ATTRS_PER_GAUSSIAN)
    return GaussianIncrement(offsets, scales, rows[:, 4:8], rows[:, 3],
                             rows[:, 0:3], parsed.stage_id,
                             parsed.anchor_count, parsed.K)


def decode_increment(data: bytes) -> GaussianIncrement:
    """Exact inverse of encode_increment's quantized representation."""
    parsed = parse_stream(data)
    if parsed.payload_kind is not PayloadKind.INCREMENT:
        from splatstream.codec.bitstream import KindMismatchError
        raise KindMismatchError("expected an increment stream")
    return increment_from_parsed(parsed)


def quantized_increment(inc: GaussianIncrement, lambda_q: float = 0.0025,
                        candidate_steps=DEFAULT_CANDIDATE_STEPS,
                        distortion_gain: float = DISTORTION_GAIN) -> GaussianIncrement:
    """The increment a client will decode: encode + decode in one step."""
    return decode_increment(encode_increment(
        inc, lambda_q, candidate_steps, distortion_gain))


# ---------------------------------------------------------------------------
# staged map database
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    """One map-update epoch: transmitted sizes plus a metrics snapshot."""

    stage_id: int
    full_bytes: int = 0
    increment_bytes: int = 0
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.full_bytes < 0 or self.increment_bytes < 0:
            raise ValueError("byte counts must be >= 0")


class StageDatabase:
    """Monotone store of StageRecords plus per-stage payload blobs."""

    def __init__(self):
        self._records: dict[int, StageRecord] = {}
        self._blobs: dict[int, dict] = {}

    def put(self, record: StageRecord, blobs: dict | None = None) -> None:
        if self._records and record.stage_id <= max(self._records):
            raise ValueError(
                f"stage {record.stage_id} does not advance the database")
        self._records[record.stage_id] = record
        self._blobs[record.stage_id] = dict(blobs or {})

    def get(self, stage_id: int) -> StageRecord:
        if stage_id not in self._records:
            raise KeyError(f"no record for stage {stage_id}")
        return self._records[stage_id]

    def blobs(self, stage_id: int) -> dict:
        return self._blobs[stage_id]

    def latest_stage(self) -> int | None:
        return max(self._records) if self._records else None

    def cumulative_bytes(self) -> int:
        return sum(r.full_bytes + r.increment_bytes
                   for r in self._records.values())

    def stages(self) -> list[int]:
        return sorted(self._records)
