"""Versioned binary container for full maps and map increments.

Layout (all little-endian), extension ``.gsb``::

    magic          4s   "GSSH"
    version        u16  (currently 1)
    payload_kind   u8   0 = full map, 1 = increment
    gaussian_kind  u8   GaussianKind value shared by the stream
    stage_id       u32
    anchor_count   u32
    K              u8   gaussians per anchor
    D              u8   embedding dimension
    epsilon        f32  anchor grid pitch in meters
    n_channels     u16  = D + 6 (embedding + 3 scale + 3 offset columns)
    steps          f64[n_channels]
    entropy tables per channel: lo i32, count u32, freqs u16[count]
    decoder        f32[A] mean + f32[A*D] basis, row-major, A = 8K
    anchor coords  i32[anchor_count*3]            (full maps only)
    payload        u32 length + range-coded channel-major symbols
    crc32          u32 over every preceding byte

Decoding is fully determined by the transmitted tables: symbols decode to
``symbol * step``, the linear decoder maps embeddings back to per-gaussian
attributes, and full maps clamp/renormalize attributes while increments
stay raw (clamping belongs to increment application).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from splatstream.codec.embedding import (
    ATTRS_PER_GAUSSIAN,
    DecoderWeights,
    anchor_attr_matrix,
    unpack_gaussian_attrs,
)
from splatstream.codec.entropy import EntropyModel, fit_entropy_model
from splatstream.codec.quantization import (
    QuantizationSpec,
    rd_select_step,
    symbols_for,
    values_from,
)
from splatstream.codec.rangecoder import decode_segments, encode_segments
from splatstream.core import GaussianKind, GaussianMap

MAGIC = b"GSSH"
VERSION = 1
FULL_MAP_D = 50
INCREMENT_D = 25

DEFAULT_CANDIDATE_STEPS = (0.0002, 0.0005, 0.001, 0.002, 0.005,
                           0.01, 0.02, 0.05, 0.1, 0.2)
# scales the squared-error distortion against lambda_q * bits so the
# published lambda schedule lands on usefully fine steps
DISTORTION_GAIN = 100.0


class PayloadKind(IntEnum):
    FULL_MAP = 0
    INCREMENT = 1


class BitstreamError(ValueError):
    pass


class BadMagicError(BitstreamError):
    pass


class BadVersionError(BitstreamError):
    pass


class CrcMismatchError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class KindMismatchError(BitstreamError):
    pass


@dataclass(frozen=True)
class StreamArtifacts:
    """Everything the container stores besides the header: the fitted
    decoder, per-channel steps/models, and the quantized symbols."""

    weights: DecoderWeights
    spec: QuantizationSpec
    models: list
    emb_symbols: np.ndarray       # (M, D)
    scale_symbols: np.ndarray     # (M*K, 3)
    offset_symbols: np.ndarray    # (M*K, 3)

    @property
    def D(self) -> int:
        return self.emb_symbols.shape[1]


@dataclass(frozen=True)
class ParsedStream:
    payload_kind: PayloadKind
    gaussian_kind: GaussianKind
    stage_id: int
    anchor_count: int
    K: int
    D: int
    epsilon: float
    spec: QuantizationSpec
    models: list
    weights: DecoderWeights
    anchor_coords: np.ndarray | None
    emb_symbols: np.ndarray
    scale_symbols: np.ndarray
    offset_symbols: np.ndarray
    section_sizes: dict


def _f32(x: np.ndarray) -> np.ndarray:
    """Round-trip through float32: the transmitted precision."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _sse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum((a - b) ** 2))


def fit_stream(attr_rows: np.ndarray, scales: np.ndarray, offsets: np.ndarray,
               D: int, lambda_q: float = 0.0025,
               candidate_steps=DEFAULT_CANDIDATE_STEPS,
               distortion_gain: float = DISTORTION_GAIN) -> StreamArtifacts:
    """Fit decoder + steps + entropy models for one stream's channels.

    Rate-distortion selects one scalar step per channel group (embedding,
    scale columns, offset columns) by minimizing
    ``lambda_q * bits + gain * squared_error``; the orthonormal basis makes
    embedding-space error equal attribute-space error.
    """
    from splatstream.codec.embedding import _complete_basis, fit_embedding

    if attr_rows.shape[0] == 0:
        a = attr_rows.shape[1]
        weights = DecoderWeights(np.zeros(a),
                                 _complete_basis(np.zeros((a, 0)), D))
        spec = QuantizationSpec(np.ones(D + 6))
        degenerate = EntropyModel(0, np.array([1 << 14], dtype=np.uint32))
        return StreamArtifacts(weights, spec, [degenerate] * (D + 6),
                               np.zeros((0, D), np.int64),
                               np.zeros((0, 3), np.int64),
                               np.zeros((0, 3), np.int64))

    emb, weights = fit_embedding(attr_rows, D)
    weights = DecoderWeights(_f32(weights.mean), _f32(weights.basis))
    emb = (attr_rows - weights.mean) @ weights.basis

    groups = {}
    for name, data in (("emb", emb), ("scale", scales), ("offset", offsets)):
        spec = rd_select_step(
            data, candidate_steps,
            lambda q: distortion_gain * _sse(q, data), lambda_q)
        groups[name] = (spec.steps[0], symbols_for(data, spec))

    d_emb = emb.shape[1]
    steps = np.concatenate([np.full(d_emb, groups["emb"][0]),
                            np.full(3, groups["scale"][0]),
                            np.full(3, groups["offset"][0])])
    spec = QuantizationSpec(steps)
    channels = _channel_views(groups["emb"][1], groups["scale"][1],
                              groups["offset"][1])
    models = [fit_entropy_model(ch) for ch in channels]
    return StreamArtifacts(weights, spec, models, groups["emb"][1],
                           groups["scale"][1], groups["offset"][1])


def _channel_views(emb_symbols, scale_symbols, offset_symbols):
    """Channel-major symbol vectors in the serialized channel order."""
    chans = [emb_symbols[:, j] for j in range(emb_symbols.shape[1])]
    chans += [scale_symbols[:, j] for j in range(3)]
    chans += [offset_symbols[:, j] for j in range(3)]
    return chans


def _uniform_kind(m: GaussianMap) -> GaussianKind:
    if m.size == 0:
        return GaussianKind.FLAT2D
    kinds = np.unique(m.kinds)
    if len(kinds) != 1:
        raise BitstreamError("stream requires a uniform gaussian kind")
    return GaussianKind(int(kinds[0]))


def fit_full_map(m: GaussianMap, D: int = FULL_MAP_D,
                 lambda_q: float = 0.0025,
                 candidate_steps=DEFAULT_CANDIDATE_STEPS,
                 distortion_gain: float = DISTORTION_GAIN) -> StreamArtifacts:
    """Fit the compression artifacts for an anchored map. Pruned slots are
    encoded with opacity zero so ordering survives the round trip."""
    if m.anchor_positions is None:
        raise BitstreamError("only anchored maps can be serialized")
    attrs = anchor_attr_matrix(m)
    if np.any(~m.alive):
        attrs = attrs.reshape(m.size, ATTRS_PER_GAUSSIAN).copy()
        attrs[~m.alive, 3] = 0.0
        attrs = attrs.reshape(m.anchor_count, m.K * ATTRS_PER_GAUSSIAN)
    offsets = m.positions - np.repeat(m.anchor_positions, m.K, axis=0)
    return fit_stream(attrs, m.scales, offsets, D, lambda_q,
                      candidate_steps, distortion_gain)


def serialize_full(m: GaussianMap, art: StreamArtifacts,
                   epsilon: float) -> bytes:
    """Write a FULL_MAP stream for an anchored map."""
    if m.anchor_positions is None:
        raise BitstreamError("only anchored maps can be serialized")
    coords = np.round(m.anchor_positions / epsilon).astype(np.int32)
    return _write_stream(PayloadKind.FULL_MAP, _uniform_kind(m), m.stage_id,
                         m.anchor_count, m.K, epsilon, art, coords)


def serialize_increment_stream(art: StreamArtifacts, stage_id: int,
                               anchor_count: int, K: int, epsilon: float,
                               gaussian_kind: GaussianKind) -> bytes:
    """Write an INCREMENT stream (no anchor coordinates section)."""
    return _write_stream(PayloadKind.INCREMENT, gaussian_kind, stage_id,
                         anchor_count, K, epsilon, art, None)


def _write_stream(kind: PayloadKind, gkind: GaussianKind, stage_id: int,
                  anchor_count: int, K: int, epsilon: float,
                  art: StreamArtifacts, coords: np.ndarray | None) -> bytes:
    D = art.D
    n_channels = D + 6
    if len(art.spec.steps) != n_channels or len(art.models) != n_channels:
        raise BitstreamError("channel bookkeeping disagrees with D")
    head = struct.pack("<4sHBBIIBBfH", MAGIC, VERSION, int(kind),
                       int(gkind.value), stage_id, anchor_count, K, D,
                       np.float32(epsilon), n_channels)
    steps = np.ascontiguousarray(art.spec.steps, dtype="<f8").tobytes()
    tables = bytearray()
    for mdl in art.models:
        tables += struct.pack("<iI", mdl.lo, len(mdl.freqs))
        tables += np.ascontiguousarray(mdl.freqs, dtype="<u2").tobytes()
    weights = (np.ascontiguousarray(art.weights.mean, dtype="<f4").tobytes()
               + np.ascontiguousarray(art.weights.basis, dtype="<f4").tobytes())
    coord_bytes = b""
    if kind is PayloadKind.FULL_MAP:
        coord_bytes = np.ascontiguousarray(coords, dtype="<i4").tobytes()
    channels = _channel_views(art.emb_symbols, art.scale_symbols,
                              art.offset_symbols)
    payload = encode_segments(list(zip(channels, art.models)))
    body = head + steps + bytes(tables) + weights + coord_bytes \
        + struct.pack("<I", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def parse_stream(data: bytes) -> ParsedStream:
    """Validate and unpack a stream; raises typed BitstreamError subclasses."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a GSSH stream")
    head_size = struct.calcsize("<4sHBBIIBBfH")
    if len(data) < head_size + 4:
        raise TruncatedStreamError("stream shorter than its header")
    (_, version, kind, gkind, stage_id, anchor_count, K, D, epsilon,
     n_channels) = struct.unpack("<4sHBBIIBBfH", data[:head_size])
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CrcMismatchError("CRC32 mismatch")
    if n_channels != D + 6:
        raise BitstreamError("channel count disagrees with D")

    pos = head_size
    body = data[:-4]

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedStreamError("stream ends inside a section")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    steps = np.frombuffer(take(8 * n_channels), dtype="<f8").astype(np.float64)
    models = []
    for _ in range(n_channels):
        lo, count = struct.unpack("<iI", take(8))
        freqs = np.frombuffer(take(2 * count), dtype="<u2").astype(np.uint32)
        models.append(EntropyModel(lo, freqs))
    A = K * ATTRS_PER_GAUSSIAN
    mean = np.frombuffer(take(4 * A), dtype="<f4").astype(np.float64)
    basis = np.frombuffer(take(4 * A * D), dtype="<f4").astype(
        np.float64).reshape(A, D)
    coords = None
    if kind == int(PayloadKind.FULL_MAP):
        coords = np.frombuffer(take(12 * anchor_count), dtype="<i4").astype(
            np.int64).reshape(anchor_count, 3)
    (payload_len,) = struct.unpack("<I", take(4))
    payload_start = pos
    payload = take(payload_len)
    if pos != len(body):
        raise BitstreamError("trailing bytes after payload")

    counts = [anchor_count] * D + [anchor_count * K] * 6
    segs = decode_segments(payload, list(zip(counts, models)))
    emb = np.stack(segs[:D], axis=1) if D else np.zeros((anchor_count, 0))
    if anchor_count == 0:
        emb = np.zeros((0, D), dtype=np.int64)
        sc = off = np.zeros((0, 3), dtype=np.int64)
    else:
        sc = np.stack(segs[D:D + 3], axis=1)
        off = np.stack(segs[D + 3:], axis=1)

    sizes = {"header": head_size, "steps": 8 * n_channels,
             "tables": sum(8 + 2 * len(mdl.freqs) for mdl in models),
             "weights": 4 * A * (D + 1),
             "coords": 0 if coords is None else 12 * anchor_count,
             "payload": payload_len + 4, "crc": 4,
             "payload_offset": payload_start}
    return ParsedStream(PayloadKind(kind), GaussianKind(gkind), stage_id,
                        anchor_count, K, D, float(epsilon),
                        QuantizationSpec(steps), models,
                        DecoderWeights(mean, basis), coords, emb, sc, off,
                        sizes)


def _dequantize(parsed: ParsedStream):
    steps = parsed.spec.steps
    D = parsed.D
    emb = values_from(parsed.emb_symbols, QuantizationSpec(steps[:D]))
    scales = values_from(parsed.scale_symbols, QuantizationSpec(steps[D:D + 3]))
    offsets = values_from(parsed.offset_symbols, QuantizationSpec(steps[D + 3:]))
    return emb, scales, offsets


def _map_from_parsed(parsed: ParsedStream) -> GaussianMap:
    emb, scales, offsets = _dequantize(parsed)
    n = parsed.anchor_count * parsed.K
    anchor_positions = parsed.anchor_coords.astype(np.float64) * parsed.epsilon
    positions = np.repeat(anchor_positions, parsed.K, axis=0) + offsets
    rows = (parsed.weights.mean + emb @ parsed.weights.basis.T).reshape(
        n, ATTRS_PER_GAUSSIAN)
    colors, opacities, rotations = unpack_gaussian_attrs(rows)
    scales = np.clip(scales, 0.0, None)
    if parsed.gaussian_kind is GaussianKind.FLAT2D and n:
        scales[np.arange(n), np.argmin(scales, axis=1)] = 0.0
    elif parsed.gaussian_kind is GaussianKind.ISOTROPIC3D and n:
        scales = np.repeat(scales.mean(axis=1, keepdims=True), 3, axis=1)
    return GaussianMap(positions, scales, rotations, opacities, colors,
                       np.full(n, parsed.gaussian_kind.value, np.uint8),
                       np.ones(n, dtype=bool), anchor_positions, parsed.K,
                       parsed.stage_id)


def decoded_full_map(m: GaussianMap, art: StreamArtifacts,
                     epsilon: float) -> GaussianMap:
    """The exact map a client reconstructs from serialize_full's output."""
    return _map_from_parsed(parse_stream(serialize_full(m, art, epsilon)))


def deserialize(data: bytes):
    """Decode a stream into a GaussianMap or a GaussianIncrement."""
    parsed = parse_stream(data)
    if parsed.payload_kind is PayloadKind.FULL_MAP:
        return _map_from_parsed(parsed)
    from splatstream.increment import increment_from_parsed
    return increment_from_parsed(parsed)


def encode_full_map(m: GaussianMap, epsilon: float, D: int = FULL_MAP_D,
                    lambda_q: float = 0.0025,
                    candidate_steps=DEFAULT_CANDIDATE_STEPS,
                    distortion_gain: float = DISTORTION_GAIN):
    """One-shot fit + serialize; returns (bytes, the decoded twin map)."""
    art = fit_full_map(m, D, lambda_q, candidate_steps, distortion_gain)
    data = serialize_full(m, art, epsilon)
    return data, _map_from_parsed(parse_stream(data))
