"""Container round-trip, error taxonomy, and size accounting tests."""

import struct

import numpy as np
import pytest

from splatstream.codec.bitstream import (
    BadMagicError,
    BadVersionError,
    CrcMismatchError,
    KindMismatchError,
    PayloadKind,
    decoded_full_map,
    deserialize,
    encode_full_map,
    fit_full_map,
    parse_stream,
    serialize_full,
)
from splatstream.codec.embedding import decode_anchor, fit_embedding, anchor_attr_matrix
from splatstream.core import (
    AnchorFeature,
    CameraPose,
    GaussianKind,
    GaussianMap,
    empty_map,
)
from splatstream.render import render


def random_anchored_map(rng, anchors=20, K=10, kind=GaussianKind.FLAT2D,
                        epsilon=0.05, stage_id=0):
    cells = rng.integers(-40, 40, size=(anchors, 3))
    cells = np.unique(cells, axis=0)
    while len(cells) < anchors:
        extra = rng.integers(-40, 40, size=(anchors, 3))
        cells = np.unique(np.concatenate([cells, extra]), axis=0)
    cells = cells[:anchors]
    anchor_pos = cells.astype(np.float64) * epsilon
    n = anchors * K
    positions = np.repeat(anchor_pos, K, axis=0) + rng.uniform(
        -epsilon / 2, epsilon / 2, (n, 3))
    scales = rng.uniform(0.01, 0.08, (n, 3))
    kinds = np.full(n, kind.value, np.uint8)
    if kind is GaussianKind.FLAT2D:
        scales[np.arange(n), np.argmin(scales, axis=1)] = 0.0
    elif kind is GaussianKind.ISOTROPIC3D:
        scales = np.repeat(scales[:, :1], 3, axis=1)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianMap(positions, scales, quats,
                       rng.uniform(0.05, 0.95, n),
                       rng.uniform(0, 1, (n, 3)), kinds,
                       np.ones(n, dtype=bool), anchor_pos, K, stage_id)


def make_cam(w=32, h=24, t=(0, 0, -4.0), f=28.0):
    return CameraPose(np.array([1.0, 0, 0, 0]), np.asarray(t, float),
                      f, f, w / 2, h / 2, w, h)


def test_empty_map_round_trip():
    m = empty_map()
    m.anchor_positions = np.zeros((0, 3))
    m.K = 10
    data, decoded = encode_full_map(m, epsilon=0.05)
    assert decoded.size == 0
    assert deserialize(data).size == 0


def test_single_anchor_round_trip_and_reserialization_determinism():
    rng = np.random.default_rng(0)
    m = random_anchored_map(rng, anchors=1, K=10)
    data, decoded = encode_full_map(m, epsilon=0.05)
    again = serialize_full(decoded, fit_full_map(decoded), epsilon=0.05)
    round2 = deserialize(again)
    assert np.array_equal(round2.positions, decoded.positions)
    # byte-identical re-serialization of the same decoded map
    assert again == serialize_full(decoded, fit_full_map(decoded), epsilon=0.05)


def test_decoded_map_render_matches_preview_bit_exactly():
    rng = np.random.default_rng(1)
    m = random_anchored_map(rng, anchors=30, K=10)
    art = fit_full_map(m)
    preview = decoded_full_map(m, art, epsilon=0.05)
    wire = deserialize(serialize_full(m, art, epsilon=0.05))
    cam = make_cam()
    a = render(preview, cam)
    b = render(wire, cam)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.opacity, b.opacity)


def test_full_map_stream_self_describes():
    rng = np.random.default_rng(2)
    m = random_anchored_map(rng, anchors=50, K=10, stage_id=3)
    data, _ = encode_full_map(m, epsilon=0.05, lambda_q=0.001)
    parsed = parse_stream(data)
    assert parsed.payload_kind is PayloadKind.FULL_MAP
    assert parsed.stage_id == 3
    assert parsed.anchor_count == 50
    assert parsed.K == 10 and parsed.D == 50
    assert parsed.epsilon == pytest.approx(0.05)
    sizes = parsed.section_sizes
    total = (sizes["header"] + sizes["steps"] + sizes["tables"]
             + sizes["weights"] + sizes["coords"] + sizes["payload"] + 4)
    assert total == len(data)


def test_error_taxonomy():
    rng = np.random.default_rng(3)
    m = random_anchored_map(rng, anchors=5, K=10)
    data, _ = encode_full_map(m, epsilon=0.05)

    with pytest.raises(BadMagicError):
        parse_stream(b"XXXX" + data[4:])
    bad_version = bytearray(data)
    bad_version[4] = 99
    with pytest.raises(BadVersionError):
        parse_stream(bytes(bad_version))
    corrupt = bytearray(data)
    corrupt[len(data) // 2] ^= 0x40
    with pytest.raises(CrcMismatchError):
        parse_stream(bytes(corrupt))


def test_bitflip_fuzz_always_detected():
    rng = np.random.default_rng(4)
    m = random_anchored_map(rng, anchors=8, K=10)
    data, _ = encode_full_map(m, epsilon=0.05)
    for _ in range(40):
        corrupt = bytearray(data)
        pos = int(rng.integers(6, len(data)))
        corrupt[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises((CrcMismatchError, BadVersionError)):
            parse_stream(bytes(corrupt))


def test_isotropic_map_round_trip():
    rng = np.random.default_rng(5)
    m = random_anchored_map(rng, anchors=12, K=10,
                            kind=GaussianKind.ISOTROPIC3D)
    _, decoded = encode_full_map(m, epsilon=0.05)
    assert np.all(decoded.kinds == GaussianKind.ISOTROPIC3D.value)
    assert np.all(decoded.scales[:, 0] == decoded.scales[:, 1])


def test_pruned_slots_come_back_transparent():
    rng = np.random.default_rng(6)
    m = random_anchored_map(rng, anchors=6, K=10)
    m.alive[7] = False
    _, decoded = encode_full_map(m, epsilon=0.05,
                                 candidate_steps=(2e-3,))
    assert decoded.opacities[7] == pytest.approx(0.0, abs=5e-3)
    assert decoded.size == m.size


def test_fine_steps_give_high_fidelity():
    rng = np.random.default_rng(7)
    m = random_anchored_map(rng, anchors=25, K=10)
    _, decoded = encode_full_map(m, epsilon=0.05, candidate_steps=(2e-3,))
    # positions quantized at 2e-3 m; attributes bounded by the D=50 cut
    assert np.max(np.abs(decoded.positions - m.positions)) <= 1e-3 + 1e-6
    cam = make_cam()
    a = render(m, cam)
    b = render(decoded, cam)
    assert np.max(np.abs(a.color - b.color)) < 0.15


def test_rate_decreases_with_lambda():
    rng = np.random.default_rng(8)
    m = random_anchored_map(rng, anchors=40, K=10)
    sizes = [len(encode_full_map(m, epsilon=0.05, lambda_q=lam)[0])
             for lam in (0.0005, 0.0025, 0.0105, 0.0205)]
    assert all(b >= a for a, b in zip(sizes[1:], sizes[:-1]))
    assert sizes[-1] < sizes[0]


# ---------------------------------------------------------------------------
# decode_anchor (single-anchor op)
# ---------------------------------------------------------------------------

def test_decode_anchor_zero_embedding_gives_mean():
    rng = np.random.default_rng(9)
    attrs = rng.uniform(0, 1, size=(30, 80))
    _, w = fit_embedding(attrs, 10)
    feat = AnchorFeature(np.zeros(3), np.full((10, 3), 0.02),
                         rng.uniform(-0.02, 0.02, (10, 3)),
                         F_emb=np.zeros(10))
    gs = decode_anchor(feat, w, GaussianKind.ANISOTROPIC3D)
    rows = np.array([np.concatenate([g.color, [g.opacity], g.rotation])
                     for g in gs]).reshape(-1)
    mean_rows = w.mean.reshape(10, 8)
    # color/opacity match the mean after clamping; quaternions renormalized
    assert np.allclose(np.array([g.color for g in gs]),
                       np.clip(mean_rows[:, 0:3], 0, 1))
    assert np.allclose(np.array([g.opacity for g in gs]),
                       np.clip(mean_rows[:, 3], 0, 1))


def test_decode_anchor_round_trip_full_rank():
    rng = np.random.default_rng(10)
    m = random_anchored_map(rng, anchors=30, K=10)
    attrs = anchor_attr_matrix(m)
    emb, w = fit_embedding(attrs, 80)
    feat = AnchorFeature(m.anchor_positions[0],
                         m.scales[:10], m.positions[:10] - m.anchor_positions[0],
                         F_emb=emb[0])
    gs = decode_anchor(feat, w, GaussianKind.FLAT2D)
    for i, g in enumerate(gs):
        assert np.allclose(g.position, m.positions[i], atol=1e-5)
        assert np.allclose(g.color, m.colors[i], atol=1e-5)
        assert g.opacity == pytest.approx(m.opacities[i], abs=1e-5)
        # canonicalized quaternions match up to sign
        assert min(np.max(np.abs(g.rotation - m.rotations[i])),
                   np.max(np.abs(g.rotation + m.rotations[i]))) < 1e-5


def test_decode_anchor_clamps_out_of_range():
    w = type("W", (), {})  # not used, construct weights directly
    from splatstream.codec.embedding import DecoderWeights
    mean = np.zeros(8)
    mean[3] = 1.3                       # drives opacity to 1.3
    mean[4] = 1.0                       # quaternion w
    weights = DecoderWeights(mean, np.eye(8)[:, :2])
    feat = AnchorFeature(np.zeros(3), np.zeros((1, 3)), np.zeros((1, 3)),
                         F_emb=np.zeros(2))
    g = decode_anchor(feat, weights, GaussianKind.ANISOTROPIC3D)[0]
    assert g.opacity == 1.0


def test_decode_anchor_dimension_mismatch():
    from splatstream.codec.embedding import DecoderWeights
    weights = DecoderWeights(np.zeros(8), np.eye(8)[:, :2])
    feat = AnchorFeature(np.zeros(3), np.zeros((1, 3)), np.zeros((1, 3)),
                         F_emb=np.zeros(5))
    with pytest.raises(ValueError):
        decode_anchor(feat, weights)
