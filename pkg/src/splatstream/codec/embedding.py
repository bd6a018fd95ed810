"""Linear anchor-attribute embedding via truncated SVD.

Each anchor contributes one attribute row: for each of its K gaussians the
8 values (color r,g,b, opacity, quaternion w,x,y,z), so A = 8K columns.
``fit_embedding`` centers the matrix and keeps the leading D right-singular
directions, which is the L2-optimal rank-D factorization; the mean and the
orthonormal basis form the transmitted decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatstream.core import (
    AnchorFeature,
    Gaussian,
    GaussianKind,
    GaussianMap,
    quat_normalize,
)

ATTRS_PER_GAUSSIAN = 8


@dataclass(frozen=True)
class DecoderWeights:
    """Linear decoder: attributes ~= mean + basis @ embedding."""

    mean: np.ndarray
    basis: np.ndarray          # (A, D), orthonormal columns

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, np.float64))
        object.__setattr__(self, "basis", np.asarray(self.basis, np.float64))
        if self.basis.ndim != 2 or self.mean.shape != (self.basis.shape[0],):
            raise ValueError("mean/basis dimensions disagree")

    @property
    def A(self) -> int:
        return self.basis.shape[0]

    @property
    def D(self) -> int:
        return self.basis.shape[1]


def _complete_basis(v: np.ndarray, d: int) -> np.ndarray:
    """Extend orthonormal columns of v to d columns deterministically."""
    a = v.shape[0]
    cols = [v[:, i] for i in range(v.shape[1])]
    k = 0
    while len(cols) < d:
        cand = np.zeros(a)
        cand[k % a] = 1.0
        for c in cols:
            cand = cand - np.dot(c, cand) * c
        n = np.linalg.norm(cand)
        if n > 1e-8:
            cols.append(cand / n)
        k += 1
        if k > 4 * a:
            raise RuntimeError("failed to complete the basis")
    return np.stack(cols, axis=1)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: the largest-|.| entry of each column
    is positive."""
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def fit_embedding(attrs: np.ndarray, D: int):
    """Centered truncated SVD: returns (embeddings (N,D), DecoderWeights).

    Reconstruction mean + emb @ basis.T achieves the optimal rank-D squared
    error (the discarded singular-value energy of the centered matrix).
    """
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim != 2 or attrs.shape[0] < 1:
        raise ValueError("attrs must be a non-empty (N, A) matrix")
    n, a = attrs.shape
    if not (1 <= D <= a):
        raise ValueError("need 1 <= D <= attribute dimension")
    mean = attrs.mean(axis=0)
    x = attrs - mean
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    v = vt.T
    if v.shape[1] < D:
        v = _complete_basis(v, D)
    basis = _fix_signs(v[:, :D])
    return x @ basis, DecoderWeights(mean, basis)


def decode_attributes(emb: np.ndarray, weights: DecoderWeights) -> np.ndarray:
    """Invert the embedding: mean + emb @ basis.T (rows or single vector)."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim == 1:
        return weights.mean + weights.basis @ emb
    return weights.mean + emb @ weights.basis.T


def pack_gaussian_attrs(colors, opacities, rotations) -> np.ndarray:
    """(N,3),(N,),(N,4) -> (N,8) rows [r,g,b,opacity,qw,qx,qy,qz] with
    quaternions canonicalized to non-negative w for stable embeddings."""
    rot = np.asarray(rotations, np.float64)
    flip = np.where(rot[:, 0] < 0, -1.0, 1.0)
    return np.concatenate([np.asarray(colors, np.float64),
                           np.asarray(opacities, np.float64)[:, None],
                           rot * flip[:, None]], axis=1)


def anchor_attr_matrix(m: GaussianMap) -> np.ndarray:
    """One row per anchor: the K slot attribute blocks concatenated."""
    if m.anchor_positions is None:
        raise ValueError("map has no anchors")
    per_slot = pack_gaussian_attrs(m.colors, m.opacities, m.rotations)
    return per_slot.reshape(m.anchor_count, m.K * ATTRS_PER_GAUSSIAN)


def unpack_gaussian_attrs(rows: np.ndarray):
    """(N,8) -> (colors, opacities, rotations) with rendering-safe clamps."""
    rows = np.asarray(rows, dtype=np.float64)
    colors = np.clip(rows[:, 0:3], 0.0, 1.0)
    opacities = np.clip(rows[:, 3], 0.0, 1.0)
    rotations = quat_normalize(rows[:, 4:8])
    return colors, opacities, rotations


def decode_anchor(feature: AnchorFeature, weights: DecoderWeights,
                  kind: GaussianKind = GaussianKind.FLAT2D) -> list[Gaussian]:
    """Recover the K gaussians owned by one anchor."""
    if feature.F_emb is None:
        raise ValueError("anchor has no embedding")
    if weights.D != len(feature.F_emb):
        raise ValueError("embedding dimension disagrees with the decoder")
    K = feature.K
    if weights.A != K * ATTRS_PER_GAUSSIAN:
        raise ValueError("decoder width disagrees with K")
    rows = decode_attributes(feature.F_emb, weights).reshape(K, ATTRS_PER_GAUSSIAN)
    colors, opacities, rotations = unpack_gaussian_attrs(rows)
    scales = np.clip(feature.F_s, 0.0, None).copy()
    if kind is GaussianKind.FLAT2D:
        scales[np.arange(K), np.argmin(scales, axis=1)] = 0.0
    elif kind is GaussianKind.ISOTROPIC3D:
        scales = np.repeat(scales.mean(axis=1, keepdims=True), 3, axis=1)
    positions = feature.anchor_position + feature.F_o
    return [Gaussian(positions[i], scales[i], rotations[i],
                     float(opacities[i]), colors[i], kind) for i in range(K)]
