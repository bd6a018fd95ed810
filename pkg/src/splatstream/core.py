"""Core domain types and geometric primitives.

Conventions, fixed once and used everywhere:

* Quaternions are scalar-first ``(w, x, y, z)`` and unit-norm.
* Camera poses store the camera->world rotation; the camera looks down its
  local +z axis; the world frame is right-handed with z up.
* Pixel ``(ix, iy)`` samples the continuous image plane at ``u = ix``,
  ``v = iy`` (integer-centered pixels), so ``u = fx * x/z + cx``.
* Depth values are camera-space z in meters, 0 marks an invalid sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

QUAT_NORM_TOL = 1e-6


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Zero-norm input maps to identity."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.where(n > 1e-12, q / np.where(n > 1e-12, n, 1.0), 0.0)
    if q.ndim == 1:
        if n[0] <= 1e-12:
            return np.array([1.0, 0.0, 0.0, 0.0])
        return out
    ident = np.array([1.0, 0.0, 0.0, 0.0])
    bad = (n <= 1e-12)[..., 0]
    out[bad] = ident
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for unit quaternion(s); shape (...,4) -> (...,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) for a 3x3 rotation matrix (Shepperd)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def look_at_quaternion(eye: np.ndarray, target: np.ndarray,
                       up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera->world quaternion for a camera at eye looking at target.

    Camera +z points at the target, +x right, +y down (consistent with
    image v growing downward when the world up is +z).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # looking straight along up: pick an arbitrary stable right axis
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    m = np.stack([right, down, fwd], axis=1)  # columns: camera x,y,z in world
    return matrix_to_quat(m)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

class GaussianKind(Enum):
    ISOTROPIC3D = 0
    FLAT2D = 1
    ANISOTROPIC3D = 2


@dataclass(frozen=True)
class Gaussian:
    """One splat primitive: the unit of rendering and of increment algebra.

    Flat kind: the smallest scale component is exactly 0 and the flat's
    normal is the rotated local z axis. Isotropic kind: all scale
    components equal and the rotation is ignored by rendering.
    """

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    kind: GaussianKind = GaussianKind.ANISOTROPIC3D

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_NORM_TOL:
            raise ValueError("rotation must be unit-norm")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity outside [0,1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color outside [0,1]")
        if np.any(self.scale < 0):
            raise ValueError("scale must be non-negative")
        if self.kind is GaussianKind.FLAT2D and self.scale.min() != 0.0:
            raise ValueError("flat gaussian needs one exactly-zero scale axis")
        if self.kind is GaussianKind.ISOTROPIC3D and not (
                self.scale[0] == self.scale[1] == self.scale[2]):
            raise ValueError("isotropic gaussian needs equal scale components")

    def normal(self) -> np.ndarray:
        """World normal of a flat (rotated local z axis)."""
        return quat_to_matrix(self.rotation)[:, 2]


def covariance(g: Gaussian) -> np.ndarray:
    """3x3 world covariance R * diag(scale^2) * R^T (symmetric PSD)."""
    r = quat_to_matrix(g.rotation)
    return (r * (np.asarray(g.scale) ** 2)) @ r.T


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: camera->world rotation quaternion plus intrinsics."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_NORM_TOL:
            raise ValueError("pose rotation must be unit-norm")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        r = self.rotation_matrix()
        return (np.atleast_2d(points) - self.translation) @ r

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        r = self.rotation_matrix()
        return np.atleast_2d(points) @ r.T + self.translation

    def scaled(self, factor: float) -> "CameraPose":
        """Same view at a resolution scaled by an integer factor."""
        return CameraPose(self.rotation, self.translation,
                          self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor,
                          int(self.width * factor), int(self.height * factor))


class Projection(NamedTuple):
    u: float
    v: float
    z: float
    in_frustum: bool


def project(p: np.ndarray, cam: CameraPose) -> Projection:
    """Project a world point to pixel coordinates and camera depth."""
    pc = cam.world_to_camera(np.asarray(p, dtype=np.float64))[0]
    z = pc[2]
    if z <= 0:
        return Projection(0.0, 0.0, z, False)
    u = cam.fx * pc[0] / z + cam.cx
    v = cam.fy * pc[1] / z + cam.cy
    inside = (0 <= u < cam.width) and (0 <= v < cam.height)
    return Projection(u, v, z, inside)


def lift_pixel(u: float, v: float, z: float, cam: CameraPose) -> np.ndarray:
    """Back-project pixel (u, v) at camera depth z to a world point."""
    pc = np.array([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
    return cam.camera_to_world(pc)[0]


def pose_distance(a: CameraPose, b: CameraPose) -> tuple[float, float]:
    """(rotation angle in degrees within [0,180], translation in meters)."""
    dot = abs(float(np.dot(a.rotation, b.rotation)))
    angle = 2.0 * np.degrees(np.arccos(min(1.0, dot)))
    trans = float(np.linalg.norm(a.translation - b.translation))
    return angle, trans


@dataclass(frozen=True)
class FrameRGBD:
    """Posed color+depth observation; the unit of contributor input."""

    color: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    contributor_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64))
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3):
            raise ValueError("color and depth dimensions disagree")
        if (w, h) != (self.pose.width, self.pose.height):
            raise ValueError("buffer dimensions disagree with the pose")
        if np.any(self.depth < 0):
            raise ValueError("depth values must be >= 0")


@dataclass(frozen=True)
class AnchorFeature:
    """Per-anchor compression record: scales, offsets and an embedding.

    F_emb is None until an embedding has been fitted; serialized streams
    always carry a concrete embedding of the stream-wide dimension.
    """

    anchor_position: np.ndarray
    F_s: np.ndarray
    F_o: np.ndarray
    F_emb: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "anchor_position",
                           np.asarray(self.anchor_position, dtype=np.float64))
        object.__setattr__(self, "F_s", np.asarray(self.F_s, dtype=np.float64))
        object.__setattr__(self, "F_o", np.asarray(self.F_o, dtype=np.float64))
        if self.F_emb is not None:
            object.__setattr__(self, "F_emb",
                               np.asarray(self.F_emb, dtype=np.float64))
        if self.F_s.shape != self.F_o.shape or self.F_s.ndim != 2 or self.F_s.shape[1] != 3:
            raise ValueError("F_s and F_o must both be (K, 3)")

    @property
    def K(self) -> int:
        return self.F_s.shape[0]

    def validate_grid(self, epsilon: float, tol: float = 1e-9) -> bool:
        ratio = self.anchor_position / epsilon
        return bool(np.all(np.abs(ratio - np.round(ratio)) <= tol))


# ---------------------------------------------------------------------------
# the map
# ---------------------------------------------------------------------------

@dataclass
class GaussianMap:
    """Struct-of-arrays Gaussian collection, optionally anchor-organized.

    When anchored, gaussians are stored anchor-major: anchor i owns slots
    [i*K, (i+1)*K). Anchor ordering is stable across stages for the region
    already synchronized to clients. ``alive`` marks pruned slots without
    disturbing the ordering.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    kinds: np.ndarray
    alive: np.ndarray
    anchor_positions: np.ndarray | None = None
    K: int = 0
    stage_id: int = 0

    def __post_init__(self):
        n = len(self.positions)
        for name in ("scales", "rotations", "opacities", "colors", "kinds", "alive"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length disagrees with positions")
        if self.anchor_positions is not None:
            if self.K <= 0 or n != len(self.anchor_positions) * self.K:
                raise ValueError("anchored map needs len(gaussians) == anchors * K")

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def anchor_count(self) -> int:
        return 0 if self.anchor_positions is None else len(self.anchor_positions)

    def anchor_slots(self, i: int) -> slice:
        if self.anchor_positions is None:
            raise ValueError("map has no anchors")
        return slice(i * self.K, (i + 1) * self.K)

    @property
    def anchor_index(self) -> dict[int, range]:
        """Anchor id -> the gaussian slot range it owns."""
        return {i: range(i * self.K, (i + 1) * self.K)
                for i in range(self.anchor_count)}

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.rotations[i],
                        float(self.opacities[i]), self.colors[i],
                        GaussianKind(int(self.kinds[i])))

    def copy(self) -> "GaussianMap":
        return GaussianMap(
            self.positions.copy(), self.scales.copy(), self.rotations.copy(),
            self.opacities.copy(), self.colors.copy(), self.kinds.copy(),
            self.alive.copy(),
            None if self.anchor_positions is None else self.anchor_positions.copy(),
            self.K, self.stage_id)

    def to_canonical_bytes(self) -> bytes:
        """Deterministic byte serialization used for map equality checks."""
        import struct
        parts = [b"GMAP",
                 struct.pack("<qqi", self.size, self.anchor_count, self.K),
                 struct.pack("<q", self.stage_id)]
        for arr in (self.positions, self.scales, self.rotations,
                    self.opacities, self.colors):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.kinds, dtype="<u1").tobytes())
        parts.append(np.ascontiguousarray(self.alive, dtype="<u1").tobytes())
        if self.anchor_positions is not None:
            parts.append(np.ascontiguousarray(self.anchor_positions,
                                              dtype="<f8").tobytes())
        return b"".join(parts)


def empty_map(stage_id: int = 0) -> GaussianMap:
    z = np.zeros((0, 3))
    return GaussianMap(z, z.copy(), np.zeros((0, 4)), np.zeros(0),
                       z.copy(), np.zeros(0, dtype=np.uint8),
                       np.zeros(0, dtype=bool), None, 0, stage_id)


def map_from_gaussians(gaussians: list[Gaussian], stage_id: int = 0,
                       anchor_positions: np.ndarray | None = None,
                       K: int = 0) -> GaussianMap:
    n = len(gaussians)
    m = GaussianMap(
        np.array([g.position for g in gaussians]).reshape(n, 3),
        np.array([g.scale for g in gaussians]).reshape(n, 3),
        np.array([g.rotation for g in gaussians]).reshape(n, 4),
        np.array([g.opacity for g in gaussians], dtype=np.float64),
        np.array([g.color for g in gaussians]).reshape(n, 3),
        np.array([g.kind.value for g in gaussians], dtype=np.uint8),
        np.ones(n, dtype=bool),
        anchor_positions, K, stage_id)
    return m


def slice_anchors(m: GaussianMap, start: int, stop: int) -> GaussianMap:
    """Sub-map holding anchors [start, stop) with their gaussian slots."""
    if m.anchor_positions is None:
        raise ValueError("map has no anchors")
    lo, hi = start * m.K, stop * m.K
    return GaussianMap(
        m.positions[lo:hi].copy(), m.scales[lo:hi].copy(),
        m.rotations[lo:hi].copy(), m.opacities[lo:hi].copy(),
        m.colors[lo:hi].copy(), m.kinds[lo:hi].copy(), m.alive[lo:hi].copy(),
        m.anchor_positions[start:stop].copy(), m.K, m.stage_id)


def normalize_map_params(m: GaussianMap) -> None:
    """Renormalize quaternions, clamp opacity/color/scale, re-zero flat axes.

    In-place repair used after any bulk parameter mutation.
    """
    m.rotations[:] = quat_normalize(m.rotations)
    np.clip(m.opacities, 0.0, 1.0, out=m.opacities)
    np.clip(m.colors, 0.0, 1.0, out=m.colors)
    np.clip(m.scales, 0.0, None, out=m.scales)
    flat = m.kinds == GaussianKind.FLAT2D.value
    if np.any(flat):
        idx = np.argmin(m.scales[flat], axis=1)
        rows = np.nonzero(flat)[0]
        m.scales[rows, idx] = 0.0
