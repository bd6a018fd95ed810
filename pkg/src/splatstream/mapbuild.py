"""Posed RGB-D frames -> point clouds, voxel anchors, maps.

The anchor grid snaps raw point coordinates to the nearest multiple of the
voxel size (round-to-nearest per component). Global-map gaussians start as
2D flats with PCA normals and conservative defaults (opacity 0.1); the
auxiliary virtual map keeps opacity-1 isotropic gaussians whose scale
follows local point density (mean distance to the 3 nearest neighbors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from splatstream.core import (
    CameraPose,
    FrameRGBD,
    GaussianKind,
    GaussianMap,
    lift_pixel,
    matrix_to_quat,
    project,
)

DEFAULT_EPSILON = 0.03
DEFAULT_K = 10
DEFAULT_STRIDE = 4
INITIAL_OPACITY = 0.1
SEEN_MIN_DEPTH = 0.05
DENSITY_NEIGHBORS = 3


@dataclass(frozen=True)
class ColoredPointCloud:
    points: np.ndarray
    colors: np.ndarray
    source_frame: np.ndarray

    def __post_init__(self):
        if not (len(self.points) == len(self.colors) == len(self.source_frame)):
            raise ValueError("point/color/source lengths disagree")
        if np.any(~np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class VoxelGrid:
    epsilon: float
    occupied: frozenset

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def anchor_positions(self) -> np.ndarray:
        """Grid cell centers in meters, in sorted (deterministic) order."""
        if not self.occupied:
            return np.zeros((0, 3))
        cells = np.array(sorted(self.occupied), dtype=np.float64)
        return cells * self.epsilon


def merge_clouds(clouds: list[ColoredPointCloud]) -> ColoredPointCloud:
    if not clouds:
        return ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                                 np.zeros(0, dtype=np.int64))
    return ColoredPointCloud(
        np.concatenate([c.points for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
        np.concatenate([c.source_frame for c in clouds]))


def lift_rgbd(frame: FrameRGBD, stride: int = DEFAULT_STRIDE,
              frame_index: int = 0) -> ColoredPointCloud:
    """Back-project every stride-th valid-depth pixel into world space."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = frame.depth.shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    ys, xs = ys.ravel(), xs.ravel()
    z = frame.depth[ys, xs]
    ok = z > 0
    ys, xs, z = ys[ok], xs[ok], z[ok]
    cam = frame.pose
    pc = np.stack([(xs - cam.cx) / cam.fx * z,
                   (ys - cam.cy) / cam.fy * z, z], axis=1)
    world = cam.camera_to_world(pc)
    return ColoredPointCloud(world, frame.color[ys, xs],
                             np.full(len(world), frame_index, dtype=np.int64))


def voxelize(cloud: ColoredPointCloud, epsilon: float = DEFAULT_EPSILON) -> VoxelGrid:
    """Snap points to the epsilon grid; the occupied set is the anchors."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if len(cloud) == 0:
        return VoxelGrid(epsilon, frozenset())
    cells = np.round(cloud.points / epsilon).astype(np.int64)
    return VoxelGrid(epsilon, frozenset(map(tuple, cells)))


def _voxel_membership(cloud: ColoredPointCloud, epsilon: float):
    """Map each occupied cell tuple -> indices of the points inside it."""
    cells = np.round(cloud.points / epsilon).astype(np.int64)
    buckets: dict[tuple, list] = {}
    for i, cell in enumerate(map(tuple, cells)):
        buckets.setdefault(cell, []).append(i)
    return buckets


def _pca_frame(points: np.ndarray):
    """(in-plane axis 1, in-plane axis 2, normal, stddevs) from a local PCA."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    eigval, eigvec = np.linalg.eigh(cov)          # ascending
    normal = eigvec[:, 0]
    e1, e2 = eigvec[:, 2], eigvec[:, 1]
    if np.dot(np.cross(e1, e2), normal) < 0:      # keep right-handed
        e2 = -e2
    stds = np.sqrt(np.maximum(eigval[::-1], 0.0))  # descending
    return e1, e2, normal, stds


def _frame_camera_centers(frames: list[FrameRGBD] | None):
    if not frames:
        return None
    return np.array([f.pose.translation for f in frames])


def init_anchors(grid: VoxelGrid, cloud: ColoredPointCloud,
                 K: int = DEFAULT_K,
                 frames: list[FrameRGBD] | None = None,
                 scale_floor_fraction: float = 0.45):
    """Initialize K flat gaussians per anchor from the voxel's points.

    Returns a list of (AnchorFeature, list[Gaussian]) in the grid's
    deterministic anchor order. Offsets are gaussian position minus anchor
    position; color is the voxel mean; opacity starts at INITIAL_OPACITY;
    the flat normal comes from a local PCA, falling back to the mean
    viewing direction when the voxel holds fewer than 3 points.
    """
    from splatstream.core import AnchorFeature, Gaussian

    if K < 1:
        raise ValueError("K must be >= 1")
    buckets = _voxel_membership(cloud, grid.epsilon)
    cam_centers = _frame_camera_centers(frames)
    eps = grid.epsilon
    out = []
    for cell in sorted(grid.occupied):
        idx = buckets.get(cell, [])
        anchor = np.asarray(cell, dtype=np.float64) * eps
        if not idx:
            continue
        pts = cloud.points[idx]
        cols = cloud.colors[idx]
        mean_color = np.clip(cols.mean(axis=0), 0.0, 1.0)

        if len(idx) >= 3:
            e1, e2, normal, stds = _pca_frame(pts)
            in_plane = np.maximum(stds[:2], scale_floor_fraction * eps)
        else:
            # too few points for a plane fit: normal from viewing direction
            if cam_centers is not None:
                src = cloud.source_frame[idx]
                viewdirs = pts - cam_centers[src]
                mean_dir = viewdirs.mean(axis=0)
                n = np.linalg.norm(mean_dir)
                normal = -mean_dir / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
            else:
                normal = np.array([0.0, 0.0, 1.0])
            e1 = np.cross(normal, [1.0, 0.0, 0.0])
            if np.linalg.norm(e1) < 1e-9:
                e1 = np.cross(normal, [0.0, 1.0, 0.0])
            e1 = e1 / np.linalg.norm(e1)
            e2 = np.cross(normal, e1)
            in_plane = np.full(2, scale_floor_fraction * eps)
        if cam_centers is not None and len(idx) >= 3:
            # orient the PCA normal toward the observing cameras
            src = cloud.source_frame[idx]
            toward = (cam_centers[src] - pts).mean(axis=0)
            if np.dot(normal, toward) < 0:
                normal = -normal
        rot = matrix_to_quat(np.stack([e1, e2, normal], axis=1))
        scale = np.array([in_plane[0], in_plane[1], 0.0])

        # deterministic choice of K member points (cycled when short)
        order = np.array(idx)[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
        chosen = [order[int(np.floor(j * len(order) / K))] if len(order) >= K
                  else order[j % len(order)] for j in range(K)]
        gaussians = [Gaussian(cloud.points[c], scale, rot, INITIAL_OPACITY,
                              mean_color, GaussianKind.FLAT2D) for c in chosen]
        feat = AnchorFeature(anchor,
                             F_s=np.tile(scale, (K, 1)),
                             F_o=np.array([g.position - anchor for g in gaussians]))
        out.append((feat, gaussians))
    return out


def assemble_map(anchors, stage_id: int = 0) -> GaussianMap:
    """Pack init_anchors output into an anchored struct-of-arrays map."""
    from splatstream.core import empty_map, map_from_gaussians

    if not anchors:
        return empty_map(stage_id)
    K = anchors[0][0].K
    gaussians = [g for _, gs in anchors for g in gs]
    anchor_pos = np.array([f.anchor_position for f, _ in anchors])
    return map_from_gaussians(gaussians, stage_id, anchor_pos, K)


def build_global_map(frames: list[FrameRGBD], epsilon: float = DEFAULT_EPSILON,
                     K: int = DEFAULT_K, stride: int = DEFAULT_STRIDE,
                     stage_id: int = 0) -> GaussianMap:
    """Lift -> voxelize -> init anchors -> anchored map, in one call."""
    cloud = merge_clouds([lift_rgbd(f, stride, i) for i, f in enumerate(frames)])
    grid = voxelize(cloud, epsilon)
    return assemble_map(init_anchors(grid, cloud, K, frames), stage_id)


def build_virtual_map(frames: list[FrameRGBD],
                      stride: int = DEFAULT_STRIDE) -> GaussianMap:
    """Opacity-1 isotropic surfel map lifted directly from the RGB-D input."""
    if not frames:
        raise ValueError("need at least one frame")
    cloud = merge_clouds([lift_rgbd(f, stride, i) for i, f in enumerate(frames)])
    n = len(cloud)
    if n < DENSITY_NEIGHBORS + 1:
        raise ValueError("insufficient data: need at least 4 lifted points")
    tree = cKDTree(cloud.points)
    dist, _ = tree.query(cloud.points, k=DENSITY_NEIGHBORS + 1)
    scale = dist[:, 1:].mean(axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianMap(cloud.points.copy(),
                       np.repeat(scale[:, None], 3, axis=1),
                       rot,
                       np.ones(n),
                       np.clip(cloud.colors, 0.0, 1.0),
                       np.full(n, GaussianKind.ISOTROPIC3D.value, np.uint8),
                       np.ones(n, dtype=bool))


def classify_seen(grid: VoxelGrid, frames: list[FrameRGBD]) -> dict[tuple, bool]:
    """Per-anchor visibility: seen iff the anchor center projects inside at
    least one frame with camera depth within [SEEN_MIN_DEPTH, surface + eps].
    """
    eps = grid.epsilon
    cells = sorted(grid.occupied)
    seen = {cell: False for cell in cells}
    if not cells or not frames:
        return seen
    centers = np.array(cells, dtype=np.float64) * eps
    for frame in frames:
        cam = frame.pose
        pc = cam.world_to_camera(centers)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / z + cam.cx
            v = cam.fy * pc[:, 1] / z + cam.cy
        ok = (z >= SEEN_MIN_DEPTH) & (u >= 0) & (u < cam.width) \
            & (v >= 0) & (v < cam.height)
        if not np.any(ok):
            continue
        ui = np.clip(np.round(u[ok]).astype(int), 0, cam.width - 1)
        vi = np.clip(np.round(v[ok]).astype(int), 0, cam.height - 1)
        surf = frame.depth[vi, ui]
        vis = z[ok] <= surf + eps
        for cell_i, good in zip(np.nonzero(ok)[0][vis], np.ones(int(vis.sum()))):
            seen[cells[cell_i]] = True
    return seen
