"""Map construction tests: lifting, voxelization, anchors, virtual map."""

import numpy as np
import pytest

from splatstream.core import CameraPose, FrameRGBD, GaussianKind, project
from splatstream.mapbuild import (
    ColoredPointCloud,
    build_virtual_map,
    classify_seen,
    init_anchors,
    lift_rgbd,
    merge_clouds,
    voxelize,
)
from splatstream.render import render


def make_cam(w=20, h=16, t=(0, 0, 0), q=(1, 0, 0, 0), f=20.0):
    return CameraPose(np.asarray(q, float), np.asarray(t, float),
                      f, f, w / 2, h / 2, w, h)


def flat_frame(cam, depth_value=2.0, color=(0.5, 0.5, 0.5)):
    h, w = cam.height, cam.width
    color_img = np.tile(np.asarray(color, float), (h, w, 1))
    depth = np.full((h, w), depth_value)
    return FrameRGBD(color_img, depth, cam)


def cloud_of(points, colors=None):
    points = np.asarray(points, float)
    if colors is None:
        colors = np.zeros_like(points)
    return ColoredPointCloud(points, np.asarray(colors, float),
                             np.zeros(len(points), dtype=np.int64))


# ---------------------------------------------------------------------------
# lift_rgbd
# ---------------------------------------------------------------------------

def test_lift_center_pixel():
    cam = make_cam()
    frame = flat_frame(cam, depth_value=2.0, color=(0.1, 0.6, 0.9))
    cloud = lift_rgbd(frame, stride=1)
    # pixel at the principal point back-projects onto the optical axis
    center = np.nonzero((np.abs(cloud.points[:, 0]) < 1e-12)
                        & (np.abs(cloud.points[:, 1]) < 1e-12))[0]
    assert len(center) == 1
    assert np.allclose(cloud.points[center[0]], [0, 0, 2.0])
    assert np.allclose(cloud.colors[center[0]], [0.1, 0.6, 0.9])


def test_lift_invalid_depth_skipped():
    cam = make_cam()
    frame = FrameRGBD(np.zeros((16, 20, 3)), np.zeros((16, 20)), cam)
    assert len(lift_rgbd(frame, stride=1)) == 0


def test_lift_project_round_trip():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    cam = make_cam(w=64, h=48, f=50.0, t=rng.normal(size=3),
                   q=q / np.linalg.norm(q))
    depth = rng.uniform(0.5, 5.0, (48, 64))
    frame = FrameRGBD(rng.uniform(0, 1, (48, 64, 3)), depth, cam)
    cloud = lift_rgbd(frame, stride=1)
    sel = rng.choice(len(cloud), 200, replace=False)
    for i in sel:
        pr = project(cloud.points[i], cam)
        iy, ix = divmod(i, 64)
        assert abs(pr.u - ix) < 1e-6 and abs(pr.v - iy) < 1e-6


def test_lift_stride_counts():
    cam = make_cam()
    frame = flat_frame(cam)
    assert len(lift_rgbd(frame, stride=4)) == (16 // 4) * (20 // 4)
    with pytest.raises(ValueError):
        lift_rgbd(frame, stride=0)


# ---------------------------------------------------------------------------
# voxelize
# ---------------------------------------------------------------------------

def test_voxelize_rounding_example():
    grid = voxelize(cloud_of([[0.014, -0.016, 0.0]]), 0.03)
    assert grid.anchor_positions().tolist() == [[0.0, -0.03, 0.0]]


def test_voxelize_grid_point_unchanged():
    grid = voxelize(cloud_of([[0.06, -0.09, 0.12]]), 0.03)
    assert np.allclose(grid.anchor_positions(), [[0.06, -0.09, 0.12]])


def test_voxelize_idempotent():
    rng = np.random.default_rng(1)
    cloud = cloud_of(rng.uniform(-1, 1, (500, 3)))
    g1 = voxelize(cloud, 0.03)
    g2 = voxelize(cloud_of(g1.anchor_positions()), 0.03)
    assert g1.occupied == g2.occupied


def test_voxelize_quantization_bound():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-2, 2, (10_000, 3))
    grid = voxelize(cloud_of(pts), 0.03)
    anchors = grid.anchor_positions()
    cells = np.round(pts / 0.03) * 0.03
    assert np.max(np.abs(pts - cells)) <= 0.015 + 1e-12
    occupied = set(map(tuple, np.round(pts / 0.03).astype(np.int64)))
    assert occupied == set(grid.occupied)
    assert len(anchors) <= len(pts)


def test_voxelize_permutation_invariant():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (300, 3))
    a = voxelize(cloud_of(pts), 0.05)
    b = voxelize(cloud_of(pts[rng.permutation(300)]), 0.05)
    assert a.occupied == b.occupied


# ---------------------------------------------------------------------------
# init_anchors
# ---------------------------------------------------------------------------

def test_init_single_point_single_gaussian():
    cloud = cloud_of([[0.01, 0.0, 0.0]], [[0.3, 0.6, 0.9]])
    grid = voxelize(cloud, 0.03)
    anchors = init_anchors(grid, cloud, K=1)
    assert len(anchors) == 1
    feat, gaussians = anchors[0]
    assert len(gaussians) == 1
    assert np.allclose(gaussians[0].position, [0.01, 0.0, 0.0])
    assert np.allclose(gaussians[0].color, [0.3, 0.6, 0.9])
    assert np.allclose(feat.F_o[0], gaussians[0].position - feat.anchor_position)


def test_init_planar_pca_normal():
    rng = np.random.default_rng(4)
    pts = np.column_stack([rng.uniform(-0.01, 0.01, 30),
                           rng.uniform(-0.01, 0.01, 30),
                           np.zeros(30)])
    cloud = cloud_of(pts)
    grid = voxelize(cloud, 0.03)
    anchors = init_anchors(grid, cloud, K=2)
    for feat, gaussians in anchors:
        n = gaussians[0].normal()
        assert abs(abs(n[2]) - 1.0) < 1e-9  # +-(0,0,1)
        assert all(g.kind == GaussianKind.FLAT2D for g in gaussians)
        assert all(g.opacity == pytest.approx(0.1) for g in gaussians)


def test_init_k10_offsets_inside_inflated_bbox():
    rng = np.random.default_rng(5)
    eps = 0.03
    pts = rng.uniform(-0.015, 0.015, (20, 3))
    cloud = cloud_of(pts, rng.uniform(0, 1, (20, 3)))
    grid = voxelize(cloud, eps)
    for feat, gaussians in init_anchors(grid, cloud, K=10):
        assert len(gaussians) == 10
        members = np.round(pts / eps).astype(np.int64)
        cell = tuple(np.round(feat.anchor_position / eps).astype(np.int64))
        mask = np.all(members == cell, axis=1)
        lo = pts[mask].min(axis=0) - eps
        hi = pts[mask].max(axis=0) + eps
        for g in gaussians:
            assert np.all(g.position >= lo - 1e-12)
            assert np.all(g.position <= hi + 1e-12)
        assert feat.F_s.shape == (10, 3) and feat.F_o.shape == (10, 3)
        assert feat.validate_grid(eps)


def test_init_viewing_direction_fallback():
    cam = make_cam(t=(0, 0, -1.0))
    frame = flat_frame(cam)
    cloud = cloud_of([[0.0, 0.0, 1.0]], [[1, 0, 0]])
    grid = voxelize(cloud, 0.03)
    anchors = init_anchors(grid, cloud, K=1, frames=[frame])
    normal = anchors[0][1][0].normal()
    # single point: normal faces back along the viewing ray (toward camera)
    assert np.allclose(normal, [0, 0, -1], atol=1e-9)


# ---------------------------------------------------------------------------
# virtual map
# ---------------------------------------------------------------------------

def test_virtual_map_grid_scale_analytic():
    # regular 3D grid with spacing s: the 3 nearest neighbors of every
    # point are axis neighbors at exactly s
    s = 0.07
    g = np.arange(4) * s
    pts = np.array([[x, y, z] for x in g for y in g for z in g])
    cam = make_cam(w=8, h=8, f=8.0)
    # bypass lifting: feed points via a fabricated frame is awkward, so
    # check the kNN rule through the public builder on a synthetic frame
    from splatstream.mapbuild import DENSITY_NEIGHBORS, cKDTree
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=DENSITY_NEIGHBORS + 1)
    assert np.allclose(dist[:, 1:].mean(axis=1), s, atol=1e-9)


def test_virtual_map_contract():
    cam = make_cam()
    frame = flat_frame(cam, color=(0.2, 0.4, 0.8))
    vm = build_virtual_map([frame], stride=2)
    assert np.all(vm.opacities == 1.0)
    assert np.all(vm.kinds == GaussianKind.ISOTROPIC3D.value)
    assert np.all(vm.rotations == np.tile([1, 0, 0, 0], (vm.size, 1)))
    assert np.all(vm.scales > 0) and np.all(np.isfinite(vm.scales))
    assert np.all(vm.scales[:, 0] == vm.scales[:, 1])
    out = render(vm, cam)
    assert out.opacity.max() > 0  # renders something from an input pose


def test_virtual_map_insufficient_points():
    cam = make_cam()
    depth = np.zeros((16, 20))
    depth[0, 0] = 1.0
    frame = FrameRGBD(np.zeros((16, 20, 3)), depth, cam)
    with pytest.raises(ValueError, match="insufficient"):
        build_virtual_map([frame], stride=1)


# ---------------------------------------------------------------------------
# classify_seen
# ---------------------------------------------------------------------------

def brute_force_seen(grid, frames):
    """Independent per-anchor per-frame scalar visibility test."""
    eps = grid.epsilon
    out = {}
    for cell in grid.occupied:
        center = np.asarray(cell, float) * eps
        seen = False
        for f in frames:
            pr = project(center, f.pose)
            if not pr.in_frustum or pr.z < 0.05:
                continue
            iy = min(max(int(round(pr.v)), 0), f.pose.height - 1)
            ix = min(max(int(round(pr.u)), 0), f.pose.width - 1)
            if pr.z <= f.depth[iy, ix] + eps:
                seen = True
                break
        out[cell] = seen
    return out


def test_classify_seen_front_and_behind():
    cam = make_cam()
    frame = flat_frame(cam, depth_value=3.0)
    cloud = cloud_of([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    grid = voxelize(cloud, 0.1)
    seen = classify_seen(grid, [frame])
    assert seen[(0, 0, 10)] is True or seen[(0, 0, 10)] == True  # noqa: E712
    assert not seen[(0, 0, -10)]


def test_classify_seen_occlusion():
    cam = make_cam()
    frame = flat_frame(cam, depth_value=1.0)  # surface at 1 m
    cloud = cloud_of([[0.0, 0.0, 2.0]])       # anchor behind the surface
    grid = voxelize(cloud, 0.1)
    assert not classify_seen(grid, [frame])[(0, 0, 20)]


def test_classify_seen_matches_brute_force():
    rng = np.random.default_rng(6)
    frames = []
    for _ in range(4):
        q = rng.normal(size=4)
        cam = make_cam(t=rng.uniform(-1, 1, 3), q=q / np.linalg.norm(q))
        depth = rng.uniform(0.5, 4.0, (16, 20))
        frames.append(FrameRGBD(rng.uniform(0, 1, (16, 20, 3)), depth, cam))
    cloud = cloud_of(rng.uniform(-2, 2, (300, 3)))
    grid = voxelize(cloud, 0.25)
    assert classify_seen(grid, frames) == brute_force_seen(grid, frames)
