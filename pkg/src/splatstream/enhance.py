"""Pseudo ground truth from the virtual map.

Extrapolated poses are rejection-sampled against a closeness predicate
(every input pose must differ by >= 10 degrees of rotation or >= 0.3 m of
translation). Rendered virtual views get holes detected from the opacity
buffer, filled by harmonic diffusion, and weighted by a per-pixel
confidence regressed from handcrafted image features against the
(tau - L1) / tau reliability target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, uniform_filter

from splatstream.core import CameraPose, FrameRGBD, GaussianMap, look_at_quaternion, pose_distance
from splatstream.render import RenderConfig, RenderedViews, render

MIN_ROTATION_DEG = 10.0
MIN_TRANSLATION_M = 0.3
HOLE_THRESHOLD = 0.5
UNRECOVERABLE_OPACITY = 0.1
RIDGE_LAMBDA = 1e-3
TAU_FLOOR = 1e-6


@dataclass
class PseudoGT:
    """Hole-filled virtual render plus per-pixel confidence for one pose."""

    pose: CameraPose
    image: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        h, w = self.depth.shape
        if self.image.shape != (h, w, 3) or self.confidence.shape != (h, w):
            raise ValueError("pseudo-GT buffer dimensions disagree")
        if self.confidence.min() < 0 or self.confidence.max() > 1:
            raise ValueError("confidence outside [0,1]")


def is_far_from_inputs(pose: CameraPose, input_poses: list[CameraPose],
                       min_rotation_deg: float = MIN_ROTATION_DEG,
                       min_translation_m: float = MIN_TRANSLATION_M) -> bool:
    """The extrapolation predicate: far from EVERY input pose."""
    for ref in input_poses:
        ang, trans = pose_distance(pose, ref)
        if ang < min_rotation_deg and trans < min_translation_m:
            return False
    return True


def sample_virtual_poses(scene_bounds, input_poses: list[CameraPose],
                         n: int, rng_seed: int,
                         max_attempts_factor: int = 100):
    """Rejection-sample n extrapolated poses inside the scene bounds.

    Returns (poses, exhausted) where exhausted flags an early stop after
    100*n failed attempts. Deterministic in the seed; intrinsics are
    copied from the first input pose.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not input_poses:
        raise ValueError("need at least one input pose")
    lo = np.asarray(scene_bounds[0], np.float64)
    hi = np.asarray(scene_bounds[1], np.float64)
    ref = input_poses[0]
    rng = np.random.default_rng(rng_seed)
    poses = []
    attempts = 0
    limit = max_attempts_factor * n
    while len(poses) < n and attempts < limit:
        attempts += 1
        eye = rng.uniform(lo, hi)
        target = rng.uniform(lo, hi)
        if np.linalg.norm(target - eye) < 1e-3:
            continue
        # keep the view direction mostly horizontal so look-at stays stable
        target = np.array([target[0], target[1],
                           eye[2] + 0.3 * (target[2] - eye[2])])
        try:
            quat = look_at_quaternion(eye, target)
        except ValueError:
            continue
        cand = CameraPose(quat, eye, ref.fx, ref.fy, ref.cx, ref.cy,
                          ref.width, ref.height)
        if is_far_from_inputs(cand, input_poses):
            poses.append(cand)
    return poses, len(poses) < n


def detect_holes(opacity: np.ndarray, threshold: float = HOLE_THRESHOLD) -> np.ndarray:
    """Mask of pixels whose accumulated opacity falls below the threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0,1)")
    return np.asarray(opacity, np.float64) < threshold


def inpaint(image: np.ndarray, mask: np.ndarray, max_iters: int = 4000,
            tol: float = 1e-4) -> np.ndarray:
    """Fill masked pixels with the harmonic (4-neighbor Laplace) interpolant.

    Unmasked pixels pass through bit-identical; masked pixels iterate
    Jacobi averaging until every masked pixel sits within tol of its
    neighbor mean (image borders use the available neighbors).
    """
    img = np.asarray(image, np.float64)
    mask = np.asarray(mask, bool)
    if mask.shape != img.shape[:2]:
        raise ValueError("mask must match the image plane")
    if mask.all():
        raise ValueError("mask covers the full image: no boundary data")
    if not mask.any():
        return img.copy()

    single = img.ndim == 2
    work = img[..., None].copy() if single else img.copy()
    # seed holes with the unmasked mean for faster settling
    seed = work[~mask].mean(axis=0)
    work[mask] = seed

    # border pixels have fewer neighbors
    counts = np.full(mask.shape, 4.0)
    counts[0, :] -= 1
    counts[-1, :] -= 1
    counts[:, 0] -= 1
    counts[:, -1] -= 1

    def neighbor_sum(buf):
        s = np.zeros_like(buf)
        s[1:, :] += buf[:-1, :]
        s[:-1, :] += buf[1:, :]
        s[:, 1:] += buf[:, :-1]
        s[:, :-1] += buf[:, 1:]
        return s

    for _ in range(max_iters):
        target = neighbor_sum(work) / counts[..., None]
        residual = np.max(np.abs(target[mask] - work[mask])) if mask.any() else 0
        work[mask] = target[mask]
        if residual <= tol * 0.5:
            break
    return work[..., 0] if single else work


def harmonic_residual(image: np.ndarray, mask: np.ndarray) -> float:
    """Max |p - mean(available neighbors)| over masked pixels."""
    img = np.asarray(image, np.float64)
    if img.ndim == 2:
        img = img[..., None]
    counts = np.full(mask.shape, 4.0)
    counts[0, :] -= 1
    counts[-1, :] -= 1
    counts[:, 0] -= 1
    counts[:, -1] -= 1
    s = np.zeros_like(img)
    s[1:, :] += img[:-1, :]
    s[:-1, :] += img[1:, :]
    s[:, 1:] += img[:, :-1]
    s[:, :-1] += img[:, 1:]
    res = np.abs(s / counts[..., None] - img)
    return float(res[mask].max()) if mask.any() else 0.0


# ---------------------------------------------------------------------------
# confidence
# ---------------------------------------------------------------------------

def per_pixel_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.mean(np.abs(np.asarray(a, np.float64)
                          - np.asarray(b, np.float64)), axis=-1)


def compute_confidence_target(calib_render: np.ndarray, observed: np.ndarray,
                              tau: float) -> np.ndarray:
    """(tau - L1) / tau clamped to [0,1]: 1 where accurate, 0 at tau error."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    err = per_pixel_l1(calib_render, observed)
    return np.clip((tau - err) / tau, 0.0, 1.0)


def confidence_features(views: RenderedViews) -> np.ndarray:
    """Handcrafted per-pixel features: local 5x5 color mean and variance,
    rendered opacity, depth-gradient magnitude, distance to the nearest
    hole. Shape (H, W, 5)."""
    gray = views.color.mean(axis=-1)
    local_mean = uniform_filter(gray, size=5, mode="nearest")
    local_sq = uniform_filter(gray * gray, size=5, mode="nearest")
    local_var = np.maximum(local_sq - local_mean ** 2, 0.0)
    gy, gx = np.gradient(views.depth)
    grad_mag = np.hypot(gx, gy)
    holes = detect_holes(views.opacity)
    dist_to_hole = distance_transform_edt(~holes) if holes.any() \
        else np.full(gray.shape, max(gray.shape))
    return np.stack([local_mean, local_var, views.opacity, grad_mag,
                     dist_to_hole], axis=-1)


@dataclass
class ConfidencePredictor:
    """Ridge regression over confidence_features, plus the tau calibration."""

    weights: np.ndarray          # (n_features,)
    intercept: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive after fitting")


def fit_confidence_predictor(calib_pairs,
                             tau: float | None = None) -> ConfidencePredictor:
    """Fit the per-pixel reliability regressor from calibration pairs of
    (virtual render at an input pose, observed frame).

    tau defaults to the maximum per-pixel L1 over all pairs; pass an
    explicit value to calibrate against a different error ceiling.
    """
    if not calib_pairs:
        raise ValueError("need at least one calibration pair")
    if tau is None:
        tau = TAU_FLOOR
        for views, frame in calib_pairs:
            tau = max(tau, float(per_pixel_l1(views.color, frame.color).max()))
    elif tau <= 0:
        raise ValueError("tau must be positive")
    feats = []
    targets = []
    for views, frame in calib_pairs:
        feats.append(confidence_features(views).reshape(-1, 5))
        targets.append(compute_confidence_target(views.color, frame.color,
                                                 tau).ravel())
    x = np.concatenate(feats)
    y = np.concatenate(targets)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    usable = scale > 1e-12
    if not usable.any():
        return ConfidencePredictor(np.zeros(5), float(y.mean()), mean,
                                   np.ones(5), tau)
    xs = np.where(usable, (x - mean) / np.where(usable, scale, 1.0), 0.0)
    a = xs.T @ xs + RIDGE_LAMBDA * len(y) * np.eye(5)
    w = np.linalg.solve(a, xs.T @ (y - y.mean()))
    w[~usable] = 0.0
    return ConfidencePredictor(w, float(y.mean()), mean,
                               np.where(usable, scale, 1.0), tau)


def predict_confidence(pred: ConfidencePredictor,
                       views: RenderedViews) -> np.ndarray:
    """Per-pixel confidence in [0,1] for a rendered view."""
    x = confidence_features(views).reshape(-1, 5)
    xs = (x - pred.feature_mean) / pred.feature_scale
    raw = xs @ pred.weights + pred.intercept
    return np.clip(raw.reshape(views.opacity.shape), 0.0, 1.0)


# ---------------------------------------------------------------------------
# pseudo ground truth
# ---------------------------------------------------------------------------

def make_pseudo_gt(virtual_map: GaussianMap, poses: list[CameraPose],
                   predictor: ConfidencePredictor,
                   hole_threshold: float = HOLE_THRESHOLD,
                   config: RenderConfig | None = None,
                   inpaint_iters: int = 800, inpaint_tol: float = 1e-3):
    """Render -> hole detect -> inpaint -> confidence, per pose.

    Poses whose render is entirely hole (nothing to inpaint from) are
    skipped; returns (pseudo_list, skipped_count). Confidence is forced to
    zero on filled pixels whose opacity was below the unrecoverable bound.
    """
    if virtual_map.size == 0:
        raise ValueError("virtual map is empty")
    cfg = config if config is not None else RenderConfig()
    out = []
    skipped = 0
    for pose in poses:
        views = render(virtual_map, pose, config=cfg)
        holes = detect_holes(views.opacity, hole_threshold)
        if holes.all():
            skipped += 1
            continue
        image = inpaint(views.color, holes, inpaint_iters, inpaint_tol) \
            if holes.any() else views.color.copy()
        confidence = predict_confidence(predictor, views)
        unrecoverable = holes & (views.opacity < UNRECOVERABLE_OPACITY)
        confidence = np.where(unrecoverable, 0.0, confidence)
        out.append(PseudoGT(pose, np.clip(image, 0.0, 1.0), views.depth,
                            confidence))
    return out, skipped
