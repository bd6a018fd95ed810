"""Image/geometry quality metrics and deterministic loss evaluators.

PSNR works on [0,1] images and caps at 99 dB near zero error. SSIM is the
standard 11x11 Gaussian-window variant (sigma 1.5, k1=0.01, k2=0.03) over
valid windows only, averaged across channels. Depth errors are meters
internally; the harness converts to centimeters for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from splatstream.core import CameraPose, FrameRGBD, GaussianMap
from splatstream.render import RenderConfig, RenderedViews, render

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EDGE_FILTER_DEFAULT = 0.1     # meters of depth error that invalidate normals


@dataclass(frozen=True)
class LossWeights:
    """Weights of the training/total losses; entropy weight for updates."""

    w_obs: float = 1.0
    w_ssim: float = 0.05
    w_reg: float = 0.1
    w_depth: float = 1.0
    w_normal: float = 0.1
    w_total_t: float = 1.0
    w_total_v: float = 0.1
    lambda_q: float = 0.0025

    def __post_init__(self):
        if any(getattr(self, f) < 0 for f in
               ("w_obs", "w_ssim", "w_reg", "w_depth", "w_normal",
                "w_total_t", "w_total_v", "lambda_q")):
            raise ValueError("loss weights must be >= 0")


def l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return float(np.mean(np.abs(a - b)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    half = (size - 1) / 2
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode correlation with a 1-D window per axis."""
    from scipy.ndimage import correlate1d

    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    half = (len(window) - 1) // 2
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    w = _gaussian_window()
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    aa = _filter_valid(a * a, w) - mu_a ** 2
    bb = _filter_valid(b * b, w) - mu_b ** 2
    ab = _filter_valid(a * b, w) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (aa + bb + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        return _ssim_single(a, b)
    return float(np.mean([_ssim_single(a[..., c], b[..., c])
                          for c in range(a.shape[-1])]))


def depth_l1(da: np.ndarray, db: np.ndarray, valid_mask: np.ndarray) -> float:
    da, db = np.asarray(da, np.float64), np.asarray(db, np.float64)
    valid_mask = np.asarray(valid_mask, bool)
    if da.shape != db.shape or valid_mask.shape != da.shape:
        raise ValueError("shape mismatch")
    if not valid_mask.any():
        raise ValueError("empty valid mask")
    return float(np.mean(np.abs(da - db)[valid_mask]))


# ---------------------------------------------------------------------------
# geometry losses
# ---------------------------------------------------------------------------

class NormalLossResult(NamedTuple):
    loss: float
    valid_pixels: int


def depth_normals(depth: np.ndarray, cam: CameraPose) -> np.ndarray:
    """Camera-facing unit normals from central differences of the
    back-projected depth map; zero vectors mark invalid pixels."""
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    z = depth
    pc = np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z],
                  axis=-1)
    world = pc.reshape(-1, 3) @ cam.rotation_matrix().T + cam.translation
    world = world.reshape(h, w, 3)
    normals = np.zeros((h, w, 3))
    du = world[1:-1, 2:] - world[1:-1, :-2]
    dv = world[2:, 1:-1] - world[:-2, 1:-1]
    n = np.cross(du, dv)
    length = np.linalg.norm(n, axis=-1)
    ok = (z[1:-1, 1:-1] > 0) & (z[1:-1, 2:] > 0) & (z[1:-1, :-2] > 0) \
        & (z[2:, 1:-1] > 0) & (z[:-2, 1:-1] > 0) & (length > 1e-12)
    n = np.where(ok[..., None], n / np.where(ok, length, 1.0)[..., None], 0.0)
    # orient toward the camera
    toward = cam.translation - world[1:-1, 1:-1]
    flip = np.where(np.sum(n * toward, axis=-1) < 0, -1.0, 1.0)
    normals[1:-1, 1:-1] = n * np.where(ok, flip, 0.0)[..., None]
    return normals


def normal_loss(rendered: RenderedViews, gt_depth: np.ndarray,
                cam: CameraPose,
                edge_threshold: float = EDGE_FILTER_DEFAULT) -> NormalLossResult:
    """Mean (1 - <n_rendered, n_gt>) over edge-filtered valid pixels.

    Pixels whose rendered depth misses the ground truth by more than the
    edge threshold are excluded, as are pixels lacking a valid normal on
    either side. Returns loss 0 with valid_pixels == 0 when nothing
    qualifies.
    """
    if edge_threshold <= 0:
        raise ValueError("edge threshold must be positive")
    gt_n = depth_normals(gt_depth, cam)
    gt_ok = np.linalg.norm(gt_n, axis=-1) > 0.5
    r_ok = rendered.normal_valid
    agree = np.abs(rendered.depth - gt_depth) <= edge_threshold
    mask = gt_ok & r_ok & agree & (gt_depth > 0)
    if not mask.any():
        return NormalLossResult(0.0, 0)
    dots = np.sum(rendered.normal * gt_n, axis=-1)[mask]
    return NormalLossResult(float(np.mean(1.0 - dots)), int(mask.sum()))


def scale_regularization(m: GaussianMap) -> float:
    """Mean product of the two largest scale components (flat-area proxy)."""
    if m.size == 0 or not m.alive.any():
        return 0.0
    s = np.sort(m.scales[m.alive], axis=1)
    return float(np.mean(s[:, 2] * s[:, 1]))


def prune_by_opacity(m: GaussianMap, threshold: float) -> GaussianMap:
    """Mark slots with opacity below the threshold dead; ordering intact."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0,1]")
    out = m.copy()
    out.alive = out.alive & (out.opacities >= threshold)
    return out


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

def virtual_loss(global_render: np.ndarray, pseudo) -> float:
    """Mean over pixels of per-pixel L1 times the pseudo-GT confidence."""
    img = np.asarray(global_render, np.float64)
    if img.shape != pseudo.image.shape:
        raise ValueError("shape mismatch")
    per_pixel = np.mean(np.abs(img - pseudo.image), axis=-1)
    return float(np.mean(per_pixel * pseudo.confidence))


def training_loss(m: GaussianMap, frames: list[FrameRGBD],
                  weights: LossWeights,
                  config: RenderConfig | None = None):
    """Weighted sum of observation losses over the input frames.

    Returns (total, breakdown) where the breakdown maps term name to its
    weighted contribution and sums to the total.
    """
    if not frames:
        raise ValueError("need at least one frame")
    cfg = config if config is not None else RenderConfig()
    terms = {"l1": 0.0, "ssim": 0.0, "depth": 0.0, "normal": 0.0}
    for frame in frames:
        out = render(m, frame.pose, config=cfg)
        terms["l1"] += l1(out.color, frame.color)
        terms["ssim"] += 1.0 - ssim(out.color, frame.color)
        valid = frame.depth > 0
        if valid.any():
            terms["depth"] += depth_l1(out.depth, frame.depth, valid)
        terms["normal"] += normal_loss(out, frame.depth, frame.pose).loss
    nf = len(frames)
    breakdown = {
        "l1": weights.w_obs * terms["l1"] / nf,
        "ssim": weights.w_ssim * terms["ssim"] / nf,
        "reg": weights.w_reg * scale_regularization(m),
        "depth": weights.w_depth * terms["depth"] / nf,
        "normal": weights.w_normal * terms["normal"] / nf,
    }
    return sum(breakdown.values()), breakdown


def total_loss(m: GaussianMap, frames: list[FrameRGBD], pseudo_set,
               weights: LossWeights,
               config: RenderConfig | None = None) -> float:
    """w_t * training loss + w_v * mean virtual loss over the pseudo set."""
    cfg = config if config is not None else RenderConfig()
    t_loss, _ = training_loss(m, frames, weights, cfg)
    value = weights.w_total_t * t_loss
    if pseudo_set:
        v = [virtual_loss(render(m, p.pose, config=cfg).color, p)
             for p in pseudo_set]
        value += weights.w_total_v * float(np.mean(v))
    return value


def update_objective(bits_estimate: float, distortion: float,
                     lambda_q: float) -> float:
    """Rate-distortion objective for map updates."""
    return lambda_q * bits_estimate + distortion
