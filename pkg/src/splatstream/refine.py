"""Color/opacity refinement with analytic gradients through alpha blending.

Geometry (positions, scales, rotations) stays frozen; the descent works on
the per-gaussian colors and opacities of the confidence-weighted image
objective

    O = sum_pixels conf * sum_ch rho(C_ch - target_ch)

with rho either squared error or the Charbonnier-smoothed L1. Gradients
come from a two-pass tape over the same splatting order the renderer uses:
the forward pass records each gaussian's footprint weights and incoming
transmittance, the backward pass walks the tape in reverse maintaining the
suffix color sum, so both partials are exact up to the transmittance
division (denominator floored at 1e-12, reachable only at alpha == 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from splatstream.core import FrameRGBD, GaussianMap
from splatstream.metrics import LossWeights
from splatstream.render import RenderConfig, _project_all, render

CHARBONNIER_EPS = 1e-6
DEFAULT_ITERS = 200
DEFAULT_STEP = 0.05
MAX_BACKTRACKS = 20


class ColorOpacityGradients(NamedTuple):
    colors: np.ndarray            # (N, 3)
    opacities: np.ndarray         # (N,)
    value: float
    color_weight: np.ndarray      # (N,) accumulated |dC/dc| mass
    opacity_weight: np.ndarray    # (N,) accumulated |dC/dalpha|*g mass


def _rho(err: np.ndarray, mode: str):
    if mode == "l2":
        return err ** 2, 2.0 * err
    if mode == "charbonnier":
        root = np.sqrt(err ** 2 + CHARBONNIER_EPS ** 2)
        return root - CHARBONNIER_EPS, err / root
    raise ValueError(f"unknown objective '{mode}'")


def image_objective(m: GaussianMap, cam, target_image, confidence=None,
                    objective: str = "charbonnier", background=(0, 0, 0),
                    config: RenderConfig | None = None) -> float:
    """Objective value alone (render + penalty), for line searches."""
    cfg = config if config is not None else RenderConfig()
    color = render(m, cam, background, cfg).color
    err = color - np.asarray(target_image, np.float64)
    rho, _ = _rho(err, objective)
    conf = np.ones(err.shape[:2]) if confidence is None \
        else np.asarray(confidence, np.float64)
    return float(np.sum(conf * rho.sum(axis=-1)))


def grad_color_opacity(m: GaussianMap, target_image, confidence, cam,
                       objective: str = "charbonnier", background=(0, 0, 0),
                       config: RenderConfig | None = None) -> ColorOpacityGradients:
    """Exact partials of the composite w.r.t. every color and opacity."""
    cfg = config if config is not None else RenderConfig()
    h, w = cam.height, cam.width
    bg = np.asarray(background, np.float64)
    target = np.asarray(target_image, np.float64)
    conf = np.ones((h, w)) if confidence is None \
        else np.asarray(confidence, np.float64)

    idx, mean2d, inv_cov, zs, sig_major, _, _ = _project_all(
        m, cam, cfg.degenerate_condition, cfg.z_near)

    color_acc = np.zeros((h, w, 3))
    transmit = np.ones((h, w))
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    tape = []
    for k in range(len(idx)):
        radius = cfg.footprint_sigma * sig_major[k]
        mu = mean2d[k]
        x0 = max(int(np.floor(mu[0] - radius)), 0)
        x1 = min(int(np.ceil(mu[0] + radius)) + 1, w)
        y0 = max(int(np.floor(mu[1] - radius)), 0)
        y1 = min(int(np.ceil(mu[1] + radius)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        tsub = transmit[y0:y1, x0:x1]
        if tsub.max() < cfg.min_transmittance:
            continue
        dx = xs[x0:x1] - mu[0]
        dy = ys[y0:y1] - mu[1]
        q = (inv_cov[k, 0] * dx[None, :] ** 2
             + 2.0 * inv_cov[k, 1] * dy[:, None] * dx[None, :]
             + inv_cov[k, 2] * dy[:, None] ** 2)
        g = np.exp(-0.5 * q)
        alpha = m.opacities[idx[k]] * g
        t_in = tsub.copy()
        color_acc[y0:y1, x0:x1] += (alpha * t_in)[:, :, None] * m.colors[idx[k]]
        transmit[y0:y1, x0:x1] = tsub * (1.0 - alpha)
        tape.append((int(idx[k]), (y0, y1, x0, x1), g, alpha, t_in))

    color = color_acc + transmit[:, :, None] * bg
    err = color - target
    rho, dgrad = _rho(err, objective)
    value = float(np.sum(conf * rho.sum(axis=-1)))
    resid = dgrad * conf[:, :, None]                # dO/dC per pixel/channel

    grad_c = np.zeros((m.size, 3))
    grad_o = np.zeros(m.size)
    w_c = np.zeros(m.size)
    w_o = np.zeros(m.size)
    suffix = transmit[:, :, None] * bg              # sum_{j>i} c a T + bg*T_N
    for i, (y0, y1, x0, x1), g, alpha, t_in in reversed(tape):
        r = resid[y0:y1, x0:x1]
        csub = conf[y0:y1, x0:x1]
        wgt = alpha * t_in
        grad_c[i] += np.einsum("yxc,yx->c", r, wgt)
        w_c[i] += float(np.einsum("yx,yx->", csub, wgt))
        s = suffix[y0:y1, x0:x1]
        one_minus = np.maximum(1.0 - alpha, 1e-12)
        dc_dalpha = (m.colors[i][None, None, :] * t_in[:, :, None]
                     - s / one_minus[:, :, None])
        grad_o[i] += float(np.einsum("yxc,yxc,yx->", r, dc_dalpha, g))
        w_o[i] += float(np.einsum("yxc,yx->",
                                  np.abs(dc_dalpha) * csub[:, :, None], g))
        suffix[y0:y1, x0:x1] = s + wgt[:, :, None] * m.colors[i]
    return ColorOpacityGradients(grad_c, grad_o, value, w_c, w_o)


# ---------------------------------------------------------------------------
# projected gradient descent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefineView:
    """One supervision view: a pose, a target image, optional confidence."""

    pose: object
    target: np.ndarray
    confidence: np.ndarray | None
    weight: float


def _views_from_inputs(frames, pseudo_set, weights: LossWeights):
    views = []
    if frames:
        wf = weights.w_total_t * weights.w_obs / len(frames)
        views += [RefineView(f.pose, f.color, None, wf) for f in frames]
    if pseudo_set:
        wp = weights.w_total_v / len(pseudo_set)
        views += [RefineView(p.pose, p.image, p.confidence, wp)
                  for p in pseudo_set]
    return views


def _objective(m, views, objective, config):
    return sum(v.weight * image_objective(m, v.pose, v.target, v.confidence,
                                          objective, config=config)
               for v in views)


def refine_map(m: GaussianMap, frames: list[FrameRGBD], pseudo_set,
               weights: LossWeights | None = None,
               iters: int = DEFAULT_ITERS, step_size: float = DEFAULT_STEP,
               objective: str = "charbonnier",
               config: RenderConfig | None = None):
    """Projected gradient descent on colors and opacities.

    Returns (refined map, loss trace). The trace starts at the initial
    objective and is non-increasing: each step is accepted only if it does
    not increase the objective, with up to 20 step halvings per iteration
    (the step size persists across iterations and regrows slowly after
    accepted steps).
    """
    if iters < 0 or step_size <= 0:
        raise ValueError("iters must be >= 0 and step_size positive")
    weights = weights if weights is not None else LossWeights()
    cfg = config if config is not None else RenderConfig()
    views = _views_from_inputs(frames, pseudo_set, weights)
    if not views:
        raise ValueError("nothing to refine against")

    current = m.copy()
    value = _objective(current, views, objective, cfg)
    trace = [value]
    step = step_size
    for _ in range(iters):
        grad_c = np.zeros((current.size, 3))
        grad_o = np.zeros(current.size)
        w_c = np.zeros(current.size)
        w_o = np.zeros(current.size)
        for v in views:
            g = grad_color_opacity(current, v.target, v.confidence, v.pose,
                                   objective, config=cfg)
            grad_c += v.weight * g.colors
            grad_o += v.weight * g.opacities
            w_c += v.weight * g.color_weight
            w_o += v.weight * g.opacity_weight
        # diagonal preconditioning: per-parameter footprint mass makes the
        # step size mean "parameter units" regardless of splat extent
        dir_c = grad_c / np.maximum(w_c, 1e-12)[:, None]
        dir_o = grad_o / np.maximum(w_o, 1e-12)

        accepted = False
        for _ in range(MAX_BACKTRACKS):
            trial = current.copy()
            trial.colors = np.clip(trial.colors - step * dir_c, 0.0, 1.0)
            trial.opacities = np.clip(trial.opacities - step * dir_o,
                                      0.0, 1.0)
            trial_value = _objective(trial, views, objective, cfg)
            if trial_value <= value:
                current, value = trial, trial_value
                accepted = True
                break
            step *= 0.5
        if accepted:
            step = min(step * 1.2, step_size)
        trace.append(value)
    return current, trace
