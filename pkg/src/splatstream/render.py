"""Deterministic CPU forward renderer via front-to-back alpha blending.

Two implementations of the same compositing math:

* :func:`render` — the production path: project every gaussian once
  (vectorized), sort by camera depth, then splat each gaussian into its
  clipped screen-space footprint rectangle while a transmittance buffer
  tracks occlusion.
* :func:`render_bruteforce` — the oracle twin: an unstructured per-pixel
  loop over all gaussians with no footprint clipping and no early exit,
  sharing no projection code with the fast path.

Per pixel, with gaussians sorted front to back by camera depth:

    alpha_i = opacity_i * exp(-0.5 * d^T Sigma2d^-1 d)
    color   = sum_i c_i alpha_i T_i + T_final * background,  T_i = prod_{j<i} (1 - alpha_j)
    depth   = (sum_i z_i alpha_i T_i) / accumulated alpha
    opacity = 1 - prod_j (1 - alpha_j)
    normal  = renormalized sum of alpha-weighted flat normals (flats only,
              oriented toward the camera); the zero vector marks invalid.

Sigma2d is the local-affine (Jacobian) projection of the world covariance.
Gaussians at camera depth <= the configured near plane never contribute, and gaussians whose
projected covariance has condition number above ``degenerate_condition``
are skipped and tallied; both rules are part of the rendering semantics
and apply identically to both implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatstream.core import CameraPose, GaussianKind, GaussianMap, quat_to_matrix

DEFAULT_Z_NEAR = 1e-4

# exp(-0.5 r^2) underflows float64 to exactly 0.0 for r >= ~38.7, so a
# footprint cutoff at 40 sigma drops only gaussians whose alpha would have
# evaluated to exactly zero: the clipped path stays bit-faithful to the
# unclipped math.
EXACT_FOOTPRINT_SIGMA = 40.0


@dataclass(frozen=True)
class RenderConfig:
    """Speed/exactness knobs. Defaults keep the fast path faithful to the
    unclipped compositing math to well below 1e-6; loosen for speed."""

    footprint_sigma: float = EXACT_FOOTPRINT_SIGMA
    min_transmittance: float = 1e-12
    degenerate_condition: float = 1e8
    z_near: float = DEFAULT_Z_NEAR


EXACT = RenderConfig()
FAST = RenderConfig(footprint_sigma=6.0, min_transmittance=1e-5)


@dataclass
class RenderedViews:
    """Color/depth/opacity/normal buffers for one rendered camera."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    normal: np.ndarray
    skipped_degenerate: int = 0

    @property
    def normal_valid(self) -> np.ndarray:
        return np.linalg.norm(self.normal, axis=-1) > 0.5


def _project_all(m: GaussianMap, cam: CameraPose, degenerate_condition: float,
                 z_near: float = DEFAULT_Z_NEAR):
    """Vectorized projection of every alive gaussian, sorted front to back.

    Returns (index, mean2d, inv_cov (n,3) as [ixx, ixy, iyy], depth,
    sigma_major, camera-facing flat normals, skipped_count).
    """
    empty = (np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros((0, 3)),
             np.zeros(0), np.zeros(0), np.zeros((0, 3)), 0)
    alive = np.nonzero(m.alive & (m.opacities > 0))[0]
    if alive.size == 0:
        return empty
    r_wc = quat_to_matrix(cam.rotation).T          # world -> camera
    pc = (m.positions[alive] - cam.translation) @ r_wc.T
    front = pc[:, 2] > z_near
    alive, pc = alive[front], pc[front]
    if alive.size == 0:
        return empty

    rot = quat_to_matrix(m.rotations[alive])
    s2 = m.scales[alive] ** 2
    cov_w = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    cov_c = np.einsum("ij,njk,lk->nil", r_wc, cov_w, r_wc)

    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    jac = np.zeros((alive.size, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z ** 2
    cov2 = np.einsum("nij,njk,nlk->nil", jac, cov_c, jac)

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    tr_half = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(tr_half ** 2 - det, 0.0))
    lam_min, lam_max = tr_half - disc, tr_half + disc
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lam_min > 0, lam_max / lam_min, np.inf)
    keep = (lam_min > 0) & (cond <= degenerate_condition)
    skipped = int(alive.size - np.count_nonzero(keep))

    alive, det, pc = alive[keep], det[keep], pc[keep]
    a, b, c, lam_max = a[keep], b[keep], c[keep], lam_max[keep]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    inv_cov = np.stack([c / det, -b / det, a / det], axis=1)

    nrm = np.zeros((alive.size, 3))
    flat = m.kinds[alive] == GaussianKind.FLAT2D.value
    if np.any(flat):
        zaxis = quat_to_matrix(m.rotations[alive[flat]])[:, :, 2]
        viewdir = m.positions[alive[flat]] - cam.translation
        flip = np.where(np.einsum("nj,nj->n", zaxis, viewdir) >= 0, 1.0, -1.0)
        nrm[flat] = -zaxis * flip[:, None]

    order = np.argsort(z, kind="stable")
    return (alive[order], mean2d[order], inv_cov[order], z[order],
            np.sqrt(lam_max[order]), nrm[order], skipped)


def render(m: GaussianMap, cam: CameraPose,
           background=(0.0, 0.0, 0.0),
           config: RenderConfig = EXACT) -> RenderedViews:
    """Alpha-blend the map into color/depth/opacity/normal buffers."""
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    color_acc = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    weight_acc = np.zeros((h, w))
    normal_acc = np.zeros((h, w, 3))
    transmit = np.ones((h, w))

    idx, mean2d, inv_cov, zs, sig_major, normals, skipped = _project_all(
        m, cam, config.degenerate_condition, config.z_near)

    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    for k in range(len(idx)):
        radius = config.footprint_sigma * sig_major[k]
        mu = mean2d[k]
        x0 = max(int(np.floor(mu[0] - radius)), 0)
        x1 = min(int(np.ceil(mu[0] + radius)) + 1, w)
        y0 = max(int(np.floor(mu[1] - radius)), 0)
        y1 = min(int(np.ceil(mu[1] + radius)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        tsub = transmit[y0:y1, x0:x1]
        if tsub.max() < config.min_transmittance:
            continue
        dx = xs[x0:x1] - mu[0]
        dy = ys[y0:y1] - mu[1]
        q = (inv_cov[k, 0] * dx[None, :] ** 2
             + 2.0 * inv_cov[k, 1] * dy[:, None] * dx[None, :]
             + inv_cov[k, 2] * dy[:, None] ** 2)
        alpha = m.opacities[idx[k]] * np.exp(-0.5 * q)
        wgt = alpha * tsub
        color_acc[y0:y1, x0:x1] += wgt[:, :, None] * m.colors[idx[k]]
        depth_acc[y0:y1, x0:x1] += wgt * zs[k]
        weight_acc[y0:y1, x0:x1] += wgt
        if normals[k, 0] != 0 or normals[k, 1] != 0 or normals[k, 2] != 0:
            normal_acc[y0:y1, x0:x1] += wgt[:, :, None] * normals[k]
        transmit[y0:y1, x0:x1] = tsub * (1.0 - alpha)

    return _finalize(color_acc, depth_acc, weight_acc, normal_acc, transmit,
                     bg, skipped)


def _finalize(color_acc, depth_acc, weight_acc, normal_acc, transmit, bg,
              skipped):
    alpha_acc = 1.0 - transmit
    color = color_acc + transmit[:, :, None] * bg
    # normalize by the directly accumulated weight sum: it equals the
    # accumulated alpha mathematically but avoids 1-(1-a) cancellation
    pos = weight_acc > 0
    depth = np.where(pos, depth_acc / np.where(pos, weight_acc, 1.0), 0.0)
    nlen = np.linalg.norm(normal_acc, axis=-1)
    nok = nlen > 1e-12
    normal = np.where(nok[:, :, None],
                      normal_acc / np.where(nok, nlen, 1.0)[:, :, None], 0.0)
    empty = ~pos
    color[empty] = bg
    depth[empty] = 0.0
    normal[empty] = 0.0
    return RenderedViews(color, depth, alpha_acc, normal, skipped)


# ---------------------------------------------------------------------------
# brute-force twin
# ---------------------------------------------------------------------------

def _invert2x2_adjugate(a, b, c):
    """Inverse of [[a, b], [b, c]] by the adjugate formula."""
    det = a * c - b * b
    return c / det, -b / det, a / det


def render_bruteforce(m: GaussianMap, cam: CameraPose,
                      background=(0.0, 0.0, 0.0),
                      config: RenderConfig = EXACT) -> RenderedViews:
    """Naive per-pixel loop over all gaussians; no clipping, no early exit."""
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)

    entries = []
    skipped = 0
    r_cw = quat_to_matrix(cam.rotation)
    for i in range(m.size):
        if not m.alive[i] or m.opacities[i] <= 0:
            continue
        pc = r_cw.T @ (m.positions[i] - cam.translation)
        if pc[2] <= config.z_near:
            continue
        rot = quat_to_matrix(m.rotations[i])
        cov_w = rot @ np.diag(m.scales[i] ** 2) @ rot.T
        cov_c = r_cw.T @ cov_w @ r_cw
        x, y, z = pc
        jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                        [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
        c2 = jac @ cov_c @ jac.T
        eig = np.linalg.eigvalsh(c2)
        if eig[0] <= 0 or eig[1] / eig[0] > config.degenerate_condition:
            skipped += 1
            continue
        ia, ib, ic = _invert2x2_adjugate(c2[0, 0], c2[0, 1], c2[1, 1])
        mu = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        nrm = np.zeros(3)
        if m.kinds[i] == GaussianKind.FLAT2D.value:
            zaxis = rot[:, 2]
            view = m.positions[i] - cam.translation
            nrm = -zaxis * (1.0 if np.dot(zaxis, view) >= 0 else -1.0)
        entries.append((z, mu, (ia, ib, ic), m.opacities[i], m.colors[i], nrm))

    if not entries:
        return RenderedViews(np.tile(bg, (h, w, 1)), np.zeros((h, w)),
                             np.zeros((h, w)), np.zeros((h, w, 3)), skipped)

    entries.sort(key=lambda e: e[0])
    zs = np.array([e[0] for e in entries])
    mus = np.array([e[1] for e in entries])
    invs = np.array([e[2] for e in entries])
    ops = np.array([e[3] for e in entries])
    cols = np.array([e[4] for e in entries])
    nrms = np.array([e[5] for e in entries])

    color = np.empty((h, w, 3))
    depth = np.empty((h, w))
    opac = np.empty((h, w))
    normal = np.empty((h, w, 3))
    for iy in range(h):
        for ix in range(w):
            dx = ix - mus[:, 0]
            dy = iy - mus[:, 1]
            q = invs[:, 0] * dx ** 2 + 2 * invs[:, 1] * dx * dy + invs[:, 2] * dy ** 2
            alpha = ops * np.exp(-0.5 * q)
            t = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
            wgt = alpha * t
            t_final = t[-1] * (1.0 - alpha[-1])
            acc = wgt.sum()
            color[iy, ix] = wgt @ cols + t_final * bg
            opac[iy, ix] = 1.0 - t_final
            depth[iy, ix] = (wgt @ zs) / acc if acc > 0 else 0.0
            nvec = wgt @ nrms
            nl = np.linalg.norm(nvec)
            normal[iy, ix] = nvec / nl if nl > 1e-12 else 0.0
            if acc <= 0:
                color[iy, ix] = bg
                depth[iy, ix] = 0.0
                normal[iy, ix] = 0.0
    return RenderedViews(color, depth, opac, normal, skipped)
