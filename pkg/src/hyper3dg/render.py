"""CPU EWA splatting renderer with an analytic reverse pass.

Every Gaussian is projected to a 2D screen-space Gaussian with covariance
``J W Sigma W^T J^T + 0.3 I``, clipped to its 3-sigma ellipse, and
alpha-composited front to back. The footprint is tapered so that both
the weight and its slope reach zero at the ellipse boundary::

    w(p) = (exp(-p/2) - e * (1 + (c^2 - p) / 2)) / (1 - e * (1 + c^2 / 2))

for ``p < c^2`` (zero beyond), with ``e = exp(-c^2/2)``, ``p`` the squared
Mahalanobis distance of the pixel centre and ``c`` the cull radius in
sigmas. The image is then C1 in every parameter, so finite differences
agree with the analytic gradient; the peak weight is still exactly 1.

Work is organised as flat arrays of (gaussian, pixel) pairs sorted by
(pixel, depth). Transmittance is a segmented cumulative sum of
``log(1 - alpha)``; all reductions run in that fixed order, so results do
not depend on the order of Gaussians in the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraPose
from .errors import ConfigError, NumericalError
from .gaussians import COLOR, NUM_ATTRIBUTES, OPACITY, POSITION, GaussianCloud, covariance

LOWPASS = 0.3
ALPHA_MAX = 0.99
CULL_SIGMA = 3.0
NEAR = 0.01


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)

    @property
    def shape(self):
        return self.alpha.shape


def _background(background):
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.size == 1:
        bg = np.repeat(bg, 3)
    if bg.shape != (3,):
        raise ConfigError("background must be an RGB triple")
    return bg


def _segment_starts(keys):
    """Index of the first element of each run of equal ``keys`` (per element)."""
    n = len(keys)
    is_start = np.ones(n, dtype=bool)
    is_start[1:] = keys[1:] != keys[:-1]
    start_idx = np.flatnonzero(is_start)
    seg_id = np.cumsum(is_start) - 1
    return start_idx, seg_id


class Rasterization:
    """A forward render that can also propagate pixel gradients backwards."""

    def __init__(self, cloud, pose, background=None, *, cull_sigma=CULL_SIGMA):
        if not isinstance(pose, CameraPose):
            raise ConfigError("pose must be a CameraPose")
        pose.validate()
        self.pose = pose
        self.background = _background(background)
        self.cull_sigma = float(cull_sigma)
        self.m = len(cloud)
        self.h, self.w = int(pose.height), int(pose.width)
        params = cloud.params
        if not np.all(np.isfinite(params)):
            raise NumericalError("cloud contains non-finite attributes")
        self._project(cloud)
        self._build_pairs()
        self._composite()

    # -- forward -------------------------------------------------------------

    def _project(self, cloud):
        pose = self.pose
        rot = pose.rotation
        f = pose.focal
        cx, cy = pose.principal_point
        params = cloud.params
        cam = (params[:, POSITION] - pose.eye) @ rot.T
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        self.valid = z > NEAR
        zs = np.where(self.valid, z, 1.0)
        jac = np.zeros((self.m, 2, 3))
        jac[:, 0, 0] = f / zs
        jac[:, 0, 2] = -f * x / zs**2
        jac[:, 1, 1] = f / zs
        jac[:, 1, 2] = -f * y / zs**2
        sigma3 = covariance(cloud) if self.m else np.zeros((0, 3, 3))
        t = jac @ rot
        cov2 = t @ sigma3 @ np.swapaxes(t, 1, 2)
        cov2[:, 0, 0] += LOWPASS
        cov2[:, 1, 1] += LOWPASS
        det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
        conic = np.empty_like(cov2)
        conic[:, 0, 0] = cov2[:, 1, 1] / det
        conic[:, 1, 1] = cov2[:, 0, 0] / det
        conic[:, 0, 1] = conic[:, 1, 0] = -cov2[:, 0, 1] / det

        self.cam = cam
        self.z = zs
        self.rot = rot
        self.focal = f
        self.jac = jac
        self.t = t
        self.sigma3 = sigma3
        self.cov2 = cov2
        self.conic = conic
        self.u = f * x / zs + cx
        self.v = f * y / zs + cy
        self.opacity = 1.0 / (1.0 + np.exp(-params[:, OPACITY]))
        self.color = params[:, COLOR].copy()

    def _build_pairs(self):
        c = self.cull_sigma
        ext_x = c * np.sqrt(self.cov2[:, 0, 0])
        ext_y = c * np.sqrt(self.cov2[:, 1, 1])
        # pixel j has centre j + 0.5
        j0 = np.clip(np.ceil(self.u - ext_x - 0.5), 0, self.w).astype(np.int64)
        j1 = np.clip(np.floor(self.u + ext_x - 0.5), -1, self.w - 1).astype(np.int64)
        i0 = np.clip(np.ceil(self.v - ext_y - 0.5), 0, self.h).astype(np.int64)
        i1 = np.clip(np.floor(self.v + ext_y - 0.5), -1, self.h - 1).astype(np.int64)
        nx = np.maximum(j1 - j0 + 1, 0)
        ny = np.maximum(i1 - i0 + 1, 0)
        nx[~self.valid] = 0
        counts = nx * ny
        total = int(counts.sum())
        gid = np.repeat(np.arange(self.m), counts)
        offsets = np.cumsum(counts) - counts
        local = np.arange(total) - np.repeat(offsets, counts)
        nxg = nx[gid]
        jj = j0[gid] + local % np.maximum(nxg, 1)
        ii = i0[gid] + local // np.maximum(nxg, 1)

        dx = jj + 0.5 - self.u[gid]
        dy = ii + 0.5 - self.v[gid]
        qa = self.conic[gid, 0, 0]
        qb = self.conic[gid, 0, 1]
        qc = self.conic[gid, 1, 1]
        power = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
        cutoff = c * c
        keep = power < cutoff
        gid, ii, jj, dx, dy, power = gid[keep], ii[keep], jj[keep], dx[keep], dy[keep], power[keep]

        floor = np.exp(-0.5 * cutoff)
        self._floor = floor
        self._taper = 1.0 / (1.0 - floor * (1.0 + 0.5 * cutoff))
        gauss = np.exp(-0.5 * power)
        weight = (gauss - floor * (1.0 + 0.5 * (cutoff - power))) * self._taper
        raw = self.opacity[gid] * weight
        alpha = np.minimum(raw, ALPHA_MAX)

        pixel = ii * self.w + jj
        order = np.lexsort((self.z[gid], pixel))
        self.gid = gid[order]
        self.pixel = pixel[order]
        self.dx = dx[order]
        self.dy = dy[order]
        self.gauss = gauss[order]
        self.weight = weight[order]
        self.raw = raw[order]
        self.alpha = alpha[order]

    def _composite(self):
        npix = self.h * self.w
        log_keep = np.log1p(-self.alpha)
        csum = np.cumsum(log_keep)
        start_idx, seg_id = _segment_starts(self.pixel)
        seg_base = (csum[start_idx] - log_keep[start_idx])[seg_id]
        excl = csum - log_keep - seg_base
        self.trans = np.exp(excl)  # transmittance in front of each pair
        self._start_idx, self._seg_id = start_idx, seg_id

        log_total = np.bincount(self.pixel, weights=log_keep, minlength=npix)
        self.final_trans = np.exp(log_total)
        wt = self.alpha * self.trans
        self.contrib = wt
        rgb = np.empty((npix, 3))
        for ch in range(3):
            rgb[:, ch] = np.bincount(self.pixel, weights=wt * self.color[self.gid, ch], minlength=npix)
        rgb += self.final_trans[:, None] * self.background
        self.image = RenderedImage(
            rgb=rgb.reshape(self.h, self.w, 3),
            alpha=(1.0 - self.final_trans).reshape(self.h, self.w),
        )

    # -- reverse -------------------------------------------------------------

    def backward(self, pixel_grad):
        """Gradient of ``sum(pixel_grad * rgb)`` w.r.t. the attribute matrix.

        Columns for position, opacity logit and color are filled; scale and
        rotation columns are zero. The depth order is held fixed.
        """
        pixel_grad = np.asarray(pixel_grad, dtype=np.float64)
        if pixel_grad.shape != (self.h, self.w, 3):
            raise ConfigError(
                f"pixel_grad shape {pixel_grad.shape} does not match image {(self.h, self.w, 3)}"
            )
        out = np.zeros((self.m, NUM_ATTRIBUTES))
        if len(self.gid) == 0:
            return out
        g_pix = pixel_grad.reshape(-1, 3)
        gp = g_pix[self.pixel]
        gid = self.gid

        d_color = np.empty((self.m, 3))
        for ch in range(3):
            d_color[:, ch] = np.bincount(gid, weights=self.contrib * gp[:, ch], minlength=self.m)

        # g . (colour composited behind each pair, background included)
        gc = np.einsum("ij,ij->i", gp, self.color[gid])
        term = gc * self.contrib
        csum = np.cumsum(term)
        seg_base = (csum[self._start_idx] - term[self._start_idx])[self._seg_id]
        incl = csum - seg_base
        seg_total = np.bincount(self._seg_id, weights=term)
        bg_term = self.final_trans * (g_pix @ self.background)
        behind = seg_total[self._seg_id] - incl + bg_term[self.pixel]
        d_alpha = self.trans * gc - behind / (1.0 - self.alpha)
        d_raw = np.where(self.raw < ALPHA_MAX, d_alpha, 0.0)

        op = self.opacity
        d_opacity = np.bincount(gid, weights=d_raw * self.weight, minlength=self.m)
        d_logit = d_opacity * op * (1.0 - op)

        d_power = d_raw * op[gid] * (0.5 * (self._floor - self.gauss) * self._taper)
        qa = self.conic[gid, 0, 0]
        qb = self.conic[gid, 0, 1]
        qc = self.conic[gid, 1, 1]
        dx, dy = self.dx, self.dy
        d_u = np.bincount(gid, weights=d_power * -2.0 * (qa * dx + qb * dy), minlength=self.m)
        d_v = np.bincount(gid, weights=d_power * -2.0 * (qb * dx + qc * dy), minlength=self.m)
        g_q = np.empty((self.m, 2, 2))
        g_q[:, 0, 0] = np.bincount(gid, weights=d_power * dx * dx, minlength=self.m)
        g_q[:, 1, 1] = np.bincount(gid, weights=d_power * dy * dy, minlength=self.m)
        g_q[:, 0, 1] = g_q[:, 1, 0] = np.bincount(gid, weights=d_power * dx * dy, minlength=self.m)

        d_cov2 = -self.conic @ g_q @ self.conic
        d_t = 2.0 * d_cov2 @ self.t @ self.sigma3
        d_jac = d_t @ self.rot.T

        f = self.focal
        x, y, z = self.cam[:, 0], self.cam[:, 1], self.z
        d_cam = np.empty((self.m, 3))
        d_cam[:, 0] = d_u * f / z - d_jac[:, 0, 2] * f / z**2
        d_cam[:, 1] = d_v * f / z - d_jac[:, 1, 2] * f / z**2
        d_cam[:, 2] = (
            -d_u * f * x / z**2
            - d_v * f * y / z**2
            - d_jac[:, 0, 0] * f / z**2
            + d_jac[:, 0, 2] * 2.0 * f * x / z**3
            - d_jac[:, 1, 1] * f / z**2
            + d_jac[:, 1, 2] * 2.0 * f * y / z**3
        )
        d_cam[~self.valid] = 0.0
        out[:, POSITION] = d_cam @ self.rot
        out[:, OPACITY] = d_logit
        out[:, COLOR] = d_color
        return out


def render(cloud, pose, background=None, **kwargs):
    """Render ``cloud`` from ``pose``; an empty cloud yields the background."""
    return Rasterization(cloud, pose, background, **kwargs).image


def backprop(cloud, pose, pixel_grad, background=None, **kwargs):
    """Attribute gradients of the linear functional ``sum(pixel_grad * rgb)``."""
    return Rasterization(cloud, pose, background, **kwargs).backward(pixel_grad)


# ---------------------------------------------------------------------------
# Patch rendering


def _labels_of(assignment):
    return np.asarray(getattr(assignment, "labels", assignment))


def patch_cloud(cloud, assignment, patch_id):
    labels = _labels_of(assignment)
    if labels.shape != (len(cloud),):
        raise ConfigError("assignment does not match cloud size")
    members = np.flatnonzero(labels == patch_id)
    if members.size == 0:
        raise ConfigError(f"patch {patch_id} is empty")
    return cloud[members]


def patch_framing(sub, pose, distance_factor=3.0):
    """Pose aimed at the centroid of ``sub`` from the direction of ``pose``.

    The eye sits at ``distance_factor`` times the patch radius, where the
    radius pads the centre spread by three times the largest Gaussian scale.
    """
    centroid = sub.centroid
    radius = sub.bounding_radius + 3.0 * float(np.exp(sub.log_scales.max()))
    eye = centroid + distance_factor * radius * pose.direction
    return pose.replace(eye=eye, target=centroid)


def render_patch(cloud, assignment, patch_id, pose, background=None, **kwargs):
    sub = patch_cloud(cloud, assignment, patch_id)
    return render(sub, patch_framing(sub, pose), background, **kwargs)


# ---------------------------------------------------------------------------
# PNG export


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(image, path, *, with_alpha=True, background=None):
    """Save as 8-bit sRGB; with ``with_alpha`` the colour is un-premultiplied."""
    from PIL import Image

    rgb = image.rgb
    if with_alpha:
        bg = _background(background)
        a = image.alpha[..., None]
        fg = rgb - (1.0 - a) * bg
        straight = np.divide(fg, a, out=np.zeros_like(rgb), where=a > 1e-12)
        data = np.concatenate([linear_to_srgb(straight), np.clip(image.alpha, 0, 1)[..., None]], axis=2)
        mode = "RGBA"
    else:
        data = linear_to_srgb(rgb)
        mode = "RGB"
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode=mode).save(path)


def load_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return RenderedImage(rgb=srgb_to_linear(arr[..., :3]), alpha=arr[..., 3])


__all__ = [
    "RenderedImage",
    "Rasterization",
    "render",
    "backprop",
    "render_patch",
    "patch_cloud",
    "patch_framing",
    "save_png",
    "load_png",
    "GaussianCloud",
]
