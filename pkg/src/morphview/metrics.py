"""Evaluation kernels (SSIM, PSNR, PCK, Chamfer, volume IoU), the analytic
patch-correlation keypoint detector, and the EvalReport emitted by `eval`.

Keypoint "prediction" on generated images is template matching against the
ground-truth render: each keypoint's reference patch is searched in a window
of the generated image, so PCK measures where the model actually placed the
local content, with no learned detector involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import Tensor

from .errors import ConfigurationError
from .geometry import CameraParams
from .synthdata import camera_angles

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _as_image(a) -> np.ndarray:
    arr = np.asarray(a.detach() if isinstance(a, Tensor) else a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ConfigurationError("images must be (h, w) or (h, w, c)")
    return arr


def ssim(a, b) -> float:
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5),
    stability constants for unit dynamic range, averaged over channels.
    Windows are evaluated only where they fit entirely inside the image."""
    x = _as_image(a)
    y = _as_image(b)
    if x.shape != y.shape:
        raise ConfigurationError("ssim needs equal shapes")
    h, w = x.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigurationError(f"images must be at least {SSIM_WINDOW} px")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        win_x = np.lib.stride_tricks.sliding_window_view(xc, (SSIM_WINDOW, SSIM_WINDOW))
        win_y = np.lib.stride_tricks.sliding_window_view(yc, (SSIM_WINDOW, SSIM_WINDOW))
        mu_x = np.einsum("ijkl,kl->ij", win_x, kernel)
        mu_y = np.einsum("ijkl,kl->ij", win_y, kernel)
        xx = np.einsum("ijkl,kl->ij", win_x * win_x, kernel) - mu_x ** 2
        yy = np.einsum("ijkl,kl->ij", win_y * win_y, kernel) - mu_y ** 2
        xy = np.einsum("ijkl,kl->ij", win_x * win_y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) on unit range, capped at 99 dB for equal images."""
    x = _as_image(a)
    y = _as_image(b)
    if x.shape != y.shape:
        raise ConfigurationError("psnr needs equal shapes")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def pck(pred_kps, gt_kps, normalizer: float, threshold: float = 0.2) -> float:
    """Percent of keypoints with error / normalizer strictly below threshold."""
    if normalizer <= 0:
        raise ConfigurationError("pck normalizer must be positive")
    p = np.asarray(pred_kps, dtype=np.float64)
    g = np.asarray(gt_kps, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ConfigurationError("keypoint arrays must both be (k, 2)")
    dist = np.linalg.norm(p - g, axis=1) / normalizer
    return float(100.0 * np.mean(dist < threshold))


def chamfer(points_a, points_b) -> float:
    """Symmetric mean nearest-neighbour distance (unsquared)."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ConfigurationError("chamfer needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


def voxelize_mesh(vertices, faces, resolution: int, bbox_min, bbox_max) -> np.ndarray:
    """Interior occupancy on a voxel grid via ray-parity along +z.

    A voxel center is inside when the ray from it towards +z crosses the
    surface an odd number of times. Ray origins are nudged by a tiny
    irrational offset so axis-aligned faces cannot be grazed exactly.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    tris = verts[np.asarray(faces, dtype=np.int64)]
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    cell = (hi - lo) / resolution
    centers = [lo[a] + (np.arange(resolution) + 0.5) * cell[a] for a in range(3)]
    jitter = np.array([(math.sqrt(2) - 1), (math.sqrt(3) - 1)]) * 1e-6 * cell[:2]
    rx = centers[0] + jitter[0]
    ry = centers[1] + jitter[1]
    gx, gy = np.meshgrid(rx, ry, indexing="ij")
    rays = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)  # (R^2, 2)

    p0, p1, p2 = tris[:, 0], tris[:, 1], tris[:, 2]
    area = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
            - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    ok = np.abs(area) > 1e-15
    occ = np.zeros((resolution, resolution, resolution), dtype=bool)
    if not ok.any():
        return occ
    p0, p1, p2, area = p0[ok], p1[ok], p2[ok], area[ok]
    inv_area = 1.0 / area

    x = rays[:, 0][None, :]
    y = rays[:, 1][None, :]
    l0 = ((p2[:, 0] - p1[:, 0])[:, None] * (y - p1[:, 1][:, None])
          - (p2[:, 1] - p1[:, 1])[:, None] * (x - p1[:, 0][:, None])) * inv_area[:, None]
    l1 = ((p0[:, 0] - p2[:, 0])[:, None] * (y - p2[:, 1][:, None])
          - (p0[:, 1] - p2[:, 1])[:, None] * (x - p2[:, 0][:, None])) * inv_area[:, None]
    l2 = 1.0 - l0 - l1
    hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    z_cross = (l0 * p0[:, 2][:, None] + l1 * p1[:, 2][:, None]
               + l2 * p2[:, 2][:, None])
    z_cross = np.where(hit, z_cross, np.nan)

    zc = centers[2]
    n_rays = rays.shape[0]
    for r in range(n_rays):
        crossings = np.sort(z_cross[:, r][hit[:, r]])
        if crossings.size == 0:
            continue
        above = crossings.size - np.searchsorted(crossings, zc, side="right")
        inside = (above % 2) == 1
        i, j = divmod(r, resolution)
        occ[i, j, :] = inside
    return occ


def volume_iou(mesh_a, mesh_b, resolution: int = 64) -> float:
    """Intersection-over-union of voxelized mesh interiors on a shared box.

    mesh_a / mesh_b are (vertices, faces) pairs; both are voxelized on the
    union bounding box padded by one cell.
    """
    va = np.asarray(mesh_a[0], dtype=np.float64)
    vb = np.asarray(mesh_b[0], dtype=np.float64)
    lo = np.minimum(va.min(axis=0), vb.min(axis=0))
    hi = np.maximum(va.max(axis=0), vb.max(axis=0))
    pad = (hi - lo) / resolution
    lo, hi = lo - pad, hi + pad
    occ_a = voxelize_mesh(va, mesh_a[1], resolution, lo, hi)
    occ_b = voxelize_mesh(vb, mesh_b[1], resolution, lo, hi)
    union = int(np.logical_or(occ_a, occ_b).sum())
    if union == 0:
        raise ConfigurationError("both meshes voxelized to nothing")
    inter = int(np.logical_and(occ_a, occ_b).sum())
    return inter / union


def detect_keypoints(image, reference, reference_kps, window_radius: int = 5,
                     patch_radius: int = 2) -> np.ndarray:
    """Localize keypoints in `image` by correlating reference patches.

    For each reference keypoint, the patch around it in `reference` is
    compared (zero-normalized correlation) against patches of `image` at
    integer offsets within the window; the predicted keypoint is the
    reference location plus the best offset. Ties prefer smaller offsets,
    so running the detector on the reference itself returns the reference
    keypoints exactly.
    """
    img = _as_image(image)
    ref = _as_image(reference)
    if img.shape != ref.shape:
        raise ConfigurationError("image and reference must share a shape")
    kps = np.asarray(reference_kps, dtype=np.float64)
    pad = window_radius + patch_radius + 1
    # pad with the white background value
    img_p = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), constant_values=1.0)
    ref_p = np.pad(ref, ((pad, pad), (pad, pad), (0, 0)), constant_values=1.0)

    offsets = [(dy, dx)
               for dy in range(-window_radius, window_radius + 1)
               for dx in range(-window_radius, window_radius + 1)]
    offsets.sort(key=lambda o: (o[0] * o[0] + o[1] * o[1], o[0], o[1]))

    out = np.zeros_like(kps)
    for i, (u, v) in enumerate(kps):
        cx = int(round(u - 0.5)) + pad
        cy = int(round(v - 0.5)) + pad
        r = patch_radius
        patch = ref_p[cy - r:cy + r + 1, cx - r:cx + r + 1]
        pz = patch - patch.mean()
        norm_p = np.linalg.norm(pz)
        best_score = -np.inf
        best = (0, 0)
        for dy, dx in offsets:
            cand = img_p[cy + dy - r:cy + dy + r + 1, cx + dx - r:cx + dx + r + 1]
            cz = cand - cand.mean()
            norm_c = np.linalg.norm(cz)
            if norm_p < 1e-12 or norm_c < 1e-12:
                score = 1.0 if (norm_p < 1e-12 and norm_c < 1e-12) else -1.0
            else:
                score = float((pz * cz).sum() / (norm_p * norm_c))
            if score > best_score + 1e-12:
                best_score = score
                best = (dy, dx)
        out[i] = (u + best[1], v + best[0])
    return out


@dataclass
class CameraFilter:
    """Predicate over (azimuth, elevation) restricting keypoint evaluation."""

    max_azimuth_deg: float | None = None
    max_elevation_deg: float | None = None

    def passes(self, camera: CameraParams) -> bool:
        az, el = camera_angles(camera)
        az = (az + 180.0) % 360.0 - 180.0
        if self.max_azimuth_deg is not None and abs(az) > self.max_azimuth_deg:
            return False
        if self.max_elevation_deg is not None and abs(el) > self.max_elevation_deg:
            return False
        return True

    def to_dict(self) -> dict:
        return {"max_azimuth_deg": self.max_azimuth_deg,
                "max_elevation_deg": self.max_elevation_deg}


@dataclass
class EvalReport:
    ssim: float
    psnr: float
    pck_at_threshold: float        # all keypoints pooled
    pck_per_image: float           # mean of per-image PCK
    pck_mouth: float | None
    chamfer: float
    volume_iou: float
    pck_threshold: float
    per_view_ssim: list = field(default_factory=list)
    per_view_psnr: list = field(default_factory=list)
    pck_view_count: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (-1.0 <= self.ssim <= 1.0):
            raise ConfigurationError("ssim out of range")
        for v in (self.pck_at_threshold, self.pck_per_image):
            if not (0.0 <= v <= 100.0):
                raise ConfigurationError("pck out of range")
        if not (0.0 <= self.volume_iou <= 1.0):
            raise ConfigurationError("iou out of range")
        if self.chamfer < 0:
            raise ConfigurationError("chamfer must be non-negative")

    def to_json(self) -> str:
        d = {
            "ssim": self.ssim,
            "psnr": self.psnr,
            "pck_at_threshold": self.pck_at_threshold,
            "pck_per_image": self.pck_per_image,
            "pck_mouth": self.pck_mouth,
            "chamfer": self.chamfer,
            "volume_iou": self.volume_iou,
            "pck_threshold": self.pck_threshold,
            "per_view_ssim": self.per_view_ssim,
            "per_view_psnr": self.per_view_psnr,
            "pck_view_count": self.pck_view_count,
            "metadata": self.metadata,
        }
        return json.dumps(d, indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("SSIM", f"{self.ssim:.4f}"),
            ("PSNR (dB)", f"{self.psnr:.2f}"),
            (f"PCK@{self.pck_threshold} (pooled %)", f"{self.pck_at_threshold:.2f}"),
            (f"PCK@{self.pck_threshold} (per-image %)", f"{self.pck_per_image:.2f}"),
            ("PCK mouth (%)", "-" if self.pck_mouth is None else f"{self.pck_mouth:.2f}"),
            ("Chamfer", f"{self.chamfer:.6f}"),
            ("Volume IoU", f"{self.volume_iou:.4f}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
