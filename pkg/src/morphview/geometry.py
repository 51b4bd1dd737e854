"""Camera model, perspective projection, frustum sampling, trilinear interpolation.

All functions are pure and differentiable w.r.t. feature inputs; cameras are
held in float64 and cast to the dtype of whatever points/features they meet.

Conventions (fixed for the whole package):
  * world space is metric; the subject sits near the origin
  * world-to-camera: p_cam = R @ p_world + T, with camera x right, y down,
    z forward (so z is the projective depth)
  * pixel (u, v) has its center at continuous coordinates (u + 0.5, v + 0.5)
    when indexed by integers; projections are continuous pixel coordinates
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ConfigurationError

EPS_DEPTH = 1e-6


def _as_f64(value, shape) -> Tensor:
    t = torch.as_tensor(value, dtype=torch.float64)
    if tuple(t.shape) != shape:
        raise ConfigurationError(f"expected shape {shape}, got {tuple(t.shape)}")
    return t


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera: intrinsics K, world-to-camera rotation R and translation T."""

    K: Tensor
    R: Tensor
    T: Tensor
    image_size: tuple[int, int]  # (height, width) in pixels
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "K", _as_f64(self.K, (3, 3)))
        object.__setattr__(self, "R", _as_f64(self.R, (3, 3)))
        object.__setattr__(self, "T", _as_f64(self.T, (3,)))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        object.__setattr__(self, "near", float(self.near))
        object.__setattr__(self, "far", float(self.far))
        ortho = (self.R.T @ self.R - torch.eye(3, dtype=torch.float64)).abs().max().item()
        if ortho >= 1e-6 or torch.det(self.R).item() < 0:
            raise ConfigurationError(f"R is not a proper rotation (|R'R - I| = {ortho:.2e})")
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ConfigurationError("K must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1:
            raise ConfigurationError("K needs positive focal lengths and K[2][2] == 1")
        if not (0 < self.near < self.far):
            raise ConfigurationError(f"need 0 < near < far, got ({self.near}, {self.far})")

    @property
    def center(self) -> Tensor:
        """Camera center in world coordinates, -R^T T."""
        return -self.R.T @ self.T

    def to_json_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "T": self.T.tolist(),
            "size": [self.image_size[0], self.image_size[1]],
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraParams":
        return cls(K=d["K"], R=d["R"], T=d["T"],
                   image_size=(d["size"][0], d["size"][1]),
                   near=d["near"], far=d["far"])

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text: str) -> "CameraParams":
        return cls.from_json_dict(json.loads(text))


def look_at_extrinsics(position, target=(0.0, 0.0, 0.0),
                       up=(0.0, 1.0, 0.0), roll_deg: float = 0.0) -> tuple[Tensor, Tensor]:
    """R, T for a camera at `position` whose optical axis passes through `target`.

    Camera convention is x right, y down, z forward; `up` breaks the
    remaining rotational ambiguity and `roll_deg` spins about the axis.
    """
    pos = torch.as_tensor(position, dtype=torch.float64)
    tgt = torch.as_tensor(target, dtype=torch.float64)
    upv = torch.as_tensor(up, dtype=torch.float64)
    z = tgt - pos
    norm = torch.linalg.norm(z)
    if norm < 1e-12:
        raise ConfigurationError("camera position coincides with target")
    z = z / norm
    x = torch.linalg.cross(z, upv)
    if torch.linalg.norm(x) < 1e-9:
        # looking straight along up; pick any horizontal right vector
        x = torch.linalg.cross(z, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    x = x / torch.linalg.norm(x)
    y = torch.linalg.cross(z, x)
    R = torch.stack([x, y, z], dim=0)
    if roll_deg:
        a = math.radians(roll_deg)
        roll = torch.tensor([[math.cos(a), -math.sin(a), 0.0],
                             [math.sin(a), math.cos(a), 0.0],
                             [0.0, 0.0, 1.0]], dtype=torch.float64)
        R = roll @ R
    return R, -R @ pos


def project(points: Tensor, camera: CameraParams) -> tuple[Tensor, Tensor]:
    """Perspective-project world points into a camera.

    Returns (uvz, valid): uvz is (n, 3) holding pixel u, pixel v and
    camera-space depth z; valid is (n,) bool, False where z <= EPS_DEPTH.
    Invalid points keep their true z but their (u, v) come from a clamped
    divisor, so the output stays finite. No exception is raised; callers
    decide what to do with invalid projections.
    """
    if not torch.isfinite(points).all():
        raise ConfigurationError("project: points must be finite")
    R = camera.R.to(points.dtype)
    T = camera.T.to(points.dtype)
    K = camera.K.to(points.dtype)
    cam = points @ R.T + T
    z = cam[..., 2]
    valid = z > EPS_DEPTH
    safe_z = torch.where(valid, z, torch.full_like(z, EPS_DEPTH))
    u = (K[0, 0] * cam[..., 0] + K[0, 1] * cam[..., 1]) / safe_z + K[0, 2]
    v = (K[1, 1] * cam[..., 1]) / safe_z + K[1, 2]
    return torch.stack([u, v, z], dim=-1), valid


def frustum_depth_samples(camera: CameraParams, depth_count: int,
                          dtype=torch.float64) -> Tensor:
    """Uniform inclusive depths near..far, depth_count >= 2."""
    if depth_count < 2:
        raise ConfigurationError("need at least 2 depth samples")
    return torch.linspace(camera.near, camera.far, depth_count, dtype=dtype)


def sample_frustum_points(camera: CameraParams, depth_count: int,
                          grid_h: int, grid_w: int,
                          dtype=torch.float64) -> Tensor:
    """World-space points on rays through an h x w downsampling of the image.

    Rays pass through pixel centers of the downsampled plane; each carries
    depth_count uniformly spaced camera-depth samples on [near, far].
    Output shape (depth_count, grid_h, grid_w, 3).
    """
    if grid_h < 2 or grid_w < 2:
        raise ConfigurationError("need at least a 2x2 ray grid")
    H, W = camera.image_size
    depths = frustum_depth_samples(camera, depth_count, dtype=dtype)
    u = (torch.arange(grid_w, dtype=dtype) + 0.5) * (W / grid_w)
    v = (torch.arange(grid_h, dtype=dtype) + 0.5) * (H / grid_h)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    ones = torch.ones_like(uu)
    pix = torch.stack([uu, vv, ones], dim=-1)  # (h, w, 3)
    Kinv = torch.linalg.inv(camera.K).to(dtype)
    dirs = pix @ Kinv.T  # unit-depth camera points, third component 1
    cam_pts = depths.view(-1, 1, 1, 1) * dirs.unsqueeze(0)  # (d, h, w, 3)
    R = camera.R.to(dtype)
    T = camera.T.to(dtype)
    return (cam_pts - T) @ R  # (p_cam - T) @ R == R^T (p_cam - T)


def trilinear_interpolate(volume: Tensor, bbox_min: Tensor, bbox_max: Tensor,
                          points: Tensor) -> Tensor:
    """Trilinearly sample a (x, y, z, c) grid at world points.

    Voxel i along an axis spanning [lo, hi] with n cells has its center at
    lo + (i + 0.5) * (hi - lo) / n. Neighbours outside the grid contribute
    zeros, and queries outside the bounding box return all-zero features.
    Differentiable w.r.t. volume.
    """
    if volume.ndim != 4:
        raise ConfigurationError("volume must be (x, y, z, c)")
    dims = torch.tensor(volume.shape[:3])
    dtype = volume.dtype
    pts = points.to(dtype).reshape(-1, 3)
    lo = torch.as_tensor(bbox_min, dtype=dtype)
    hi = torch.as_tensor(bbox_max, dtype=dtype)
    if bool((hi <= lo).any()):
        raise ConfigurationError("degenerate bounding box")
    inside = ((pts >= lo) & (pts <= hi)).all(dim=-1)

    cell = (hi - lo) / dims.to(dtype)
    g = (pts - lo) / cell - 0.5  # continuous grid coordinate in voxel-center units
    g0 = torch.floor(g)
    frac = g - g0
    g0 = g0.long()

    nx, ny, nz = (int(d) for d in dims)
    c = volume.shape[3]
    flat = volume.reshape(-1, c)
    out = torch.zeros(pts.shape[0], c, dtype=dtype, device=volume.device)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = g0[:, 0] + dx
                iy = g0[:, 1] + dy
                iz = g0[:, 2] + dz
                ok = ((ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
                      & (iz >= 0) & (iz < nz))
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w = wx * wy * wz * ok.to(dtype)
                idx = ((ix.clamp(0, nx - 1) * ny + iy.clamp(0, ny - 1)) * nz
                       + iz.clamp(0, nz - 1))
                out = out + flat[idx] * w.unsqueeze(-1)
    out = out * inside.to(dtype).unsqueeze(-1)
    return out.reshape(*points.shape[:-1], c)
