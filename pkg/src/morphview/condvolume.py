"""Mesh-anchored conditioning: noisy-image features lifted onto vertices,
encoded into a dense feature volume by a 3D conv stack, and resampled into
per-view frustum feature pyramids for depth-wise attention.

Tensor layout: images and grids are channels-last in public signatures
((N, h, w, c), (x, y, z, c), (d, h, w, c)); conv internals are channels-first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import archive
from .errors import ConfigurationError
from .geometry import CameraParams, project, sample_frustum_points, trilinear_interpolate


@dataclass
class ConditionerConfig:
    noise_feature_dim: int = 16        # d, channels attached to vertices
    volume_channels: int = 64          # f_V
    volume_grid: int = 32              # x = y = z of the dense feature volume
    voxel_size: float = 0.02           # fine voxel edge for the conv stack input
    frustum_depth: int = 48            # d_F
    frustum_height: int = 32           # h_F
    frustum_width: int = 32            # w_F
    levels: int = 3                    # L, matches denoiser depth
    kv_width: int = 64                 # d_r, pyramid channels at every level

    def __post_init__(self):
        if min(self.noise_feature_dim, self.volume_channels, self.volume_grid,
               self.frustum_depth, self.frustum_height, self.frustum_width,
               self.levels, self.kv_width) < 1:
            raise ConfigurationError("conditioner dimensions must be positive")
        if self.voxel_size <= 0:
            raise ConfigurationError("voxel_size must be positive")
        if self.volume_channels != 4 * self.noise_feature_dim:
            # the conv stack quadruples channels while quartering resolution
            raise ConfigurationError(
                f"volume_channels must be 4 * noise_feature_dim "
                f"({self.volume_channels} != 4 * {self.noise_feature_dim})")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class VertexFeatures:
    values: Tensor           # (n_v, d)
    source_view_count: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ConfigurationError("vertex features must be (n_v, d)")
        if not torch.isfinite(self.values).all():
            raise ConfigurationError("vertex features must be finite")


@dataclass(frozen=True)
class SparseVoxels:
    coords: Tensor       # (m, 3) long, voxel indices inside a cubic grid
    features: Tensor     # (m, d)
    dims: int            # grid is dims^3, dims a multiple of 4
    origin: Tensor       # (3,) world position of the grid's low corner
    voxel_size: float


@dataclass(frozen=True)
class MorphableFeatureVolume:
    grid: Tensor         # (x, y, z, f_V)
    bbox_min: Tensor     # (3,)
    bbox_max: Tensor     # (3,)
    voxel_size: float    # edge of one volume cell (cubic)


@dataclass(frozen=True)
class FrustumFeaturePyramid:
    levels: list         # level j: (d_j, h_j, w_j, c_j), dims halving per level
    camera: CameraParams


class NoiseFeatureLift(nn.Module):
    """Per-view 2-layer conv block raising 3-channel noisy images to d channels."""

    def __init__(self, out_channels: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, out_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, images: Tensor) -> Tensor:
        # (N, h, w, 3) -> (N, h, w, d); weight sharing keeps views independent
        x = images.permute(0, 3, 1, 2)
        x = self.conv2(self.act(self.conv1(x)))
        return x.permute(0, 2, 3, 1)


def bilinear_sample(feature_map: Tensor, uv: Tensor) -> tuple[Tensor, Tensor]:
    """Sample a (h, w, d) map at continuous pixel coords, zero padded.

    Pixel (i, j) has its center at (j + 0.5, i + 0.5). Returns features and
    an inside mask (True where the query lies within the pixel span).
    """
    h, w, d = feature_map.shape
    dtype = feature_map.dtype
    u = uv[:, 0].to(dtype)
    v = uv[:, 1].to(dtype)
    inside = (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
    cu = u - 0.5
    cv = v - 0.5
    x0 = torch.floor(cu)
    y0 = torch.floor(cv)
    fx = cu - x0
    fy = cv - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = feature_map.reshape(-1, d)
    out = torch.zeros(uv.shape[0], d, dtype=dtype, device=feature_map.device)
    for dx in (0, 1):
        for dy in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = ((fx if dx else 1 - fx) * (fy if dy else 1 - fy)) * ok.to(dtype)
            idx = yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)
            out = out + flat[idx] * wgt.unsqueeze(-1)
    return out * inside.to(dtype).unsqueeze(-1), inside


def unproject_to_vertices(feature_maps: Tensor, cameras: list[CameraParams],
                          vertices: Tensor) -> VertexFeatures:
    """Attach per-view image features to mesh vertices, mean-pooled over views.

    Each vertex is projected into every view and the feature map sampled
    bilinearly there; samples from views where the vertex is behind the
    camera or off-image contribute nothing. The mean divides by the number
    of views that validly saw the vertex (all-invalid vertices get zeros).
    """
    n_views = feature_maps.shape[0]
    if n_views != len(cameras) or n_views < 1:
        raise ConfigurationError("need one camera per feature map")
    n_v = vertices.shape[0]
    d = feature_maps.shape[3]
    dtype = feature_maps.dtype
    total = torch.zeros(n_v, d, dtype=dtype, device=feature_maps.device)
    count = torch.zeros(n_v, dtype=dtype, device=feature_maps.device)
    for n in range(n_views):
        uvz, in_front = project(vertices, cameras[n])
        sampled, inside = bilinear_sample(feature_maps[n], uvz[:, :2])
        ok = (in_front & inside).to(dtype)
        total = total + sampled * ok.unsqueeze(-1)
        count = count + ok
    values = total / count.clamp(min=1.0).unsqueeze(-1)
    return VertexFeatures(values=values, source_view_count=n_views)


def voxelize_vertices(vertices: Tensor, features, voxel_size: float) -> SparseVoxels:
    """Snap vertices into a cubic voxel grid, averaging features per voxel.

    The grid starts at the mesh bounding-box minimum; its edge count is the
    largest axis extent divided by voxel_size, rounded up to a multiple of 4
    (the conv stack downsamples twice). Cubic so the encoded volume keeps a
    single scalar cell size.
    """
    if isinstance(features, VertexFeatures):
        features = features.values
    if vertices.numel() == 0:
        raise ConfigurationError("cannot voxelize an empty vertex set")
    if voxel_size <= 0:
        raise ConfigurationError("voxel_size must be positive")
    origin = vertices.min(dim=0).values.to(torch.float64)
    extent = (vertices.max(dim=0).values.to(torch.float64) - origin).max().item()
    dims = max(1, math.ceil(extent / voxel_size))
    dims = 4 * math.ceil(dims / 4)
    idx = torch.floor((vertices.to(torch.float64) - origin) / voxel_size).long()
    idx = idx.clamp(min=0, max=dims - 1)
    flat = (idx[:, 0] * dims + idx[:, 1]) * dims + idx[:, 2]
    uniq, inverse = torch.unique(flat, return_inverse=True)
    m = uniq.numel()
    d = features.shape[1]
    sums = torch.zeros(m, d, dtype=features.dtype, device=features.device)
    sums.index_add_(0, inverse, features)
    counts = torch.zeros(m, dtype=features.dtype, device=features.device)
    counts.index_add_(0, inverse, torch.ones_like(inverse, dtype=features.dtype))
    mean = sums / counts.unsqueeze(-1)
    coords = torch.stack([uniq // (dims * dims), (uniq // dims) % dims, uniq % dims], dim=1)
    return SparseVoxels(coords=coords, features=mean, dims=dims,
                        origin=origin, voxel_size=float(voxel_size))


class SparseConvEncoder(nn.Module):
    """Nine-layer 3D conv stack producing the mesh-aware feature volume.

    Stack (kernel 3x3x3, padding 1 everywhere, bias-free, ReLU between):
      layers 1-2  stride 1, 16 ch
      layer  3    stride 2, 32 ch
      layers 4-5  stride 1, 32 ch
      layer  6    stride 2, 64 ch
      layers 7-9  stride 1, 64 ch
    The quarter-resolution result is trilinearly resampled onto a fixed
    cubic grid anchored to the mesh bounding box. Realized densely; at desk
    scale the sparse structure is purely an optimization.
    """

    CHANNEL_MULTS = (1, 1, 2, 2, 2, 4, 4, 4, 4)
    STRIDES = (1, 1, 2, 1, 1, 2, 1, 1, 1)

    def __init__(self, in_channels: int = 16, out_grid: int = 32):
        super().__init__()
        self.out_grid = out_grid
        convs = []
        prev = in_channels
        for mult, stride in zip(self.CHANNEL_MULTS, self.STRIDES):
            ch = mult * in_channels
            convs.append(nn.Conv3d(prev, ch, 3, stride=stride, padding=1, bias=False))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.act = nn.ReLU()
        self.out_channels = prev

    def dense_features(self, voxels: SparseVoxels) -> Tensor:
        """Quarter-resolution dense features, (dims/4, dims/4, dims/4, f_V)."""
        if voxels.coords.numel() == 0:
            raise ConfigurationError("sparse voxel set is empty")
        n = voxels.dims
        d = voxels.features.shape[1]
        ref = self.convs[0].weight
        dense = torch.zeros(d, n, n, n, dtype=ref.dtype, device=ref.device)
        feats = voxels.features.to(ref.dtype)
        c = voxels.coords
        dense[:, c[:, 0], c[:, 1], c[:, 2]] = feats.T
        x = dense.unsqueeze(0)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i != last:
                x = self.act(x)
        return x[0].permute(1, 2, 3, 0)

    def forward(self, voxels: SparseVoxels) -> MorphableFeatureVolume:
        coarse = self.dense_features(voxels)
        n = voxels.dims
        span = n * voxels.voxel_size
        lo = voxels.origin
        hi = lo + span
        g = self.out_grid
        cell = span / g
        steps = (torch.arange(g, dtype=coarse.dtype) + 0.5) * cell
        axes = [lo[a].to(coarse.dtype) + steps for a in range(3)]
        gx, gy, gz = torch.meshgrid(*axes, indexing="ij")
        pts = torch.stack([gx, gy, gz], dim=-1)
        grid = trilinear_interpolate(coarse, lo, hi, pts)
        return MorphableFeatureVolume(grid=grid, bbox_min=lo, bbox_max=hi,
                                      voxel_size=float(cell))


class FrustumPyramidNet(nn.Module):
    """Per-view frustum resampling plus per-level projection heads.

    The base grid samples the feature volume at uniform depths along each
    ray; level j is produced by a 1x1x1 conv head after j-1 stride-2 average
    poolings (ceil mode keeps odd dims exact-halving by ceil division).
    """

    def __init__(self, config: ConditionerConfig):
        super().__init__()
        self.config = config
        self.heads = nn.ModuleList([
            nn.Conv3d(config.volume_channels, config.kv_width, 1, bias=False)
            for _ in range(config.levels)
        ])
        self.pool = nn.AvgPool3d(2, stride=2, ceil_mode=True)

    def base_grid(self, volume: MorphableFeatureVolume, camera: CameraParams) -> Tensor:
        cfg = self.config
        pts = sample_frustum_points(camera, cfg.frustum_depth,
                                    cfg.frustum_height, cfg.frustum_width,
                                    dtype=volume.grid.dtype)
        return trilinear_interpolate(volume.grid, volume.bbox_min, volume.bbox_max, pts)

    def forward(self, volume: MorphableFeatureVolume,
                camera: CameraParams) -> FrustumFeaturePyramid:
        base = self.base_grid(volume, camera)
        x = base.permute(3, 0, 1, 2).unsqueeze(0)  # (1, f_V, d_F, h_F, w_F)
        levels = []
        for j, head in enumerate(self.heads):
            levels.append(head(x)[0].permute(1, 2, 3, 0))
            if j + 1 < len(self.heads):
                x = self.pool(x)
        return FrustumFeaturePyramid(levels=levels, camera=camera)


class MorphableConditioner(nn.Module):
    """Full conditioning path: lift -> unproject -> voxelize -> encode -> pyramids."""

    def __init__(self, config: ConditionerConfig | None = None):
        super().__init__()
        self.config = config or ConditionerConfig()
        self.lift = NoiseFeatureLift(self.config.noise_feature_dim)
        self.encoder = SparseConvEncoder(self.config.noise_feature_dim,
                                         self.config.volume_grid)
        self.pyramid = FrustumPyramidNet(self.config)

    def build_volume(self, noisy_images: Tensor, cameras: list[CameraParams],
                     vertices: Tensor) -> MorphableFeatureVolume:
        feats = self.lift(noisy_images)
        vf = unproject_to_vertices(feats, cameras, vertices)
        voxels = voxelize_vertices(vertices, vf, self.config.voxel_size)
        return self.encoder(voxels)

    def forward(self, noisy_images: Tensor, cameras: list[CameraParams],
                vertices: Tensor) -> tuple[MorphableFeatureVolume, list[FrustumFeaturePyramid]]:
        volume = self.build_volume(noisy_images, cameras, vertices)
        pyramids = [self.pyramid(volume, cam) for cam in cameras]
        return volume, pyramids


def volume_to_archive(volume: MorphableFeatureVolume, path) -> None:
    """Debug dump in the same archive format as morphable-model files."""
    import numpy as np

    archive.write_archive(path, {
        "kind": "feature-volume",
        "voxel_size": volume.voxel_size,
    }, {
        "grid": volume.grid.detach().numpy().astype(np.float32),
        "bbox_min": volume.bbox_min.numpy().astype(np.float32),
        "bbox_max": volume.bbox_max.numpy().astype(np.float32),
    })
