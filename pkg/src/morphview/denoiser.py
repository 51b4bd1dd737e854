"""Noise predictor: a shared-weight multi-view UNet conditioned on a global
input-image embedding, a timestep embedding, and per-view frustum feature
pyramids through depth-wise cross-attention.

Each pixel's query attends only over the depth samples of its own ray, so
cross-view coupling flows exclusively through the shared feature volume.
UNet feature maps are channels-first; public image tensors channels-last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigurationError


@dataclass
class DenoiserConfig:
    levels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    attention_width: int = 64            # d: query/key width in attention
    kv_width: int = 64                   # d_r: frustum feature channels
    image_embedding_width: int = 64
    time_embedding_width: int = 128
    num_views: int = 8
    image_size: tuple[int, int] = (32, 32)
    norm_groups: int = 8

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.levels < 2:
            raise ConfigurationError("need at least 2 UNet levels")
        if len(self.channels) != self.levels:
            raise ConfigurationError("one channel count per level")
        if min(self.channels + (self.attention_width, self.kv_width,
                                self.image_embedding_width,
                                self.time_embedding_width, self.num_views)) < 1:
            raise ConfigurationError("widths must be positive")
        factor = 2 ** (self.levels - 1)
        if self.image_size[0] % factor or self.image_size[1] % factor:
            raise ConfigurationError(
                f"image size {self.image_size} must be divisible by {factor}")
        if self.time_embedding_width % 2:
            raise ConfigurationError("time embedding width must be even")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices of one depth-wise cross-attention site."""

    w_q: Tensor  # (d, c_phi)
    w_k: Tensor  # (d, d_r)
    w_v: Tensor  # (d, d_r)
    w_o: Tensor  # (c_phi, d), projects the value sum back to the feature width

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_k.shape[0] != d or self.w_v.shape[0] != d or self.w_o.shape[1] != d:
            raise ConfigurationError("attention widths disagree")
        if self.w_o.shape[0] != self.w_q.shape[1]:
            raise ConfigurationError("output projection must map back to phi width")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ConfigurationError(f"{name} contains non-finite values")


def attention_probs(phi: Tensor, frustum: Tensor, weights: AttentionWeights) -> Tensor:
    """Per-pixel softmax weights over the depth dimension, (N, d_j, h, w)."""
    d = weights.w_q.shape[0]
    q = torch.einsum("dc,nchw->ndhw", weights.w_q, phi)
    k = torch.einsum("dr,nrkhw->ndkhw", weights.w_k, frustum)
    logits = torch.einsum("ndhw,ndkhw->nkhw", q, k) / math.sqrt(d)
    return torch.softmax(logits, dim=1)


def depthwise_cross_attention(phi: Tensor, frustum: Tensor,
                              weights: AttentionWeights) -> Tensor:
    """Attend each pixel's feature over its ray's depth samples.

    phi: (N, c_phi, h, w) intermediate features; frustum: (N, d_r, d_j, h, w).
    The softmax-weighted value sum is projected back to c_phi and added
    residually to phi. Aggregation runs only along the depth axis; pixels
    and views never mix.
    """
    if phi.shape[0] != frustum.shape[0] or phi.shape[2:] != frustum.shape[3:]:
        raise ConfigurationError(
            f"phi {tuple(phi.shape)} and frustum {tuple(frustum.shape)} disagree")
    probs = attention_probs(phi, frustum, weights)
    v = torch.einsum("dr,nrkhw->ndkhw", weights.w_v, frustum)
    gathered = torch.einsum("nkhw,ndkhw->ndhw", probs, v)
    return phi + torch.einsum("cd,ndhw->nchw", weights.w_o, gathered)


class DepthwiseAttentionBlock(nn.Module):
    """Learnable projection matrices around the functional attention core."""

    def __init__(self, phi_channels: int, kv_width: int, attention_width: int):
        super().__init__()
        d = attention_width
        self.w_q = nn.Parameter(torch.randn(d, phi_channels) / math.sqrt(phi_channels))
        self.w_k = nn.Parameter(torch.randn(d, kv_width) / math.sqrt(kv_width))
        self.w_v = nn.Parameter(torch.randn(d, kv_width) / math.sqrt(kv_width))
        self.w_o = nn.Parameter(torch.randn(phi_channels, d) / (math.sqrt(d) * 10.0))

    @property
    def weights(self) -> AttentionWeights:
        return AttentionWeights(w_q=self.w_q, w_k=self.w_k, w_v=self.w_v, w_o=self.w_o)

    def forward(self, phi: Tensor, frustum: Tensor) -> Tensor:
        return depthwise_cross_attention(phi, frustum, self.weights)


def timestep_embedding(t: int, width: int, dtype=torch.float32) -> Tensor:
    """Standard sinusoidal features of a scalar timestep."""
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


class InputImageEncoder(nn.Module):
    """Small strided conv encoder replacing a pretrained image backbone.

    Produces the fixed-width global embedding the UNet is conditioned on.
    Features are average-pooled per quadrant rather than over the whole map:
    a single global pool is almost perfectly shift-invariant, which would
    make the embedding degenerate as a localization signal. Norm-free so
    zeroed weights give exactly a zero embedding.
    """

    def __init__(self, embedding_width: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
        ])
        self.act = nn.SiLU()
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.out = nn.Linear(64 * 4, embedding_width)

    def forward(self, image: Tensor) -> Tensor:
        # (h, w, 3) -> (embedding_width,)
        x = image.permute(2, 0, 1).unsqueeze(0)
        for conv in self.convs:
            x = self.act(conv(x))
        return self.out(self.pool(x).reshape(1, -1))[0]


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_width: int,
                 groups: int):
        super().__init__()
        g1 = math.gcd(groups, in_channels)
        g2 = math.gcd(groups, out_channels)
        self.norm1 = nn.GroupNorm(g1, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb = nn.Linear(temb_width, out_channels)
        self.norm2 = nn.GroupNorm(g2, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = (nn.Identity() if in_channels == out_channels
                     else nn.Conv2d(in_channels, out_channels, 1))

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb(temb).view(1, -1, 1, 1)
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class EmbeddingInject(nn.Module):
    """Global-embedding conditioning per level.

    Cross-attention against a single embedding token degenerates to adding a
    learned projection of that token at every pixel (the softmax over one key
    is identically 1), so it is implemented directly as the additive form;
    this also keeps every registered parameter on the gradient path.
    """

    def __init__(self, embedding_width: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(embedding_width, channels)

    def forward(self, x: Tensor, embedding: Tensor) -> Tensor:
        return x + self.proj(embedding).view(1, -1, 1, 1)


class Upsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class NoisePredictor(nn.Module):
    """Shared-weight per-view UNet with per-level depth-wise cross-attention."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        ch = cfg.channels
        tw = cfg.time_embedding_width
        self.image_encoder = InputImageEncoder(cfg.image_embedding_width)
        self.time_mlp = nn.Sequential(
            nn.Linear(tw, tw), nn.SiLU(), nn.Linear(tw, tw))
        self.stem = nn.Conv2d(3, ch[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_inject = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for j in range(cfg.levels):
            self.down_res.append(ResidualBlock(ch[j], ch[j], tw, cfg.norm_groups))
            self.down_inject.append(EmbeddingInject(cfg.image_embedding_width, ch[j]))
            self.down_attn.append(DepthwiseAttentionBlock(
                ch[j], cfg.kv_width, cfg.attention_width))
            if j + 1 < cfg.levels:
                self.downsample.append(
                    nn.Conv2d(ch[j], ch[j + 1], 3, stride=2, padding=1))

        self.mid_res = ResidualBlock(ch[-1], ch[-1], tw, cfg.norm_groups)

        self.up_sample = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_inject = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for j in range(cfg.levels - 2, -1, -1):
            self.up_sample.append(Upsample(ch[j + 1], ch[j]))
            self.up_res.append(ResidualBlock(2 * ch[j], ch[j], tw, cfg.norm_groups))
            self.up_inject.append(EmbeddingInject(cfg.image_embedding_width, ch[j]))
            self.up_attn.append(DepthwiseAttentionBlock(
                ch[j], cfg.kv_width, cfg.attention_width))

        self.head_norm = nn.GroupNorm(math.gcd(cfg.norm_groups, ch[0]), ch[0])
        self.head_act = nn.SiLU()
        self.head = nn.Conv2d(ch[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)   # zero prediction at initialization
        nn.init.zeros_(self.head.bias)

    def encode_input_image(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ConfigurationError("input image must be (h, w, 3)")
        return self.image_encoder(image)

    def _stack_pyramid_levels(self, pyramids) -> list[Tensor]:
        cfg = self.config
        if len(pyramids) == 0:
            raise ConfigurationError("need one pyramid per view")
        counts = {len(p.levels) for p in pyramids}
        if counts != {cfg.levels}:
            raise ConfigurationError(
                f"pyramid level counts {counts} do not match denoiser depth {cfg.levels}")
        stacked = []
        for j in range(cfg.levels):
            # (d_j, h_j, w_j, d_r) per view -> (N, d_r, d_j, h_j, w_j)
            stacked.append(torch.stack(
                [p.levels[j].permute(3, 0, 1, 2) for p in pyramids]))
        return stacked

    def predict_noise(self, x_t: Tensor, t: int, input_embedding: Tensor,
                      pyramids) -> Tensor:
        cfg = self.config
        if x_t.ndim != 4 or x_t.shape[-1] != 3:
            raise ConfigurationError("x_t must be (N, h, w, 3)")
        n = x_t.shape[0]
        if len(pyramids) != n:
            raise ConfigurationError(f"{len(pyramids)} pyramids for {n} views")
        frustum = self._stack_pyramid_levels(pyramids)
        dtype = x_t.dtype
        temb = self.time_mlp(timestep_embedding(t, cfg.time_embedding_width, dtype))
        emb = input_embedding.to(dtype)

        x = self.stem(x_t.permute(0, 3, 1, 2))
        skips = []
        for j in range(cfg.levels):
            x = self.down_res[j](x, temb)
            x = self.down_inject[j](x, emb)
            x = self.down_attn[j](x, frustum[j])
            skips.append(x)
            if j + 1 < cfg.levels:
                x = self.downsample[j](x)

        x = self.mid_res(x, temb)

        for i, j in enumerate(range(cfg.levels - 2, -1, -1)):
            x = self.up_sample[i](x)
            x = torch.cat([x, skips[j]], dim=1)
            x = self.up_res[i](x, temb)
            x = self.up_inject[i](x, emb)
            x = self.up_attn[i](x, frustum[j])

        out = self.head(self.head_act(self.head_norm(x)))
        return out.permute(0, 2, 3, 1)

    def forward(self, x_t: Tensor, t: int, input_embedding: Tensor, pyramids) -> Tensor:
        return self.predict_noise(x_t, t, input_embedding, pyramids)
