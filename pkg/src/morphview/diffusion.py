"""Multi-view DDPM core: schedule, forward/reverse processes, loss, DDIM.

All N views share one timestep within a step (a single joint volume
conditions them) and the forward process factorizes per view, so noising is
per-view independent. Timesteps are 1-based: t in [1, T], with t=0 meaning
clean data; schedule arrays index t-1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .errors import ConfigurationError, TrainingFault

# Denoiser signature: (x_t (N,h,w,3), t, input_embedding, pyramids) -> eps_hat.
DenoiserFn = Callable[[Tensor, int, object, object], Tensor]
# Conditioning rebuild: x_t -> per-view pyramids (None for unconditional tests).
PyramidBuilder = Callable[[Tensor], object]


@dataclass(frozen=True)
class NoiseSchedule:
    """Fixed beta_t / alpha_t / alpha_bar_t / sigma_t over T timesteps.

    sigma_t^2 = beta_t (fixed-variance reverse process). alpha_bar is
    strictly decreasing whenever 0 < beta_t < 1; alpha_bar_T being small
    enough to sample from pure noise is a property of the default schedule,
    not enforced for deliberately tiny test schedules.
    """

    T: int
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.T < 1 or self.beta.shape != (self.T,):
            raise ConfigurationError("schedule arrays must have length T >= 1")
        if not ((self.beta > 0).all() and (self.beta < 1).all()):
            raise ConfigurationError("need 0 < beta_t < 1 for all t")
        if self.T > 1 and not (self.alpha_bar[1:] < self.alpha_bar[:-1]).all():
            raise ConfigurationError("alpha_bar must be strictly decreasing")

    def beta_at(self, t: int) -> float:
        return self.beta[t - 1].item()

    def alpha_at(self, t: int) -> float:
        return self.alpha[t - 1].item()

    def alpha_bar_at(self, t: int) -> float:
        # alpha_bar_0 = 1 by convention (no noise at t=0)
        return 1.0 if t == 0 else self.alpha_bar[t - 1].item()

    def sigma_at(self, t: int) -> float:
        return self.sigma[t - 1].item()


def make_noise_schedule(T: int = 1000, beta_start: float = 1e-4,
                        beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with derived alpha, alpha_bar, sigma."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    sigma = torch.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def schedule_hash(schedule: NoiseSchedule) -> str:
    h = hashlib.sha256()
    h.update(str(schedule.T).encode())
    h.update(schedule.beta.numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class MultiViewState:
    """Joint state of the N fixed-viewpoint images at one timestep."""

    images: Tensor  # (N, h, w, 3), [-1, 1]-scaled at t=0
    t: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ConfigurationError("state images must be (N, h, w, 3)")
        if self.t < 0:
            raise ConfigurationError("timestep must be >= 0")


def forward_diffuse(x0: MultiViewState, t: int, noise: Tensor,
                    schedule: NoiseSchedule) -> MultiViewState:
    """Closed-form forward marginal x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not (1 <= t <= schedule.T):
        raise ConfigurationError(f"t must be in [1, {schedule.T}]")
    if noise.shape != x0.images.shape:
        raise ConfigurationError("noise shape must match images")
    ab = schedule.alpha_bar_at(t)
    images = (ab ** 0.5) * x0.images + ((1.0 - ab) ** 0.5) * noise
    return MultiViewState(images=images, t=t)


def reverse_mean(x: Tensor, eps_pred: Tensor, t: int,
                 schedule: NoiseSchedule) -> Tensor:
    """Posterior mean mu = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)."""
    if t < 1:
        raise ConfigurationError("reverse mean needs t >= 1")
    beta = schedule.beta_at(t)
    ab = schedule.alpha_bar_at(t)
    alpha = schedule.alpha_at(t)
    return (x - (beta / (1.0 - ab) ** 0.5) * eps_pred) / alpha ** 0.5


def reverse_step(state: MultiViewState, eps_pred: Tensor, schedule: NoiseSchedule,
                 generator: torch.Generator | None = None) -> MultiViewState:
    """One ancestral step t -> t-1: reverse_mean plus sigma_t * z, except z = 0 at t = 1."""
    t = state.t
    mu = reverse_mean(state.images, eps_pred, t, schedule)
    if t > 1:
        z = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        mu = mu + schedule.sigma_at(t) * z
    return MultiViewState(images=mu, t=t - 1)


def training_loss(x0_views: Tensor, input_embedding, pyramid_builder: PyramidBuilder,
                  denoiser: DenoiserFn, schedule: NoiseSchedule,
                  generator: torch.Generator) -> Tensor:
    """Noise-prediction loss at a uniformly drawn timestep.

    Draws t ~ U[1, T] and per-view standard normal noise, forms x_t, rebuilds
    conditioning from the noisy views, and returns the mean squared error
    between true and predicted noise over all views and pixels.
    """
    t = int(torch.randint(1, schedule.T + 1, (1,), generator=generator).item())
    noise = torch.randn(x0_views.shape, generator=generator, dtype=x0_views.dtype,
                        device=x0_views.device)
    x_t = forward_diffuse(MultiViewState(images=x0_views, t=0), t, noise, schedule)
    pyramids = pyramid_builder(x_t.images)
    eps_pred = denoiser(x_t.images, t, input_embedding, pyramids)
    loss = ((noise - eps_pred) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingFault("non-finite training loss", {
            "t": t,
            "x0_norm": x0_views.norm().item(),
            "xt_norm": x_t.images.norm().item(),
            "pred_norm": eps_pred.detach().norm().item(),
        })
    return loss


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided descending timestep subsequence; steps = T gives T..1."""
    if not (1 <= steps <= T):
        raise ConfigurationError(f"steps must be in [1, {T}]")
    if steps == 1:
        return [T]
    taus = [int(round(1 + (T - 1) * i / (steps - 1))) for i in range(steps)]
    return sorted(set(taus), reverse=True)


def ddim_sample(denoiser: DenoiserFn, input_embedding, pyramid_builder: PyramidBuilder,
                schedule: NoiseSchedule, shape: Sequence[int], steps: int = 50,
                generator: torch.Generator | None = None, eta: float = 0.0,
                dtype=torch.float32, callback=None) -> MultiViewState:
    """DDIM sampler over the joint multi-view state.

    Starts from x_T ~ N(0, I) for all N views, walks an evenly strided
    timestep subsequence, and rebuilds the conditioning volume from the
    current noisy views at every step. eta = 0 is deterministic given x_T;
    eta = 1 with steps = T matches ancestral sampling with the smaller
    (posterior) variance choice.
    """
    x = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    taus = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(taus):
        t_next = taus[i + 1] if i + 1 < len(taus) else 0
        pyramids = pyramid_builder(x)
        eps = denoiser(x, t, input_embedding, pyramids)
        ab_t = schedule.alpha_bar_at(t)
        ab_next = schedule.alpha_bar_at(t_next)
        x0_hat = (x - (1.0 - ab_t) ** 0.5 * eps) / ab_t ** 0.5
        sigma = 0.0
        if eta > 0 and t_next >= 1:
            sigma = (eta * ((1.0 - ab_next) / (1.0 - ab_t)) ** 0.5
                     * (1.0 - ab_t / ab_next) ** 0.5)
        direction = max(1.0 - ab_next - sigma ** 2, 0.0) ** 0.5 * eps
        x = ab_next ** 0.5 * x0_hat + direction
        if sigma > 0:
            z = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            x = x + sigma * z
        if callback is not None:
            callback(t_next, x)
    return MultiViewState(images=x, t=0)
