"""Preconditioned denoiser, weighted denoising loss and ODE sampler."""

from __future__ import annotations

import math
from typing import Callable

import torch
from torch import nn

from ..config import ScheduleConfig

# (x, sigma, cond) -> denoised x
Denoiser = Callable[..., torch.Tensor]


def precond_coeffs(sigma: torch.Tensor, sigma_data: float):
    """c_skip, c_out, c_in, c_noise for noise level(s) ``sigma``."""
    s2, d2 = sigma**2, sigma_data**2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / (s2 + d2).sqrt()
    c_in = 1.0 / (s2 + d2).sqrt()
    c_noise = sigma.log() / 4
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma: torch.Tensor, sigma_data: float) -> torch.Tensor:
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


class EDMDenoiser(nn.Module):
    """Wrap a raw network ``F(c_in x, c_noise, cond)`` as ``D(x, sigma, cond)``."""

    def __init__(self, net: nn.Module, sigma_data: float = 0.5):
        super().__init__()
        self.net = net
        self.sigma_data = sigma_data

    def forward(self, x, sigma, cond=None):
        sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1)
        if sigma.numel() == 1:
            sigma = sigma.expand(x.shape[0])
        c_skip, c_out, c_in, c_noise = precond_coeffs(sigma, self.sigma_data)
        bc = (-1,) + (1,) * (x.dim() - 1)
        f = self.net(c_in.view(bc) * x, c_noise, cond)
        return c_skip.view(bc) * x + c_out.view(bc) * f.to(x.dtype)


def sample_sigma(n: int, schedule: ScheduleConfig, generator=None, dtype=torch.float32) -> torch.Tensor:
    """Log-normal training noise levels."""
    return torch.exp(torch.randn(n, generator=generator, dtype=dtype) * schedule.p_std + schedule.p_mean)


def edm_loss(denoiser: Denoiser, x0: torch.Tensor, schedule: ScheduleConfig, cond=None, generator=None,
             sigma: torch.Tensor | None = None) -> torch.Tensor:
    """EDM-weighted squared error of ``denoiser`` at random (or given) noise levels."""
    b = x0.shape[0]
    if sigma is None:
        sigma = sample_sigma(b, schedule, generator, x0.dtype)
    sigma = torch.as_tensor(sigma, dtype=x0.dtype).reshape(-1).expand(b)
    bc = (-1,) + (1,) * (x0.dim() - 1)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype) * sigma.view(bc)
    denoised = denoiser(x0 + noise, sigma, cond)
    w = loss_weight(sigma, schedule.sigma_data).view(bc)
    return (w * (denoised - x0) ** 2).mean()


def sigma_grid(schedule: ScheduleConfig, n_steps: int | None = None) -> torch.Tensor:
    """rho-spaced decreasing noise levels from sigma_max to sigma_min, then 0."""
    n = schedule.n_steps if n_steps is None else n_steps
    if n < 1:
        raise ValueError("n_steps must be >= 1")
    if n == 1:
        return torch.tensor([schedule.sigma_max, 0.0], dtype=torch.float64)
    i = torch.arange(n, dtype=torch.float64)
    inv = 1.0 / schedule.rho
    t = (schedule.sigma_max**inv + i / (n - 1) * (schedule.sigma_min**inv - schedule.sigma_max**inv)) ** schedule.rho
    return torch.cat([t, torch.zeros(1, dtype=torch.float64)])


def guided(denoiser: Denoiser, cond, uncond, weight: float) -> Denoiser:
    """Classifier-free guidance ``D_u + w (D_c - D_u)``; ``w == 1`` is plain conditioning."""
    if cond is None or weight == 1.0:
        return lambda x, s: denoiser(x, s, cond)

    def fn(x, s):
        d_c = denoiser(x, s, cond)
        d_u = denoiser(x, s, uncond)
        return d_u + weight * (d_c - d_u)

    return fn


@torch.no_grad()
def edm_sample(denoiser: Denoiser, shape, schedule: ScheduleConfig, cond=None, uncond=None,
               guidance: float = 1.0, generator=None, n_steps: int | None = None, solver: str | None = None,
               dtype=torch.float32, x_init: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate the probability-flow ODE (optionally with churn) from sigma_max to 0.

    With ``s_churn == 0`` the result is a deterministic function of the
    generator state.
    """
    solver = solver or schedule.solver
    if solver not in ("heun", "euler"):
        raise ValueError(f"unknown solver {solver!r}")
    t = sigma_grid(schedule, n_steps)
    n = len(t) - 1
    d_fn = guided(denoiser, cond, uncond, guidance)
    if x_init is None:
        x = torch.randn(shape, generator=generator, dtype=torch.float64) * t[0]
    else:
        x = x_init.double() * t[0]
    for i in range(n):
        t_cur, t_next = t[i], t[i + 1]
        gamma = 0.0
        if schedule.s_churn > 0 and schedule.s_tmin <= t_cur <= schedule.s_tmax:
            gamma = min(schedule.s_churn / n, math.sqrt(2.0) - 1.0)
        t_hat = t_cur * (1 + gamma)
        if gamma > 0:
            eps = torch.randn(x.shape, generator=generator, dtype=torch.float64)
            x = x + (t_hat**2 - t_cur**2).sqrt() * schedule.s_noise * eps
        d = (x - d_fn(x.to(dtype), t_hat.to(dtype)).double()) / t_hat
        x_next = x + (t_next - t_hat) * d
        if solver == "heun" and t_next > 0:
            d2 = (x_next - d_fn(x_next.to(dtype), t_next.to(dtype)).double()) / t_next
            x_next = x + (t_next - t_hat) * 0.5 * (d + d2)
        x = x_next
    return x.to(dtype)


def gaussian_denoiser(mu: float, sigma_data: float) -> Denoiser:
    """Optimal denoiser for data ~ N(mu, sigma_data^2) per coordinate."""

    def fn(x, sigma, cond=None):
        s = torch.as_tensor(sigma, dtype=x.dtype)
        if s.dim() == 1:
            s = s.view((-1,) + (1,) * (x.dim() - 1))
        return mu + sigma_data**2 / (sigma_data**2 + s**2) * (x - mu)

    return fn
