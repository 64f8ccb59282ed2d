"""Noise schedules and the closed-form forward/reverse step arithmetic.

Step indices follow the usual 1-based convention: ``betas[s - 1]`` is the
variance added when moving from ``z_{s-1}`` to ``z_s``.  ``alpha_bar(0)`` is
defined as 1 so that step 0 denotes the clean latent.

All functions work on numpy arrays and torch tensors alike; steps may be a
python int or an integer array/tensor with one entry per leading batch item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "sqrt")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        alpha_bars = np.cumprod(alphas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def S(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, s):
        """ᾱ_s with ᾱ_0 = 1; accepts scalars or integer arrays."""
        padded = np.concatenate([[1.0], self.alpha_bars])
        s_np = np.asarray(_to_numpy(s))
        if np.any((s_np < 0) | (s_np > self.S)):
            raise ScheduleError(f"step out of range [0, {self.S}]")
        return padded[s_np]


def make_schedule(S: int = 1000, kind: str = "linear", beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Build a schedule with ``S`` steps.

    ``linear`` interpolates β from ``beta_min`` to ``beta_max``.  ``sqrt``
    discretises the text-diffusion profile ᾱ(t) = 1 - sqrt(t + 1e-4) and
    caps every β at 0.999; the β range arguments are only validated for it.
    """
    if not isinstance(S, (int, np.integer)) or S < 1:
        raise ScheduleError(f"S must be a positive integer, got {S!r}")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, S, dtype=np.float64)
    elif kind == "sqrt":
        def abar(t):
            return 1.0 - math.sqrt(t + 1e-4)
        betas = np.array([
            min(1.0 - abar((i + 1) / S) / abar(i / S), 0.999) for i in range(S)
        ])
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(kind=kind, betas=betas)


def _to_numpy(x):
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return x


def _coef(values, like):
    """Broadcast per-batch coefficients against ``like`` (numpy or torch)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    shape = values.shape + (1,) * (like.ndim - values.ndim)
    if hasattr(like, "detach"):
        import torch
        return torch.as_tensor(values.reshape(shape), dtype=like.dtype, device=like.device)
    return values.reshape(shape)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_steps(sched, s, lo):
    s_np = np.asarray(_to_numpy(s))
    if np.any((s_np < lo) | (s_np > sched.S)):
        raise ScheduleError(f"step must lie in [{lo}, {sched.S}], got {s_np}")
    return s_np


def forward_marginal(sched: NoiseSchedule, z0, s, noise):
    """Sample q(z_s | z_0) = N(sqrt(ᾱ_s) z_0, (1 - ᾱ_s) I) by reparameterisation."""
    _check_shapes(z0, noise)
    s_np = _check_steps(sched, s, 1)
    ab = sched.alpha_bar(s_np)
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), z0) * noise


def forward_step(sched: NoiseSchedule, z_prev, s, noise):
    """One forward transition q(z_s | z_{s-1}) = N(sqrt(1 - β_s) z_{s-1}, β_s I)."""
    _check_shapes(z_prev, noise)
    s_np = _check_steps(sched, s, 1)
    beta = sched.betas[s_np - 1]
    return _coef(np.sqrt(1.0 - beta), z_prev) * z_prev + _coef(np.sqrt(beta), z_prev) * noise


def renoise_from_z0hat(sched: NoiseSchedule, z0_hat, s_prev, noise=None, deterministic=False,
                       z_s=None, s=None):
    """Move a z_0 estimate to the (lower) step ``s_prev``.

    Stochastic mode re-applies the forward marginal with fresh ``noise``.
    Deterministic mode reuses the noise implied by the current latent ``z_s``
    at step ``s`` (the DDIM eta=0 update) and ignores ``noise``.
    """
    s_prev_np = _check_steps(sched, s_prev, 1)
    if s is not None:
        s_np = _check_steps(sched, s, 1)
        if np.any(s_prev_np >= s_np):
            raise ScheduleError(f"s_prev ({s_prev_np}) must be below the current step ({s_np})")
    if not deterministic:
        if noise is None:
            raise ValueError("stochastic re-noising needs a noise sample")
        return forward_marginal(sched, z0_hat, s_prev_np, noise)

    if z_s is None or s is None:
        raise ValueError("deterministic re-noising needs the current latent z_s and its step s")
    _check_shapes(z0_hat, z_s)
    ab = sched.alpha_bar(s_np)
    ab_prev = sched.alpha_bar(s_prev_np)
    eps_hat = (z_s - _coef(np.sqrt(ab), z_s) * z0_hat) / _coef(np.sqrt(1.0 - ab), z_s)
    return _coef(np.sqrt(ab_prev), z0_hat) * z0_hat + _coef(np.sqrt(1.0 - ab_prev), z0_hat) * eps_hat


def make_trajectory(S: int, num_steps: int) -> list[int]:
    """Evenly strided reverse steps ending at 1, e.g. (1000, 100) -> [991, 981, ..., 1].

    Any remainder of ``S / num_steps`` is left unvisited at the high end.
    """
    if num_steps < 1 or num_steps > S:
        raise ScheduleError(f"num_steps must lie in [1, {S}], got {num_steps}")
    stride = S // num_steps
    return [1 + k * stride for k in range(num_steps - 1, -1, -1)]
