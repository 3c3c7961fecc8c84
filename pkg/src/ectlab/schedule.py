"""Noise-level arithmetic: preconditioning, sigma proposals, step grids, r-annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import FieldError


@dataclass(frozen=True)
class ScheduleConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    tune_p_mean: float | None = None  # tuning proposal; None reuses p_mean / p_std
    tune_p_std: float | None = None
    anneal_doublings: int = 8
    total_tune_steps: int = 10_000

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise FieldError("sigma_min", "need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise FieldError("sigma_data", "must be positive")
        if self.rho < 1:
            raise FieldError("rho", "must be >= 1")
        if self.p_std <= 0:
            raise FieldError("p_std", "must be positive")
        if self.tune_p_std is not None and self.tune_p_std <= 0:
            raise FieldError("tune_p_std", "must be positive or null")
        if self.anneal_doublings < 1:
            raise FieldError("anneal_doublings", "must be >= 1")
        if self.total_tune_steps < 1:
            raise FieldError("total_tune_steps", "must be >= 1")


def _require_positive(sigma, allow_zero=False):
    bad = (sigma < 0) if allow_zero else (sigma <= 0)
    if isinstance(sigma, Tensor):
        bad = bool(bad.any())
    if bad:
        raise ValueError(f"noise level must be {'non-negative' if allow_zero else 'positive'}, got {sigma}")


def c_skip(sigma, cfg: ScheduleConfig):
    _require_positive(sigma)
    sd2 = cfg.sigma_data**2
    return sd2 / (sigma**2 + sd2)


def c_out(sigma, cfg: ScheduleConfig):
    _require_positive(sigma)
    sd = cfg.sigma_data
    return sigma * sd / (sigma**2 + sd**2) ** 0.5


def c_in(sigma, cfg: ScheduleConfig):
    # sigma = 0 is harmless here (pure input scaling), so only negatives are rejected
    _require_positive(sigma, allow_zero=True)
    return 1.0 / (sigma**2 + cfg.sigma_data**2) ** 0.5


def c_noise(sigma):
    _require_positive(sigma)
    if isinstance(sigma, Tensor):
        return torch.log(sigma) / 4
    return math.log(sigma) / 4


def sample_training_sigma(
    rng: torch.Generator,
    cfg: ScheduleConfig,
    size: int | tuple[int, ...] = (),
    dtype: torch.dtype = torch.float64,
    clamp: bool = True,
    tune: bool = False,
) -> Tensor:
    """Lognormal noise levels ``exp(p_mean + p_std * z)``, clamped to ``[sigma_min, sigma_max]``.

    With ``tune=True`` the ``tune_p_*`` parameters are used where set.
    """
    if isinstance(size, int):
        size = (size,)
    p_mean, p_std = cfg.p_mean, cfg.p_std
    if tune:
        p_mean = cfg.tune_p_mean if cfg.tune_p_mean is not None else p_mean
        p_std = cfg.tune_p_std if cfg.tune_p_std is not None else p_std
    z = torch.randn(size, generator=rng, dtype=torch.float64)
    sigma = torch.exp(p_mean + p_std * z)
    if clamp:
        sigma = sigma.clamp(cfg.sigma_min, cfg.sigma_max)
    return sigma.to(dtype)


def karras_step_grid(n_steps: int, cfg: ScheduleConfig) -> Tensor:
    """Descending rho-spaced grid from sigma_max to sigma_min, with a terminal 0 appended.

    Returns ``n_steps + 1`` float64 values.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps == 1:
        return torch.tensor([cfg.sigma_max, 0.0], dtype=torch.float64)
    inv_rho = 1.0 / cfg.rho
    hi = cfg.sigma_max**inv_rho
    lo = cfg.sigma_min**inv_rho
    ramp = torch.arange(n_steps, dtype=torch.float64) / (n_steps - 1)
    sigmas = (hi + ramp * (lo - hi)) ** cfg.rho
    # pin endpoints exactly; the power round trip loses a few ulps
    sigmas[0] = cfg.sigma_max
    sigmas[-1] = cfg.sigma_min
    return torch.cat([sigmas, sigmas.new_zeros(1)])


def anneal_gap(k: int, cfg: ScheduleConfig) -> float:
    """Relative gap ``(t - r) / t`` at tuning step ``k``: halves ``anneal_doublings`` times over the run."""
    if k < 0:
        raise ValueError(f"tuning step must be >= 0, got {k}")
    k = min(k, cfg.total_tune_steps)
    return 2.0 ** -((k * cfg.anneal_doublings) // cfg.total_tune_steps)


def anneal_r(t, k: int, cfg: ScheduleConfig):
    """Smaller noise level r paired with t at tuning step k; r = 0 at k = 0 and r < t throughout.

    Steps beyond ``total_tune_steps`` saturate at the final gap.
    """
    return t * (1.0 - anneal_gap(k, cfg))
