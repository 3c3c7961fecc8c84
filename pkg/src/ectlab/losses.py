"""EDM pretraining loss and the mask-normalized consistency-tuning loss."""

from __future__ import annotations

import torch
from torch import Tensor

from .schedule import ScheduleConfig, anneal_r, sample_training_sigma


def masked_mean_sq(a: Tensor, b: Tensor, mask: Tensor, normalize: bool = True, weight: Tensor | None = None) -> Tensor:
    """Squared error summed over valid (bin, frame) cells divided by the number of such cells.

    With ``normalize=False`` the error is averaged over the whole padded tensor
    instead, so the value depends on how much padding the batch carries.
    ``weight`` is an optional per-item multiplier.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if mask.sum() <= 0:
        raise ValueError("mask has no valid frames")
    if not normalize:
        sq = (a - b) ** 2
        if weight is not None:
            sq = sq * weight.reshape(-1, 1, 1, 1)
        return sq.mean()
    # trailing all-padding frames are dropped before reducing, so extra padding
    # cannot even perturb the summation order
    valid = int(mask.sum(dim=1).max().item())
    m = mask[:, None, None, :valid]
    sq = (a[..., :valid] - b[..., :valid]) ** 2 * m
    if weight is not None:
        sq = sq * weight.reshape(-1, 1, 1, 1)
    return sq.sum() / (m.sum() * a.shape[2])


def edm_weight(sigma: Tensor, cfg: ScheduleConfig) -> Tensor:
    sd = cfg.sigma_data
    return (sigma**2 + sd**2) / (sigma * sd) ** 2


def _expand(sigma, x: Tensor) -> Tensor:
    s = torch.as_tensor(sigma, dtype=x.dtype)
    if s.ndim == 0:
        s = s.expand(x.shape[0])
    return s


def edm_loss(model, x0: Tensor, mu: Tensor, mask: Tensor, sigma, eps: Tensor, masked_norm: bool = True, weighted: bool = False) -> Tensor:
    """Denoising loss of ``model`` at noise level ``sigma`` with the given noise draw."""
    s = _expand(sigma, x0)
    x_t = x0 + s[:, None, None, None] * eps
    denoised = model(x_t, s, mu, mask)
    w = edm_weight(s, model.schedule) if weighted else None
    return masked_mean_sq(denoised, x0, mask, normalize=masked_norm, weight=w)


def consistency_target(model, x0: Tensor, mu: Tensor, mask: Tensor, r: Tensor, eps: Tensor) -> Tensor:
    """Stop-gradient output at the smaller level r; r = 0 maps to x0 by the boundary condition."""
    with torch.no_grad():
        if bool((r == 0).all()):
            return x0.detach().clone()
        zero = r == 0
        r_eval = torch.where(zero, torch.full_like(r, model.schedule.sigma_min), r)
        out = model(x0 + r_eval[:, None, None, None] * eps, r_eval, mu, mask)
        return torch.where(zero[:, None, None, None], x0, out).detach()


def ect_loss(
    model,
    x0: Tensor,
    mu: Tensor,
    mask: Tensor,
    t,
    r,
    eps: Tensor,
    masked_norm: bool = True,
    target_model=None,
) -> Tensor:
    """Consistency loss between the t-branch and a stop-gradient r-branch sharing one noise draw.

    ``target_model`` defaults to ``model`` itself; passing a separate copy is
    only useful to check that no gradient reaches the target branch.
    """
    t = _expand(t, x0)
    r = _expand(r, x0)
    if bool((r < 0).any()) or bool((r >= t).any()):
        raise ValueError("need 0 <= r < t for every item")
    target = consistency_target(target_model if target_model is not None else model, x0, mu, mask, r, eps)
    x_t = x0 + t[:, None, None, None] * eps
    return masked_mean_sq(model(x_t, t, mu, mask), target, mask, normalize=masked_norm)


def draw_noise(rng: torch.Generator, like: Tensor, mask: Tensor) -> Tensor:
    eps = torch.randn(like.shape, generator=rng, dtype=torch.float64).to(like.dtype)
    return eps * mask[:, None, None, :]


def make_tuning_pair(rng: torch.Generator, k: int, cfg: ScheduleConfig, x0: Tensor, mask: Tensor):
    """Per-item (t, r, eps) for tuning step ``k``."""
    t = sample_training_sigma(rng, cfg, x0.shape[0], dtype=x0.dtype, tune=True)
    r = anneal_r(t, k, cfg)
    return t, r, draw_noise(rng, x0, mask)
