"""Gated U-Net backbone and the skip-preconditioned denoiser built on it.

Tensors follow the [batch, channels, mel-bins, frames] layout. Frame masks are
[batch, frames] and are re-applied after every block, so padded frames stay
exactly zero throughout the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import FieldError
from .schedule import ScheduleConfig, c_in, c_noise, c_out, c_skip


@dataclass(frozen=True)
class ArchConfig:
    depth: int = 2
    base_width: int = 32
    width_mults: tuple[int, ...] = (1, 2, 2)
    emb_dim: int = 64
    msgate_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "width_mults", tuple(int(m) for m in self.width_mults))
        if self.depth < 1:
            raise FieldError("depth", "must be >= 1")
        if len(self.width_mults) != self.depth + 1:
            raise FieldError("width_mults", f"needs depth + 1 = {self.depth + 1} entries")
        if self.base_width < 1 or min(self.width_mults) < 1 or self.emb_dim < 2 or self.emb_dim % 2:
            raise FieldError("base_width", "widths must be >= 1 and emb_dim a positive even number")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.width_mults]


def downsample_mask(mask: Tensor) -> Tensor:
    # a coarse frame is valid if any fine frame under it is
    return F.max_pool1d(mask[:, None, :], kernel_size=2, stride=2, ceil_mode=True)[:, 0, :]


def masked_global_mean(h: Tensor, mask: Tensor) -> Tensor:
    """Average over valid (bin, frame) cells only: [B, C, F, N] -> [B, C, 1, 1]."""
    m = mask[:, None, None, :]
    count = m.sum(dim=(2, 3), keepdim=True) * h.shape[2]
    return (h * m).sum(dim=(2, 3), keepdim=True) / count


class MSGate(nn.Module):
    """Multi-scale gate: 1x1, 3x3, 5x5 and global-pool branches fused into a sigmoid gate on ``h``."""

    def __init__(self, channels: int, fuse_bias: float = 2.0):
        super().__init__()
        self.channels = channels
        self.branch1 = nn.Conv2d(channels, channels, 1)
        self.branch3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.branch5 = nn.Conv2d(channels, channels, 5, padding=2)
        self.branch_global = nn.Conv2d(channels, channels, 1)
        self.fuse = nn.Conv2d(4 * channels, channels, 1)
        nn.init.constant_(self.fuse.bias, fuse_bias)

    def gate(self, h: Tensor, mask: Tensor | None = None) -> Tensor:
        if h.shape[1] != self.channels:
            raise ValueError(f"MSGate built for {self.channels} channels, got {h.shape[1]}")
        if mask is None:
            pooled = h.mean(dim=(2, 3), keepdim=True)
        else:
            pooled = masked_global_mean(h, mask)
        # nearest upsampling of a 1x1 map is a broadcast
        glob = self.branch_global(pooled).expand_as(h)
        feats = torch.cat([self.branch1(h), self.branch3(h), self.branch5(h), glob], dim=1)
        return torch.sigmoid(self.fuse(feats))

    def forward(self, h: Tensor, mask: Tensor | None = None) -> Tensor:
        return h * self.gate(h, mask)


class ConvBlock(nn.Module):
    def __init__(self, c_in_: int, c_out_: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in_, c_out_, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out_, c_out_, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out_)

    def forward(self, x: Tensor, emb: Tensor, m: Tensor) -> Tensor:
        h = F.silu(self.conv1(x)) + self.emb(emb)[:, :, None, None]
        return F.silu(self.conv2(h)) * m


def sinusoidal_embedding(c: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(math.log(0.5), math.log(64.0), half, dtype=c.dtype, device=c.device))
    ang = c[:, None] * freqs[None, :]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=1)


class GatedUNet(nn.Module):
    """The raw backbone: (scaled x, noise embedding input, mu, mask) -> [B, 1, F, N]."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        w = arch.widths
        e = arch.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        c_prev = 2  # noisy input and prior stacked on the channel axis
        for lvl in range(arch.depth):
            self.enc.append(ConvBlock(c_prev, w[lvl], e))
            self.down.append(nn.Conv2d(w[lvl], w[lvl + 1], 3, stride=2, padding=1))
            c_prev = w[lvl + 1]
        self.mid = ConvBlock(c_prev, w[arch.depth], e)
        self.gates = nn.ModuleList([MSGate(w[lvl]) for lvl in range(arch.depth)]) if arch.msgate_enabled else None
        self.dec = nn.ModuleList()
        c_up = w[arch.depth]
        for lvl in reversed(range(arch.depth)):
            self.dec.append(ConvBlock(c_up + w[lvl], w[lvl], e))
            c_up = w[lvl]
        self.out = nn.Conv2d(w[0], 1, 3, padding=1)

    def forward(self, x_scaled: Tensor, noise_in: Tensor, mu: Tensor, mask: Tensor) -> Tensor:
        if x_scaled.shape != mu.shape or x_scaled.shape[1] != 1:
            raise ValueError(f"x and mu must share shape [B,1,F,N], got {tuple(x_scaled.shape)} and {tuple(mu.shape)}")
        if mask.shape != (x_scaled.shape[0], x_scaled.shape[-1]):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match input {tuple(x_scaled.shape)}")
        emb = self.time_mlp(sinusoidal_embedding(noise_in, self.arch.emb_dim))
        masks = [mask]
        h = torch.cat([x_scaled, mu], dim=1) * mask[:, None, None, :]
        skips = []
        for lvl in range(self.arch.depth):
            m = masks[-1][:, None, None, :]
            h = self.enc[lvl](h, emb, m)
            skips.append(h)
            masks.append(downsample_mask(masks[-1]))
            h = self.down[lvl](h) * masks[-1][:, None, None, :]
        h = self.mid(h, emb, masks[-1][:, None, None, :])
        for i, lvl in enumerate(reversed(range(self.arch.depth))):
            skip = skips[lvl]
            if self.gates is not None:
                skip = self.gates[lvl](skip, masks[lvl])
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = self.dec[i](torch.cat([h, skip], dim=1), emb, masks[lvl][:, None, None, :])
        return self.out(h) * mask[:, None, None, :]


def _per_item(sigma, batch: int, like: Tensor) -> Tensor:
    s = torch.as_tensor(sigma, dtype=like.dtype, device=like.device)
    if s.ndim == 0:
        s = s.expand(batch)
    return s.reshape(batch)


class Denoiser(nn.Module):
    """Preconditioned denoiser ``c_skip * x + c_out * F(c_in * x, c_noise, mu)``.

    Trailing frames that are padding for every batch item are trimmed before the
    backbone runs and restored as zeros afterwards, so appending padding never
    changes the computation on valid frames.
    """

    def __init__(self, arch: ArchConfig, schedule: ScheduleConfig):
        super().__init__()
        self.arch = arch
        self.schedule = schedule
        self.backbone = GatedUNet(arch)

    def forward(self, x_t: Tensor, sigma, mu: Tensor, mask: Tensor) -> Tensor:
        n = x_t.shape[-1]
        valid = int(mask.sum(dim=1).max().item())
        if valid < 1:
            raise ValueError("every batch needs at least one valid frame")
        if not torch.isfinite(x_t).all():
            raise FloatingPointError("non-finite values in denoiser input")
        x = x_t[..., :valid]
        mu_c = mu[..., :valid]
        m = mask[:, :valid]
        s = _per_item(sigma, x.shape[0], x)
        s4 = s[:, None, None, None]
        raw = self.backbone(x * c_in(s4, self.schedule), c_noise(s), mu_c, m)
        out = (c_skip(s4, self.schedule) * x + c_out(s4, self.schedule) * raw) * m[:, None, None, :]
        if valid < n:
            out = F.pad(out, (0, n - valid))
        return out

    def backbone_output(self, x_t: Tensor, sigma, mu: Tensor, mask: Tensor) -> Tensor:
        s = _per_item(sigma, x_t.shape[0], x_t)
        return self.backbone(x_t * c_in(s[:, None, None, None], self.schedule), c_noise(s), mu, mask)


def score_from_denoiser(x_t: Tensor, sigma, denoised: Tensor) -> Tensor:
    """Score estimate ``(D(x) - x) / sigma^2``."""
    s = torch.as_tensor(sigma, dtype=x_t.dtype)
    if bool((s <= 0).any()):
        raise ValueError("score undefined at sigma <= 0")
    if s.ndim == 1:
        s = s[:, None, None, None]
    return (denoised - x_t) / s**2


def build_denoiser(arch: ArchConfig, schedule: ScheduleConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Denoiser:
    """Freshly initialised denoiser; initialisation is a pure function of ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(arch, schedule)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
