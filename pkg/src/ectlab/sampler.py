"""Deterministic samplers for the probability-flow ODE ``dx/dsigma = (x - D(x, sigma)) / sigma``.

A denoiser here is any callable ``D(x, sigma, mu, mask) -> x0_hat``; trained
``Denoiser`` modules and analytic oracles both qualify. The step into sigma = 0
returns the denoiser output directly, which is what the Euler update reduces to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .losses import masked_mean_sq
from .schedule import ScheduleConfig, karras_step_grid


class CountingDenoiser:
    """Wraps a denoiser and counts evaluations (NFE)."""

    def __init__(self, fn):
        self.fn = fn
        self.nfe = 0

    def __call__(self, x, sigma, mu, mask):
        self.nfe += 1
        return self.fn(x, sigma, mu, mask)


@dataclass
class Trajectory:
    sigmas: list[float] = field(default_factory=list)
    states: list[Tensor] = field(default_factory=list)

    def append(self, sigma: float, x: Tensor):
        if self.sigmas and sigma >= self.sigmas[-1]:
            raise ValueError("trajectory sigmas must strictly decrease")
        self.sigmas.append(float(sigma))
        self.states.append(x.detach().clone())

    def __len__(self):
        return len(self.sigmas)


def init_state(mu: Tensor, mask: Tensor, rng: torch.Generator, cfg: ScheduleConfig) -> Tensor:
    eps = torch.randn(mu.shape, generator=rng, dtype=torch.float64).to(mu.dtype)
    return (mu + cfg.sigma_max * eps) * mask[:, None, None, :]


def _sig(sigma: float, x: Tensor) -> Tensor:
    return torch.full((x.shape[0],), float(sigma), dtype=x.dtype)


@torch.no_grad()
def euler(denoiser, x: Tensor, sigmas: Tensor, mu: Tensor, mask: Tensor, trajectory: Trajectory | None = None) -> Tensor:
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        if trajectory is not None:
            trajectory.append(s, x)
        d = denoiser(x, _sig(s, x), mu, mask)
        if s_next == 0.0:
            x = d
        else:
            x = x + (s_next - s) * (x - d) / s
    if trajectory is not None:
        trajectory.append(float(sigmas[-1]), x)
    return x


@torch.no_grad()
def heun(denoiser, x: Tensor, sigmas: Tensor, mu: Tensor, mask: Tensor) -> Tensor:
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = denoiser(x, _sig(s, x), mu, mask)
        if s_next == 0.0:
            x = d
            continue
        slope = (x - d) / s
        x_pred = x + (s_next - s) * slope
        d_next = denoiser(x_pred, _sig(s_next, x), mu, mask)
        slope_next = (x_pred - d_next) / s_next
        x = x + (s_next - s) * 0.5 * (slope + slope_next)
    return x


@torch.no_grad()
def sample_onestep(denoiser, mu: Tensor, mask: Tensor, rng: torch.Generator, cfg: ScheduleConfig) -> Tensor:
    x = init_state(mu, mask, rng, cfg)
    return denoiser(x, _sig(cfg.sigma_max, x), mu, mask)


def sample_euler(denoiser, mu, mask, n_steps: int, rng: torch.Generator, cfg: ScheduleConfig, record: bool = False):
    x = init_state(mu, mask, rng, cfg)
    traj = Trajectory() if record else None
    out = euler(denoiser, x, karras_step_grid(n_steps, cfg), mu, mask, traj)
    return (out, traj) if record else out


def sample_heun(denoiser, mu, mask, n_steps: int, rng: torch.Generator, cfg: ScheduleConfig) -> Tensor:
    x = init_state(mu, mask, rng, cfg)
    return heun(denoiser, x, karras_step_grid(n_steps, cfg), mu, mask)


def sample(denoiser, mu, mask, method: str, n_steps: int, rng: torch.Generator, cfg: ScheduleConfig) -> tuple[Tensor, int]:
    """Dispatch on ``method``; returns the samples and the NFE spent per batch."""
    counter = CountingDenoiser(denoiser)
    if method == "onestep":
        out = sample_onestep(counter, mu, mask, rng, cfg)
    elif method == "euler":
        out = sample_euler(counter, mu, mask, n_steps, rng, cfg)
    elif method == "heun":
        out = sample_heun(counter, mu, mask, n_steps, rng, cfg)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return out * mask[:, None, None, :], counter.nfe


def _per_item_msq(a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
    m = mask[:, None, None, :]
    return (((a - b) ** 2) * m).sum(dim=(1, 2, 3)) / (m.sum(dim=(1, 2, 3)) * a.shape[2])


@torch.no_grad()
def consistency_deviation(denoiser, trajectory: Trajectory, mu: Tensor, mask: Tensor, per_item: bool = False):
    """Mean masked squared distance between D(x_i, sigma_i) and D at the last positive-sigma state.

    With ``per_item=True`` a list with one deviation per batch item is returned.
    """
    pos = [(s, x) for s, x in zip(trajectory.sigmas, trajectory.states) if s > 0]
    if not pos:
        raise ValueError("trajectory has no states with sigma > 0")
    if len(pos) == 1:
        return [0.0] * mu.shape[0] if per_item else 0.0
    s_last, x_last = pos[-1]
    ref = denoiser(x_last, _sig(s_last, x_last), mu, mask)
    if per_item:
        devs = torch.stack([_per_item_msq(denoiser(x, _sig(s, x), mu, mask), ref, mask) for s, x in pos])
        return devs.mean(dim=0).tolist()
    devs = [masked_mean_sq(denoiser(x, _sig(s, x), mu, mask), ref, mask).item() for s, x in pos]
    return float(np.mean(devs))


class GaussianOracle:
    """Exact denoiser for scalar data ``x0 ~ N(0, s^2)``: ``D(x, sigma) = s^2 x / (s^2 + sigma^2)``."""

    def __init__(self, data_std: float):
        self.var = data_std**2

    def __call__(self, x, sigma, mu=None, mask=None):
        s = torch.as_tensor(sigma, dtype=x.dtype)
        if s.ndim == 1:
            s = s.reshape(-1, *([1] * (x.ndim - 1)))
        return self.var * x / (self.var + s**2)

    def ode_solution(self, x_start: Tensor, sigma_start: float, sigma_end: float) -> Tensor:
        """Closed-form PF-ODE flow: x scales with sqrt(s^2 + sigma^2)."""
        return x_start * np.sqrt((self.var + sigma_end**2) / (self.var + sigma_start**2))


# -- sample dumps -----------------------------------------------------------


def write_pgm16(path: str | Path, image: np.ndarray) -> tuple[float, float]:
    """Binary 16-bit PGM (rows = mel-bins, columns = frames), affinely rescaled to 0..65535.

    Returns the (min, max) amplitude that maps to 0 and 65535; a constant image maps to 0.
    """
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.rint((image - lo) * scale).astype(">u2")  # PGM stores 16-bit samples MSB first
    rows, cols = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())
    return lo, hi


def read_pgm16(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(rows, cols)


def dump_sample(out_dir: str | Path, stem: str, image: np.ndarray) -> dict:
    """Write ``<stem>.pgm``, ``<stem>.pgm.txt`` (``min max`` sidecar) and ``<stem>.f32`` (raw little-endian)."""
    out = Path(out_dir)
    lo, hi = write_pgm16(out / f"{stem}.pgm", image)
    (out / f"{stem}.pgm.txt").write_text(f"{lo!r} {hi!r}\n")
    np.asarray(image, dtype="<f4").tofile(out / f"{stem}.f32")
    return {"stem": stem, "rows": int(image.shape[0]), "cols": int(image.shape[1]), "min": lo, "max": hi}


def write_metadata(out_dir: str | Path, meta: dict) -> Path:
    path = Path(out_dir) / "metadata.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path

