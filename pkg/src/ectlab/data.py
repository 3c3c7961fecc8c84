"""Deterministic synthetic data: mel-like ridge spectrograms and 2-D Gaussian mixtures.

Every batch is a pure function of ``(DataConfig, batch_index, domain)``; per-item
randomness comes from a ``numpy.random.SeedSequence`` keyed on those values, so
training and held-out streams never share a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import Tensor

from .errors import FieldError

MEL = "mel"
GMM = "gmm"

DOMAIN_TAGS = {"train": 0x7A11, "heldout": 0x4E1D}


def _default_means():
    return [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]


def _default_covs():
    return [[[0.01, 0.0], [0.0, 0.01]] for _ in range(4)]


@dataclass(frozen=True)
class DataConfig:
    mode: str = MEL
    mel_bins: int = 32
    n_min: int = 24
    n_max: int = 96
    tracks_min: int = 2
    tracks_max: int = 4
    ridge_width: float = 0.9
    blur_radius: float = 1.5
    prior_noise: float = 0.05
    sigma_data: float = 0.5
    gmm_means: list = field(default_factory=_default_means)
    gmm_covs: list = field(default_factory=_default_covs)
    gmm_weights: list = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (MEL, GMM):
            raise FieldError("mode", f"must be '{MEL}' or '{GMM}'")
        if self.n_min < 8:
            raise FieldError("n_min", "must be >= 8")
        if self.n_max < self.n_min:
            raise FieldError("n_max", "must be >= n_min")
        if self.mel_bins < 3:
            raise FieldError("mel_bins", "must be >= 3")
        if not 1 <= self.tracks_min <= self.tracks_max:
            raise FieldError("tracks_min", "need 1 <= tracks_min <= tracks_max")
        if self.blur_radius < 0 or self.prior_noise < 0 or self.ridge_width <= 0:
            raise FieldError("blur_radius", "blur_radius/prior_noise must be >= 0 and ridge_width > 0")
        w = np.asarray(self.gmm_weights, dtype=np.float64)
        means = np.asarray(self.gmm_means, dtype=np.float64)
        covs = np.asarray(self.gmm_covs, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 2 or len(w) != len(means) or covs.shape != (len(w), 2, 2):
            raise FieldError("gmm_means", "gmm_means/gmm_covs/gmm_weights shapes disagree")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise FieldError("gmm_weights", "must be non-negative and sum to 1")
        for c in covs:
            if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
                raise FieldError("gmm_covs", "must be symmetric positive-definite")


@dataclass
class Batch:
    x0: Tensor  # [B, 1, F, N]
    mu: Tensor  # [B, 1, F, N]
    mask: Tensor  # [B, N]
    lengths: list[int]

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.x0.to(dtype), self.mu.to(dtype), self.mask.to(dtype), list(self.lengths))

    def pad_frames(self, extra: int) -> "Batch":
        """Append ``extra`` zero (masked) frames to every tensor."""
        pad = (0, extra)
        return Batch(
            torch.nn.functional.pad(self.x0, pad),
            torch.nn.functional.pad(self.mu, pad),
            torch.nn.functional.pad(self.mask, pad),
            list(self.lengths),
        )

    def __len__(self):
        return self.x0.shape[0]


def length_mask(lengths: list[int], n_frames: int) -> Tensor:
    idx = torch.arange(n_frames)
    return (idx[None, :] < torch.tensor(lengths)[:, None]).to(torch.float32)


def _item_rng(cfg: DataConfig, domain: str, batch_index: int, item: int) -> np.random.Generator:
    ss = np.random.SeedSequence([cfg.seed, DOMAIN_TAGS[domain], batch_index, item])
    return np.random.default_rng(ss)


def render_mel_item(cfg: DataConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (target, prior) pair of shape [F, N] with N drawn from ``[n_min, n_max]``."""
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    f = cfg.mel_bins
    bins = np.arange(f, dtype=np.float64)[:, None]
    frames = np.arange(n, dtype=np.float64)
    target = np.zeros((f, n))
    n_tracks = int(rng.integers(cfg.tracks_min, cfg.tracks_max + 1))
    base = rng.uniform(1.5, f / n_tracks)
    for h in range(1, n_tracks + 1):
        # harmonic stack: centres at multiples of a slowly drifting fundamental
        drift = np.cumsum(rng.normal(0.0, 0.04, size=n))
        centre = h * (base + drift)
        amp = rng.uniform(0.4, 1.0) * (1.0 + 0.3 * np.sin(2 * np.pi * frames / rng.uniform(8, 40) + rng.uniform(0, 6.3)))
        target += amp[None, :] * np.exp(-0.5 * ((bins - centre[None, :]) / cfg.ridge_width) ** 2)
    target -= target.mean()
    std = target.std()
    target *= cfg.sigma_data / std if std > 0 else 0.0

    if cfg.blur_radius > 0:
        prior = gaussian_filter(target, sigma=cfg.blur_radius, mode="nearest")
    else:
        prior = target.copy()
    if cfg.prior_noise > 0:
        prior = prior + cfg.prior_noise * rng.standard_normal(prior.shape)
    return target, prior


def gen_mel_batch(cfg: DataConfig, batch_index: int, batch_size: int, domain: str = "train") -> Batch:
    items = [render_mel_item(cfg, _item_rng(cfg, domain, batch_index, i)) for i in range(batch_size)]
    lengths = [t.shape[1] for t, _ in items]
    n = max(lengths)
    x0 = np.zeros((batch_size, 1, cfg.mel_bins, n))
    mu = np.zeros_like(x0)
    for i, (t, p) in enumerate(items):
        x0[i, 0, :, : t.shape[1]] = t
        mu[i, 0, :, : p.shape[1]] = p
    return Batch(
        torch.from_numpy(x0).float(),
        torch.from_numpy(mu).float(),
        length_mask(lengths, n),
        lengths,
    )


def gmm_mean(cfg: DataConfig) -> np.ndarray:
    return np.asarray(cfg.gmm_weights) @ np.asarray(cfg.gmm_means)


def draw_gmm(cfg: DataConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    means = np.asarray(cfg.gmm_means, dtype=np.float64)
    chol = np.linalg.cholesky(np.asarray(cfg.gmm_covs, dtype=np.float64))
    comp = rng.choice(len(means), size=count, p=np.asarray(cfg.gmm_weights, dtype=np.float64))
    z = rng.standard_normal((count, 2))
    return means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def gen_gmm_batch(cfg: DataConfig, batch_index: int, batch_size: int, domain: str = "train") -> Batch:
    """Items are single 2-vectors laid out as [B, 1, 2, 1] maps; the prior is the mixture mean."""
    if cfg.mode != GMM:
        raise ValueError("gen_gmm_batch requires mode='gmm'")
    pts = draw_gmm(cfg, _item_rng(cfg, domain, batch_index, 0), batch_size)
    x0 = torch.from_numpy(pts).float().reshape(batch_size, 1, 2, 1)
    mu = torch.from_numpy(gmm_mean(cfg)).float().reshape(1, 1, 2, 1).expand(batch_size, 1, 2, 1).clone()
    return Batch(x0, mu, torch.ones(batch_size, 1), [1] * batch_size)


def gen_batch(cfg: DataConfig, batch_index: int, batch_size: int, domain: str = "train") -> Batch:
    if cfg.mode == GMM:
        return gen_gmm_batch(cfg, batch_index, batch_size, domain)
    return gen_mel_batch(cfg, batch_index, batch_size, domain)


def held_out_stream(cfg: DataConfig, batch_size: int, count: int) -> Iterator[Batch]:
    """``count`` evaluation batches drawn from a seed domain disjoint from training."""
    for i in range(count):
        yield gen_batch(cfg, i, batch_size, domain="heldout")


class SyntheticSource:
    """Training data source: step ``i`` gets batch ``i`` of the training domain."""

    def __init__(self, cfg: DataConfig, batch_size: int):
        self.cfg = cfg
        self.batch_size = batch_size

    def __call__(self, index: int) -> Batch:
        return gen_batch(self.cfg, index, self.batch_size)


class ListSource:
    """Cycles through a fixed list of batches (e.g. an imported dataset)."""

    def __init__(self, batches: list[Batch]):
        if not batches:
            raise ValueError("data source is empty")
        self.batches = batches

    def __call__(self, index: int) -> Batch:
        return self.batches[index % len(self.batches)]


def export_dataset(cfg: DataConfig, out_dir: str | Path, n_batches: int, batch_size: int, extra: dict | None = None) -> Path:
    """Write raw little-endian float32 tensors plus a ``manifest.json`` describing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for b in range(n_batches):
        batch = gen_batch(cfg, b, batch_size)
        files = {}
        for name in ("x0", "mu"):
            fname = f"batch{b:05d}_{name}.f32"
            getattr(batch, name).numpy().astype("<f4").tofile(out / fname)
            files[name] = fname
        entries.append({"index": b, "shape": list(batch.x0.shape), "lengths": batch.lengths, "files": files})
    manifest = {
        "format": "ectlab-dataset",
        "version": 1,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "batch_size": batch_size,
        "batches": entries,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def import_dataset(path: str | Path) -> list[Batch]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    batches = []
    for e in manifest["batches"]:
        shape = tuple(e["shape"])
        x0 = torch.from_numpy(np.fromfile(path / e["files"]["x0"], dtype="<f4").reshape(shape).copy())
        mu = torch.from_numpy(np.fromfile(path / e["files"]["mu"], dtype="<f4").reshape(shape).copy())
        batches.append(Batch(x0, mu, length_mask(e["lengths"], shape[-1]), list(e["lengths"])))
    return batches
