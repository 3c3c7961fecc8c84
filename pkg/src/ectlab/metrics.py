"""Evaluation metrics: sharpness, fitted-Gaussian W2, finite-difference gradient checks, reports."""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .data import GMM, gen_batch, held_out_stream
from .denoiser import build_denoiser
from .losses import draw_noise, ect_loss, edm_loss
from .sampler import Trajectory, consistency_deviation, euler, init_state, sample
from .schedule import karras_step_grid


# -- sharpness ---------------------------------------------------------------


def sharpness_map(x: np.ndarray) -> float:
    """Mean |5-point Laplacian| over interior cells of a [F, N] map (higher = crisper)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise ValueError(f"sharpness needs at least 3 bins and 3 valid frames, got {x.shape}")
    lap = x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:] - 4.0 * x[1:-1, 1:-1]
    return float(np.abs(lap).mean())


def sharpness(x: Tensor, mask: Tensor) -> np.ndarray:
    """Per-item sharpness of a [B, 1, F, N] batch, each item cropped to its valid frames."""
    lengths = mask.sum(dim=1).round().long().tolist()
    arr = x.detach().cpu().double().numpy()
    return np.array([sharpness_map(arr[i, 0, :, :n]) for i, n in enumerate(lengths)])


# -- Gaussian 2-Wasserstein ----------------------------------------------------


def fit_gaussian(points) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return p.mean(axis=0), np.cov(p, rowvar=False)


def w2_gaussians(m1, c1, m2, c2) -> tuple[float, bool]:
    """Closed-form W2 between 2-D Gaussians; returns (distance, regularized).

    For 2x2 SPD matrices ``tr sqrt(C2^1/2 C1 C2^1/2) = sqrt(tr(C1 C2) + 2 sqrt(det C1 det C2))``,
    so no eigendecomposition is needed.
    """
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    regularized = False
    if np.linalg.det(c1) <= 0 or np.linalg.det(c2) <= 0:
        c1 = c1 + 1e-9 * np.eye(2)
        c2 = c2 + 1e-9 * np.eye(2)
        regularized = True
    cross = math.sqrt(max(np.trace(c1 @ c2) + 2.0 * math.sqrt(max(np.linalg.det(c1) * np.linalg.det(c2), 0.0)), 0.0))
    tr = np.trace(c1) + np.trace(c2)
    cov_term = tr - 2.0 * cross
    # rounding floor: identical covariances cancel to a few ulps of tr
    if abs(cov_term) <= 64 * np.finfo(np.float64).eps * tr:
        cov_term = 0.0
    mean_term = float(np.sum((np.asarray(m1, dtype=np.float64) - np.asarray(m2, dtype=np.float64)) ** 2))
    return math.sqrt(max(mean_term + cov_term, 0.0)), regularized


def gaussian_w2_detail(samples_a, samples_b) -> tuple[float, bool]:
    a = np.asarray(samples_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(samples_b, dtype=np.float64).reshape(-1, 2)
    if len(a) < 32 or len(b) < 32:
        raise ValueError("gaussian_w2 needs at least 32 samples per side")
    return w2_gaussians(*fit_gaussian(a), *fit_gaussian(b))


def gaussian_w2(samples_a, samples_b) -> float:
    return gaussian_w2_detail(samples_a, samples_b)[0]


# -- gradient check -----------------------------------------------------------


@dataclass
class GradcheckReport:
    per_tensor: dict[str, float]
    coords_checked: int
    max_rel_err: float
    tolerance: float
    stop_grad_max_abs: float | None = None
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        ok = self.max_rel_err <= self.tolerance
        if self.stop_grad_max_abs is not None:
            ok = ok and self.stop_grad_max_abs == 0.0
        return ok

    def table(self) -> str:
        width = max(len(n) for n in self.per_tensor)
        rows = [f"{'tensor'.ljust(width)}  max_rel_err"]
        rows += [f"{n.ljust(width)}  {e:.3e}{'  FAIL' if e > self.tolerance else ''}" for n, e in self.per_tensor.items()]
        rows.append(f"coords={self.coords_checked} max={self.max_rel_err:.3e} tol={self.tolerance:.1e}")
        if self.stop_grad_max_abs is not None:
            rows.append(f"stop-gradient target max |grad| = {self.stop_grad_max_abs:.1e}")
        return "\n".join(rows)


def _allocate(sizes: dict[str, int], n: int) -> dict[str, int]:
    """One coordinate per tensor, the rest proportional to size by largest remainder."""
    out = {k: min(1, v) for k, v in sizes.items()}
    spare = {k: v - out[k] for k, v in sizes.items()}
    left = n - sum(out.values())
    total = sum(spare.values())
    if left <= 0 or total == 0:
        return out
    share = {k: left * v / total for k, v in spare.items()}
    for k in out:
        out[k] += int(share[k])
    rest = n - sum(out.values())
    for k in sorted(share, key=lambda k: share[k] - int(share[k]), reverse=True)[:rest]:
        out[k] += 1
    return out


def gradcheck(
    model: torch.nn.Module,
    loss_fn: Callable[[], Tensor],
    epsilon: float = 1e-4,
    tolerance: float = 1e-4,
    n_coords: int = 512,
    seed: int = 0,
    grad_hook: Callable[[str, Tensor], Tensor] | None = None,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    Every parameter tensor gets at least one coordinate; the rest of the
    ``n_coords`` budget is spread proportionally to tensor size. Relative error
    is ``|a - f| / max(|a|, |f|, 1e-12)``. ``grad_hook`` lets tests tamper with
    the analytic gradients.
    """
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    for p in params.values():
        p.grad = None
    if grad_hook is not None:
        analytic = {n: grad_hook(n, g) for n, g in analytic.items()}

    rng = np.random.default_rng(seed)
    total = sum(p.numel() for p in params.values())
    counts = _allocate({n: p.numel() for n, p in params.items()}, min(n_coords, total))
    per_tensor = {}
    worst = {}
    checked = 0
    with torch.no_grad():
        for name, p in params.items():
            k = counts[name]
            idx = rng.choice(p.numel(), size=k, replace=False)
            flat = p.view(-1)
            errs = []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * epsilon)
                a = analytic[name].view(-1)[i].item()
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
                errs.append(err)
                if err >= worst.get("rel_err", -1):
                    worst = {"tensor": name, "index": int(i), "analytic": a, "numeric": fd, "rel_err": err}
            per_tensor[name] = float(max(errs))
            checked += k
    return GradcheckReport(per_tensor, checked, max(per_tensor.values()), tolerance, worst=worst)


def stop_gradient_leak(model, x0, mu, mask, t, r, eps, masked_norm=True) -> float:
    """Max |grad| reaching a separate copy of the network used only for the consistency target."""
    target = copy.deepcopy(model)
    for p in target.parameters():
        p.grad = None
    loss = ect_loss(model, x0, mu, mask, t, r, eps, masked_norm=masked_norm, target_model=target)
    loss.backward()
    for p in model.parameters():
        p.grad = None
    leak = 0.0
    for p in target.parameters():
        if p.grad is not None:
            leak = max(leak, p.grad.abs().max().item())
    return leak


def _unit_scale_init(model, batch, g: torch.Generator, bias_std: float, sweeps: int = 2) -> None:
    """Redraw weights, then standardise every conv/linear output channel on ``batch``.

    Layers are visited in execution order so each one is fitted to already
    standardised inputs. Every channel ends up with unit spread and a mean of
    ``N(0, bias_std^2)``, so no activation is saturated or vanishing. The fused
    gate keeps its constructed bias offset on top of that.
    """
    layers = {n: m for n, m in model.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))}
    offsets = {}
    with torch.no_grad():
        for n, m in layers.items():
            m.weight.copy_(torch.randn(m.weight.shape, generator=g, dtype=m.weight.dtype))
            base = m.bias.clone() if n.endswith(".fuse") else torch.zeros_like(m.bias)
            offsets[n] = base + torch.randn(m.bias.shape, generator=g, dtype=m.bias.dtype) * bias_std
        # replicate the batch over a spread of noise levels so the embedding path sees variety
        reps = 16
        x0 = batch.x0.repeat(reps, 1, 1, 1)
        mu = batch.mu.repeat(reps, 1, 1, 1)
        mask = batch.mask.repeat(reps, 1)
        sigma = torch.logspace(-1.0, 1.0, x0.shape[0], dtype=x0.dtype)
        x_t = x0 + sigma[:, None, None, None] * torch.randn(x0.shape, generator=g, dtype=x0.dtype)

        def channel_stats():
            stats, order = {}, []

            def grab(n, out):
                # channel axis is 1 for convs, last for linears
                o = out.transpose(1, -1) if out.ndim == 4 else out
                flat = o.reshape(-1, o.shape[-1])
                if n not in stats:
                    order.append(n)
                    stats[n] = (flat.mean(0), flat.std(0))

            hooks = [m.register_forward_hook(lambda mod, i, o, n=n: grab(n, o)) for n, m in layers.items()]
            try:
                model(x_t, sigma, mu, mask)
            finally:
                for h in hooks:
                    h.remove()
            return stats, order

        _, order = channel_stats()
        for _ in range(sweeps):
            for n in order:
                stats, _ = channel_stats()
                mean, std = stats[n]
                # channels that barely vary over the batch are scaled by their magnitude instead
                std = torch.maximum(std, 0.25 * torch.sqrt(mean**2 + std**2)).clamp_min(1e-12)
                m = layers[n]
                m.weight.div_(std.reshape((-1,) + (1,) * (m.weight.ndim - 1)))
                m.bias.copy_((m.bias - mean) / std + offsets[n])


def run_gradcheck(
    cfg,
    n_coords: int = 512,
    tolerance: float = 1e-4,
    epsilon: float = 1e-4,
    bias_std: float = 0.1,
    grad_hook=None,
) -> GradcheckReport:
    """Gradient check of EDM + consistency loss on ``cfg``'s architecture in double precision.

    Uses one small training batch (two items of different length, so masking is
    exercised) and also measures the gradient reaching the stop-gradient target.
    Parameters are redrawn at a random point where every layer's output has unit
    spread. Freshly initialised narrow nets either attenuate or saturate, which
    leaves some gradients below the finite-difference rounding floor.
    """
    dtype = torch.float64
    model = build_denoiser(cfg.arch, cfg.schedule, seed=cfg.seed, dtype=dtype)
    batch = gen_batch(cfg.data, 0, 2).to(dtype)
    _unit_scale_init(model, batch, torch.Generator().manual_seed(cfg.seed), bias_std)
    rng = torch.Generator().manual_seed(cfg.seed)
    eps_a = draw_noise(rng, batch.x0, batch.mask)
    eps_b = draw_noise(rng, batch.x0, batch.mask)
    sigma = torch.tensor([0.3, 1.7], dtype=dtype)
    t = torch.tensor([0.8, 2.5], dtype=dtype)
    r = torch.tensor([0.5, 1.9], dtype=dtype)
    norm = cfg.ablation.masked_norm_enabled
    # the target branch is a constant for the analytic gradient, so the
    # finite differences must not move it either
    frozen = copy.deepcopy(model)

    def loss_fn():
        return (
            edm_loss(model, batch.x0, batch.mu, batch.mask, sigma, eps_a, masked_norm=norm)
            + ect_loss(model, batch.x0, batch.mu, batch.mask, t, r, eps_b, masked_norm=norm, target_model=frozen)
        )

    report = gradcheck(model, loss_fn, epsilon=epsilon, tolerance=tolerance, n_coords=n_coords, seed=cfg.seed, grad_hook=grad_hook)
    report.stop_grad_max_abs = stop_gradient_leak(model, batch.x0, batch.mu, batch.mask, t, r, eps_b, masked_norm=norm)
    return report


# -- evaluation -----------------------------------------------------------------


REPORT_COLUMNS = (
    "fingerprint", "checkpoint", "mode", "method", "n_steps", "use_ema", "nfe", "sample_count",
    "masked_mse", "sharpness", "sharpness_gt", "w2", "w2_regularized", "consistency_dev", "wall_ms_per_sample",
)


@dataclass
class EvalReport:
    fingerprint: str
    checkpoint: str
    mode: str
    method: str
    n_steps: int
    use_ema: bool
    nfe: int
    sample_count: int
    wall_ms_per_sample: float
    masked_mse: float | None = None
    sharpness: float | None = None
    sharpness_gt: float | None = None
    w2: float | None = None
    w2_regularized: bool | None = None
    consistency_dev: float | None = None
    per_sample_sharpness: list[float] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> list[str]:
        d = asdict(self)
        out = []
        for col in REPORT_COLUMNS:
            v = d[col]
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(f"{v:.9e}")
            else:
                out.append(str(v))
        return out

    def summary(self) -> str:
        d = asdict(self)
        keys = ["method", "n_steps", "nfe", "sample_count", "masked_mse", "sharpness", "sharpness_gt", "w2", "consistency_dev", "wall_ms_per_sample"]
        return "\n".join(f"{k:<20} {d[k] if not isinstance(d[k], float) else format(d[k], '.6g')}" for k in keys if d[k] is not None)


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ema = "_ema" if report.use_ema else ""
    jpath = out / f"{stem}_{report.method}{report.n_steps}{ema}_{report.fingerprint}.json"
    jpath.write_text(report.to_json())
    cpath = out / "eval.csv"
    new = not cpath.exists()
    with open(cpath, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(REPORT_COLUMNS)
        w.writerow(report.csv_row())
    return jpath, cpath


def evaluate(
    model,
    cfg,
    n_samples: int,
    method: str,
    n_steps: int,
    seed: int = 0,
    use_ema: bool = False,
    checkpoint_name: str = "",
    batch_size: int = 64,
    consistency_samples: int = 64,
    with_consistency: bool = True,
) -> EvalReport:
    """Sample ``n_samples`` items conditioned on held-out data and score them.

    Mel mode reports masked MSE to ground truth and sharpness; GMM mode reports
    the fitted-Gaussian W2 to held-out ground truth. The consistency deviation is
    measured on Euler trajectories (``cfg.sampler.consistency_steps`` steps).
    """
    dtype = cfg.dtype
    sched = cfg.schedule
    rng = torch.Generator().manual_seed(seed)
    n_batches = math.ceil(n_samples / batch_size)
    gen, gt, sharp, sharp_gt = [], [], [], []
    sq_sum, cell_sum = 0.0, 0.0
    nfe = 0
    wall = 0.0
    count = 0
    model.eval()
    cons_batches = []
    for batch in held_out_stream(cfg.data, batch_size, n_batches):
        take = min(batch_size, n_samples - count)
        if take <= 0:
            break
        x0 = batch.x0[:take].to(dtype)
        mu = batch.mu[:take].to(dtype)
        mask = batch.mask[:take].to(dtype)
        t0 = time.perf_counter()
        out, nfe = sample(model, mu, mask, method, n_steps, rng, sched)
        wall += time.perf_counter() - t0
        count += take
        if cfg.data.mode == GMM:
            gen.append(out.reshape(take, 2).double().numpy())
            gt.append(x0.reshape(take, 2).double().numpy())
        else:
            m = mask[:, None, None, :]
            sq_sum += (((out - x0) ** 2) * m).sum().item()
            cell_sum += (m.sum() * x0.shape[2]).item()
            sharp.append(sharpness(out, mask))
            sharp_gt.append(sharpness(x0, mask))
        if with_consistency and sum(len(b[0]) for b in cons_batches) < consistency_samples:
            cons_batches.append((mu[: consistency_samples], mask[: consistency_samples]))

    report = EvalReport(
        fingerprint=cfg.fingerprint(),
        checkpoint=checkpoint_name,
        mode=cfg.data.mode,
        method=method,
        n_steps=n_steps,
        use_ema=use_ema,
        nfe=nfe,
        sample_count=count,
        wall_ms_per_sample=wall * 1000.0 / count,
    )
    if cfg.data.mode == GMM:
        report.w2, report.w2_regularized = gaussian_w2_detail(np.concatenate(gen), np.concatenate(gt))
    else:
        s = np.concatenate(sharp)
        report.masked_mse = sq_sum / cell_sum
        report.sharpness = float(np.median(s))
        report.sharpness_gt = float(np.median(np.concatenate(sharp_gt)))
        report.per_sample_sharpness = [float(v) for v in s]
    if with_consistency:
        report.consistency_dev = mean_consistency_deviation(model, cons_batches, cfg, seed + 1, consistency_samples)
    return report


def mean_consistency_deviation(model, batches, cfg, seed: int, max_items: int) -> float:
    """Consistency deviation averaged over per-item Euler trajectories from held-out conditions."""
    rng = torch.Generator().manual_seed(seed)
    grid = karras_step_grid(cfg.sampler.consistency_steps, cfg.schedule)
    devs = []
    for mu, mask in batches:
        mu, mask = mu[: max_items - len(devs)], mask[: max_items - len(devs)]
        if len(mu) == 0:
            break
        traj = Trajectory()
        euler(model, init_state(mu, mask, rng, cfg.schedule), grid, mu, mask, traj)
        devs.extend(consistency_deviation(model, traj, mu, mask, per_item=True))
    return float(np.mean(devs))
