"""Two-stage training: EDM pretraining, then consistency tuning with an EMA shadow."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import Tensor

from . import persistence
from .config import RunConfig
from .data import Batch, SyntheticSource
from .denoiser import Denoiser, build_denoiser
from .errors import CheckpointError, ConfigError
from .losses import draw_noise, ect_loss, edm_loss, make_tuning_pair
from .schedule import sample_training_sigma

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
TUNE = "tune"
LOG_COLUMNS = ("step", "phase", "loss", "t_mean", "r_mean", "grad_norm", "wall_ms")


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    exp_avg: dict[str, Tensor]
    exp_avg_sq: dict[str, Tensor]

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        zeros = {n: torch.zeros_like(p, memory_format=torch.contiguous_format) for n, p in params.items()}
        return cls(lr, beta1, beta2, eps, 0, zeros, {n: z.clone() for n, z in zeros.items()})

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


@torch.no_grad()
def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], opt: AdamState) -> None:
    """Bias-corrected Adam update, in place. Nothing changes if any gradient is non-finite."""
    if set(grads) != set(opt.exp_avg):
        raise ValueError("gradient names do not match optimizer state")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}; step aborted")
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, p in params.items():
        g = grads[name]
        m = opt.exp_avg[name]
        v = opt.exp_avg_sq[name]
        m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
        v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
        denom = (v / bc2).sqrt_().add_(opt.eps)
        p.addcdiv_(m, denom, value=-opt.lr / bc1)


@dataclass
class EmaState:
    decay: float
    shadow: dict[str, Tensor]

    @classmethod
    def from_params(cls, params: dict[str, Tensor], decay: float) -> "EmaState":
        return cls(decay, {n: p.detach().clone() for n, p in params.items()})


@torch.no_grad()
def ema_update(ema: EmaState, params: dict[str, Tensor]) -> None:
    for name, s in ema.shadow.items():
        s.mul_(ema.decay).add_(params[name].detach(), alpha=1.0 - ema.decay)


@dataclass
class TrainState:
    cfg: RunConfig
    phase: str
    model: Denoiser
    opt: AdamState
    rng: torch.Generator
    total_steps: int
    step: int = 0
    ema: EmaState | None = None

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.model.named_parameters())


def _phase_seed(cfg: RunConfig, phase: str) -> int:
    return (cfg.seed * 1_000_003 + (11 if phase == PRETRAIN else 23)) % (2**63)


def new_pretrain_state(cfg: RunConfig) -> TrainState:
    model = build_denoiser(cfg.arch, cfg.schedule, seed=cfg.seed, dtype=cfg.dtype)
    t = cfg.trainer
    opt = AdamState.for_params(dict(model.named_parameters()), t.lr_pretrain, t.adam_beta1, t.adam_beta2, t.adam_eps)
    rng = torch.Generator().manual_seed(_phase_seed(cfg, PRETRAIN))
    return TrainState(cfg, PRETRAIN, model, opt, rng, total_steps=t.pretrain_steps)


def model_from_checkpoint(ckpt: persistence.Checkpoint, cfg: RunConfig | None = None, use_ema: bool = False) -> Denoiser:
    cfg = cfg or RunConfig.from_dict(ckpt.config)
    model = build_denoiser(cfg.arch, cfg.schedule, seed=cfg.seed, dtype=cfg.dtype)
    persistence.check_against_model(ckpt, model)
    source = ckpt.ema if (use_ema and ckpt.ema is not None) else ckpt.params
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(source[name].to(p.dtype))
    return model


def new_tune_state(cfg: RunConfig, pretrained: persistence.Checkpoint) -> TrainState:
    if pretrained.phase != PRETRAIN:
        raise CheckpointError(f"tuning must start from a pretrain checkpoint, got phase {pretrained.phase!r}")
    model = model_from_checkpoint(pretrained, cfg)
    t = cfg.trainer
    params = dict(model.named_parameters())
    opt = AdamState.for_params(params, t.lr_tune, t.adam_beta1, t.adam_beta2, t.adam_eps)
    rng = torch.Generator().manual_seed(_phase_seed(cfg, TUNE))
    return TrainState(cfg, TUNE, model, opt, rng, total_steps=t.tune_steps, ema=EmaState.from_params(params, t.ema_decay))


def state_from_checkpoint(ckpt: persistence.Checkpoint, cfg: RunConfig | None = None) -> TrainState:
    """Rebuild the exact training state (params, moments, EMA, RNG, step) for resuming."""
    cfg = cfg or RunConfig.from_dict(ckpt.config)
    model = model_from_checkpoint(ckpt, cfg)
    params = dict(model.named_parameters())
    o = ckpt.optimizer
    opt = AdamState(
        o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
        {n: ckpt.opt_m[n].clone() for n in params},
        {n: ckpt.opt_v[n].clone() for n in params},
    )
    rng = torch.Generator()
    rng.set_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8))
    ema = EmaState(ckpt.ema_decay, {n: ckpt.ema[n].clone() for n in params}) if ckpt.ema is not None else None
    total = cfg.trainer.pretrain_steps if ckpt.phase == PRETRAIN else cfg.trainer.tune_steps
    return TrainState(cfg, ckpt.phase, model, opt, rng, total_steps=total, step=ckpt.step, ema=ema)


def to_checkpoint(state: TrainState) -> persistence.Checkpoint:
    params = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    return persistence.Checkpoint(
        config=state.cfg.to_dict(),
        phase=state.phase,
        step=state.step,
        total_steps=state.total_steps,
        params=params,
        rng_state=bytes(state.rng.get_state().numpy().tobytes()),
        optimizer=state.opt.hyper(),
        opt_m={n: t.clone() for n, t in state.opt.exp_avg.items()},
        opt_v={n: t.clone() for n, t in state.opt.exp_avg_sq.items()},
        ema={n: t.clone() for n, t in state.ema.shadow.items()} if state.ema else None,
        ema_decay=state.ema.decay if state.ema else None,
        meta={
            "fingerprint": state.cfg.fingerprint(),
            "masked_norm_enabled": state.cfg.ablation.masked_norm_enabled,
            "msgate_enabled": state.cfg.ablation.msgate_enabled,
        },
    )


def _backward_and_update(state: TrainState, loss: Tensor, clip: float | None) -> float:
    params = state.params
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())).item()
    if clip is not None and norm > clip:
        scale = clip / (norm + 1e-6)
        grads = {n: g * scale for n, g in grads.items()}
    adam_step(params, grads, state.opt)
    for p in params.values():
        p.grad = None
    return norm


def pretrain_step(state: TrainState, batch: Batch) -> dict:
    if state.phase != PRETRAIN:
        raise RuntimeError("pretrain_step called outside the pretrain phase")
    cfg = state.cfg
    batch = batch.to(cfg.dtype)
    sigma = sample_training_sigma(state.rng, cfg.schedule, len(batch), dtype=cfg.dtype)
    eps = draw_noise(state.rng, batch.x0, batch.mask)
    loss = edm_loss(
        state.model, batch.x0, batch.mu, batch.mask, sigma, eps,
        masked_norm=cfg.ablation.masked_norm_enabled, weighted=cfg.trainer.edm_weighting,
    )
    grad_norm = _backward_and_update(state, loss, None)
    state.step += 1
    return {"step": state.step, "phase": PRETRAIN, "loss": loss.item(), "t_mean": sigma.mean().item(), "r_mean": 0.0, "grad_norm": grad_norm}


def tune_step(state: TrainState, batch: Batch) -> dict:
    if state.phase != TUNE:
        raise RuntimeError("tune_step called outside the tune phase")
    cfg = state.cfg
    batch = batch.to(cfg.dtype)
    k = state.step
    t, r, eps = make_tuning_pair(state.rng, k, cfg.schedule, batch.x0, batch.mask)
    loss = ect_loss(state.model, batch.x0, batch.mu, batch.mask, t, r, eps, masked_norm=cfg.ablation.masked_norm_enabled)
    grad_norm = _backward_and_update(state, loss, cfg.trainer.clip_grad)
    ema_update(state.ema, state.params)
    state.step += 1
    return {"step": state.step, "phase": TUNE, "loss": loss.item(), "t_mean": t.mean().item(), "r_mean": r.mean().item(), "grad_norm": grad_norm}


def format_log_row(rec: dict) -> list[str]:
    return [
        str(rec["step"]),
        rec["phase"],
        f"{rec['loss']:.9e}",
        f"{rec['t_mean']:.9e}",
        f"{rec['r_mean']:.9e}",
        f"{rec['grad_norm']:.9e}",
        f"{rec['wall_ms']:.3f}",
    ]


class CsvLog:
    def __init__(self, path: Path, phase: str | None = None, resume_step: int = 0):
        self.path = path
        if phase is not None and path.exists():
            self._drop_after(phase, resume_step)
        new = not path.exists() or path.stat().st_size == 0
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a", newline="")
        except OSError as e:
            raise OSError(f"cannot open training log {path}: {e}") from e
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.writer.writerow(LOG_COLUMNS)

    def _drop_after(self, phase: str, step: int):
        # a resumed phase rewrites its steps past the checkpoint; keep one row per step
        with open(self.path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = rows[:1] + [r for r in rows[1:] if not (r[1] == phase and int(r[0]) > step)]
        if len(keep) != len(rows):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(keep)

    def write(self, rec: dict):
        self.writer.writerow(format_log_row(rec))

    def close(self):
        self.fh.close()


def checkpoint_name(phase: str, step: int) -> str:
    return f"{phase}_step{step:07d}.ckpt"


def run_phase(
    cfg: RunConfig,
    phase: str,
    source: Callable[[int], Batch] | None = None,
    checkpoint_in: persistence.Checkpoint | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> persistence.Checkpoint:
    """Run ``phase`` to its configured step count and return the final checkpoint.

    Pretraining starts fresh unless ``checkpoint_in`` is a pretrain checkpoint to
    resume. Tuning needs ``checkpoint_in``: a pretrain checkpoint starts tuning,
    a tune checkpoint resumes it. Batch ``i`` of ``source`` feeds step ``i``.
    """
    if phase not in (PRETRAIN, TUNE):
        raise ValueError(f"unknown phase {phase!r}")
    if source is None:
        source = SyntheticSource(cfg.data, cfg.trainer.batch_size)
    if phase == PRETRAIN:
        state = state_from_checkpoint(checkpoint_in, cfg) if checkpoint_in is not None else new_pretrain_state(cfg)
        if state.phase != PRETRAIN:
            raise CheckpointError("cannot resume pretraining from a tune checkpoint")
        step_fn = pretrain_step
    else:
        if checkpoint_in is None:
            raise CheckpointError("tuning needs a pretrain checkpoint")
        if checkpoint_in.phase == PRETRAIN:
            state = new_tune_state(cfg, checkpoint_in)
        else:
            state = state_from_checkpoint(checkpoint_in, cfg)
        step_fn = tune_step

    if state.step >= state.total_steps:
        return to_checkpoint(state)
    first = source(state.step)
    if first is None or len(first) == 0:
        raise ConfigError("data", "data source produced an empty batch")

    out = Path(out_dir) if out_dir is not None else None
    logger = CsvLog(out / "train_log.csv", phase, state.step) if out is not None else None
    every = cfg.trainer.ckpt_every
    try:
        batch = first
        while state.step < state.total_steps:
            t0 = time.perf_counter()
            rec = step_fn(state, batch)
            rec["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            if logger:
                logger.write(rec)
            if on_step:
                on_step(rec)
            if state.step % 500 == 0:
                log.info("%s step %d/%d loss %.4g", phase, state.step, state.total_steps, rec["loss"])
            if out is not None and state.step % every == 0 and state.step < state.total_steps:
                persistence.save(to_checkpoint(state), out / checkpoint_name(phase, state.step))
            if state.step < state.total_steps:
                batch = source(state.step)
    finally:
        if logger:
            logger.close()
    final = to_checkpoint(state)
    if out is not None:
        persistence.save(final, out / f"{phase}_final.ckpt")
    return final
