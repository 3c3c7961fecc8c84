"""Run configuration: JSON file <-> validated dataclasses, plus canonical fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import DataConfig
from .denoiser import ArchConfig
from .errors import ConfigError, FieldError
from .schedule import ScheduleConfig

OUT_ROOT_ENV = "ECTLAB_OUT_ROOT"


@dataclass(frozen=True)
class TrainerConfig:
    pretrain_steps: int = 1000
    tune_steps: int = 1000
    batch_size: int = 16
    lr_pretrain: float = 1e-4
    lr_tune: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    clip_grad: float | None = 1.0
    edm_weighting: bool = False
    precision: str = "single"
    ckpt_every: int = 1000
    data_dir: str | None = None

    def __post_init__(self):
        for name in ("pretrain_steps", "tune_steps"):
            if getattr(self, name) < 0:
                raise FieldError(name, "must be >= 0")
        if self.batch_size < 1:
            raise FieldError("batch_size", "must be >= 1")
        for name in ("lr_pretrain", "lr_tune", "adam_eps"):
            if getattr(self, name) <= 0:
                raise FieldError(name, "must be positive")
        for name in ("adam_beta1", "adam_beta2", "ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise FieldError(name, "must lie in [0, 1]")
        if self.clip_grad is not None and self.clip_grad <= 0:
            raise FieldError("clip_grad", "must be positive or null")
        if self.precision not in ("single", "double"):
            raise FieldError("precision", "must be 'single' or 'double'")
        if self.ckpt_every < 1:
            raise FieldError("ckpt_every", "must be >= 1")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "onestep"
    n_steps: int = 1
    eval_count: int = 256
    consistency_steps: int = 8

    def __post_init__(self):
        if self.method not in ("onestep", "euler", "heun"):
            raise FieldError("method", "must be one of onestep, euler, heun")
        if self.n_steps < 1:
            raise FieldError("n_steps", "must be >= 1")
        if self.eval_count < 1:
            raise FieldError("eval_count", "must be >= 1")
        if self.consistency_steps < 2:
            raise FieldError("consistency_steps", "must be >= 2")


@dataclass(frozen=True)
class AblationConfig:
    msgate_enabled: bool = True
    masked_norm_enabled: bool = True
    tuning_enabled: bool = True


# arch in the file omits msgate_enabled; that flag lives under "ablation"
_ARCH_FILE_FIELDS = ("depth", "base_width", "width_mults", "emb_dim")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch_spec: dict = field(default_factory=dict)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(**self.arch_spec, msgate_enabled=self.ablation.msgate_enabled)

    @property
    def dtype(self) -> torch.dtype:
        return self.trainer.dtype

    def to_dict(self) -> dict:
        arch = self.arch
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data": dataclasses.asdict(self.data),
            "schedule": dataclasses.asdict(self.schedule),
            "arch": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(arch).items() if k in _ARCH_FILE_FIELDS},
            "trainer": dataclasses.asdict(self.trainer),
            "sampler": dataclasses.asdict(self.sampler),
            "ablation": dataclasses.asdict(self.ablation),
        }

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def resolved_out_dir(self) -> Path:
        out = Path(self.out_dir)
        root = os.environ.get(OUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def replace(self, **sections) -> "RunConfig":
        """Copy with individual fields overridden per section, e.g. ``replace(trainer={"tune_steps": 5})``."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                d[key] = {**d[key], **val}
            else:
                d[key] = val
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {"seed", "out_dir", "data", "schedule", "arch", "trainer", "sampler", "ablation"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        data = _section(DataConfig, d.get("data", {}), "data")
        schedule = _section(ScheduleConfig, d.get("schedule", {}), "schedule")
        trainer = _section(TrainerConfig, d.get("trainer", {}), "trainer")
        sampler = _section(SamplerConfig, d.get("sampler", {}), "sampler")
        ablation = _section(AblationConfig, d.get("ablation", {}), "ablation")
        arch_spec = d.get("arch", {})
        if not isinstance(arch_spec, dict):
            raise ConfigError("arch", "must be an object")
        for key in arch_spec:
            if key not in _ARCH_FILE_FIELDS:
                raise ConfigError(f"arch.{key}", "unknown field")
        arch_spec = dict(arch_spec)
        if "width_mults" in arch_spec:
            arch_spec["width_mults"] = tuple(arch_spec["width_mults"])
        try:
            ArchConfig(**arch_spec)
        except FieldError as e:
            raise ConfigError(f"arch.{e.field}", e.message) from None
        except TypeError as e:
            raise ConfigError("arch", str(e)) from None
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        out_dir = d.get("out_dir", "runs/default")
        if not isinstance(out_dir, str):
            raise ConfigError("out_dir", "must be a string")
        return cls(data, schedule, arch_spec, trainer, sampler, ablation, seed, out_dir)


def _section(klass, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be an object")
    fields = {f.name: f for f in dataclasses.fields(klass)}
    kwargs = {}
    for key, val in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown field")
        kwargs[key] = _coerce(val, fields[key], f"{name}.{key}")
    try:
        return klass(**kwargs)
    except FieldError as e:
        raise ConfigError(f"{name}.{e.field}", e.message) from None


def _coerce(val, f: dataclasses.Field, path: str):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if t == "bool":
        if not isinstance(val, bool):
            raise ConfigError(path, "must be true or false")
        return val
    if t == "int":
        if not isinstance(val, int) or isinstance(val, bool):
            raise ConfigError(path, "must be an integer")
        return val
    if t.startswith("float"):
        if val is None and "None" in t:
            return None
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(path, "must be a number")
        return float(val)
    if t.startswith("str"):
        if val is None and "None" in t:
            return None
        if not isinstance(val, str):
            raise ConfigError(path, "must be a string")
        return val
    return val


def canonical_json(obj) -> str:
    """Canonical text used for fingerprints: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
