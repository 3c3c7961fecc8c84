"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import persistence
from .config import RunConfig, load_config
from .data import ListSource, export_dataset, held_out_stream, import_dataset
from .errors import CheckpointError, ConfigError
from .metrics import evaluate, run_gradcheck, write_report
from .sampler import dump_sample, sample, write_metadata
from .trainer import PRETRAIN, TUNE, model_from_checkpoint, run_phase

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("ectlab")


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _source(cfg: RunConfig):
    if cfg.trainer.data_dir:
        return ListSource(import_dataset(cfg.trainer.data_dir))
    return None


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = export_dataset(cfg.data, args.out, args.batches, cfg.trainer.batch_size, extra={"fingerprint": cfg.fingerprint()})
    print(f"wrote {args.batches} batches to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    resume = persistence.load(args.resume) if args.resume else None
    out = cfg.resolved_out_dir()
    ckpt = run_phase(cfg, PRETRAIN, _source(cfg), resume, out)
    print(f"pretrain finished at step {ckpt.step}; checkpoint {out / 'pretrain_final.ckpt'}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_config(args.config)
    if not cfg.ablation.tuning_enabled:
        return _fail(EXIT_CONFIG, "ablation.tuning_enabled: consistency tuning is disabled for this config; sample from the pretrained checkpoint instead")
    src = persistence.load(args.resume or args.from_ckpt)
    pre_flag = src.meta.get("masked_norm_enabled")
    if pre_flag is not None and pre_flag != cfg.ablation.masked_norm_enabled and not args.force:
        return _fail(
            EXIT_CONFIG,
            f"ablation.masked_norm_enabled={cfg.ablation.masked_norm_enabled} disagrees with checkpoint ({pre_flag}); pass --force to override",
        )
    out = cfg.resolved_out_dir()
    ckpt = run_phase(cfg, TUNE, _source(cfg), src, out)
    print(f"tune finished at step {ckpt.step}; checkpoint {out / 'tune_final.ckpt'} (EMA included)")
    return EXIT_OK


def _load_model(path: str, use_ema: bool | None):
    ckpt = persistence.load(path)
    cfg = RunConfig.from_dict(ckpt.config)
    if use_ema is None:
        use_ema = ckpt.has_ema
    if use_ema and not ckpt.has_ema:
        raise CheckpointError(f"{path}: --use-ema requested but checkpoint has no EMA weights")
    return ckpt, cfg, model_from_checkpoint(ckpt, cfg, use_ema=use_ema), use_ema


def cmd_sample(args) -> int:
    ckpt, cfg, model, use_ema = _load_model(args.ckpt, args.use_ema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(args.seed)
    batch = next(held_out_stream(cfg.data, args.count, 1))
    mu, mask = batch.mu.to(cfg.dtype), batch.mask.to(cfg.dtype)
    t0 = time.perf_counter()
    x, nfe = sample(model, mu, mask, args.method, args.steps, rng, cfg.schedule)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    files = []
    arr = x.detach().double().numpy()
    for i, n in enumerate(batch.lengths):
        files.append(dump_sample(out, f"sample_{i:04d}", arr[i, 0, :, :n]))
    write_metadata(out, {
        "checkpoint": str(args.ckpt),
        "phase": ckpt.phase,
        "step": ckpt.step,
        "method": args.method,
        "n_steps": args.steps if args.method != "onestep" else 1,
        "nfe": nfe,
        "count": args.count,
        "use_ema": use_ema,
        "seed": args.seed,
        "wall_ms": wall_ms,
        "wall_ms_per_sample": wall_ms / args.count,
        "fingerprint": cfg.fingerprint(),
        "samples": files,
    })
    print(f"wrote {args.count} samples to {out} (NFE={nfe})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, ck_cfg, model, use_ema = _load_model(args.ckpt, args.use_ema)
    cfg = load_config(args.config) if args.config else ck_cfg
    method = args.method or cfg.sampler.method
    steps = args.steps or cfg.sampler.n_steps
    count = args.count or cfg.sampler.eval_count
    report = evaluate(model, cfg, count, method, steps, seed=args.seed, use_ema=use_ema, checkpoint_name=str(args.ckpt))
    out = Path(args.out) if args.out else cfg.resolved_out_dir() / "eval"
    jpath, cpath = write_report(report, out)
    print(report.summary())
    print(f"report: {jpath}\ncsv:    {cpath}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    hook = None
    if args.sabotage:
        def hook(name, g):
            return g * 1.01 if "gates" in name or name.endswith("out.weight") else g
    report = run_gradcheck(cfg, n_coords=args.coords, tolerance=args.tol, epsilon=args.eps, grad_hook=hook)
    print(report.table())
    if not report.passed:
        print(f"gradcheck FAILED: worst {json.dumps(report.worst)}", file=sys.stderr)
        return EXIT_CHECK
    print("gradcheck passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ectlab", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="export a pinned synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--batches", type=int, default=8)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="EDM diffusion pretraining")
    g.add_argument("--config", required=True)
    g.add_argument("--resume")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("tune", help="consistency tuning from a pretrain checkpoint")
    g.add_argument("--config", required=True)
    g.add_argument("--from", dest="from_ckpt", required=True)
    g.add_argument("--resume", help="resume an interrupted tuning run from this tune checkpoint")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_tune)

    g = sub.add_parser("sample", help="generate samples from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--method", choices=["onestep", "euler", "heun"], default="onestep")
    g.add_argument("--steps", type=int, default=1)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--use-ema", dest="use_ema", action="store_true", default=None, help="default: on when the checkpoint carries EMA weights")
    g.add_argument("--no-ema", dest="use_ema", action="store_false")
    g.set_defaults(func=cmd_sample)

    g = sub.add_parser("eval", help="evaluate a checkpoint on held-out conditions")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--config")
    g.add_argument("--method", choices=["onestep", "euler", "heun"])
    g.add_argument("--steps", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--use-ema", dest="use_ema", action="store_true", default=None)
    g.add_argument("--no-ema", dest="use_ema", action="store_false")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of reverse-mode gradients")
    g.add_argument("--config", required=True)
    g.add_argument("--coords", type=int, default=512)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    for name in ("steps",):
        if getattr(args, name, None) is not None and getattr(args, name) < 1:
            return _fail(EXIT_CONFIG, f"--{name} must be >= 1")
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, f"config {e.path}: {e.message}")
    except CheckpointError as e:
        return _fail(EXIT_IO, str(e))
    except OSError as e:
        return _fail(EXIT_IO, str(e))


if __name__ == "__main__":
    sys.exit(main())
