"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict that the terminal summary prints. The
toy-scale experiments (criteria 6 to 9) train through ``toy_runs`` and reuse
cached checkpoints whose fingerprint matches the preset; a cold cache costs
roughly two CPU hours.
"""

import time

import numpy as np
import pytest
import torch

from ectlab import persistence
from ectlab.data import DataConfig, gen_batch, held_out_stream
from ectlab.denoiser import ArchConfig, build_denoiser
from ectlab.losses import edm_loss, ect_loss
from ectlab.metrics import evaluate, mean_consistency_deviation, run_gradcheck, write_report
from ectlab.sampler import GaussianOracle, euler, heun, sample
from ectlab.schedule import ScheduleConfig, c_out, c_skip, karras_step_grid
from ectlab.trainer import PRETRAIN, TUNE, model_from_checkpoint, run_phase
from toy_runs import RESULTS, preset, two_stage

SCHED = ScheduleConfig()


def verdict(n: int, ok: bool, detail: str):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def small_model(seed=0, msgate=True):
    arch = ArchConfig(base_width=4, emb_dim=8, msgate_enabled=msgate)
    return build_denoiser(arch, SCHED, seed=seed, dtype=torch.float64)


def test_c01_degeneracy_identity():
    t0 = time.perf_counter()
    model = small_model()
    data = DataConfig(mel_bins=12, n_min=8, n_max=16)
    worst = 0.0
    for i in range(100):
        g = torch.Generator().manual_seed(i)
        b = gen_batch(data, i, 2).to(torch.float64)
        sigma = torch.exp(torch.randn(2, generator=g, dtype=torch.float64) * 1.2 - 1.2)
        eps = torch.randn(b.x0.shape, generator=g, dtype=torch.float64) * b.mask[:, None, None, :]
        a = ect_loss(model, b.x0, b.mu, b.mask, sigma, torch.zeros(2, dtype=torch.float64), eps).item()
        e = edm_loss(model, b.x0, b.mu, b.mask, sigma, eps).item()
        worst = max(worst, abs(a - e) / abs(e))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and dt < 10, f"max rel diff {worst:.2e} over 100 triples (tol 1e-12), {dt:.1f}s")


def test_c02_boundary_conditions():
    t0 = time.perf_counter()
    cfg = ScheduleConfig()
    cfg64 = torch.tensor(cfg.sigma_min, dtype=torch.float64)
    skip_gap = abs(c_skip(cfg64, cfg).item() - 1.0)
    bound = (cfg.sigma_min / cfg.sigma_data) ** 2
    out_min = c_out(cfg64, cfg).item()
    grid = torch.logspace(np.log10(cfg.sigma_min), np.log10(cfg.sigma_max), 100, dtype=torch.float64)
    lhs = c_out(grid, cfg) ** 2
    rhs = grid**2 * c_skip(grid, cfg)
    rel = ((lhs - rhs).abs() / rhs.abs()).max().item()
    dt = time.perf_counter() - t0
    ok = skip_gap <= bound and out_min <= cfg.sigma_min and rel <= 1e-12 and dt < 1
    verdict(2, ok, f"|c_skip-1|={skip_gap:.2e}<={bound:.2e}, c_out={out_min:.2e}<={cfg.sigma_min}, identity rel {rel:.1e}, {dt:.2f}s")


def test_c03_gradient_correctness():
    t0 = time.perf_counter()
    cfg = preset("gradcheck_tiny")
    rep = run_gradcheck(cfg, n_coords=512, tolerance=1e-4)
    dt = time.perf_counter() - t0
    model = build_denoiser(cfg.arch, cfg.schedule, dtype=torch.float64)
    names = {n for n, _ in model.named_parameters()}
    covered = set(rep.per_tensor) == names
    gates = [n for n in names if "branch" in n]
    ok = rep.passed and rep.coords_checked >= 500 and covered and bool(gates) and rep.stop_grad_max_abs == 0.0 and dt < 300
    verdict(3, ok, f"max rel err {rep.max_rel_err:.2e} (tol 1e-4) over {rep.coords_checked} coords, {len(rep.per_tensor)}/{len(names)} tensors "
                   f"incl. {len(gates)} gate-branch tensors, stop-grad |g|max={rep.stop_grad_max_abs}, {dt:.0f}s")


def test_c04_mask_normalization():
    t0 = time.perf_counter()
    model = small_model(seed=1)
    data = DataConfig(mel_bins=12, n_min=10, n_max=18)
    b = gen_batch(data, 3, 3).to(torch.float64)
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(b.x0.shape, generator=g, dtype=torch.float64) * b.mask[:, None, None, :]
    sigma = torch.tensor([0.2, 1.0, 5.0], dtype=torch.float64)
    t, r = torch.tensor([0.9, 2.0, 10.0], dtype=torch.float64), torch.tensor([0.3, 1.1, 4.0], dtype=torch.float64)

    def losses(x0, mu, mask, e, masked):
        return (edm_loss(model, x0, mu, mask, sigma, e, masked_norm=masked).item(),
                ect_loss(model, x0, mu, mask, t, r, e, masked_norm=masked).item())

    def pad(x, p):
        return torch.nn.functional.pad(x, (0, p))

    base = losses(b.x0, b.mu, b.mask, eps, True)
    base_off = losses(b.x0, b.mu, b.mask, eps, False)
    invariant, defect = True, True
    for p in range(1, 33):
        got = losses(pad(b.x0, p), pad(b.mu, p), pad(b.mask, p), pad(eps, p), True)
        invariant &= got == base
        off = losses(pad(b.x0, p), pad(b.mu, p), pad(b.mask, p), pad(eps, p), False)
        defect &= off[0] != base_off[0] and off[1] != base_off[1]
    dt = time.perf_counter() - t0
    verdict(4, invariant and defect and dt < 10,
            f"masked losses unchanged for 1..32 padded frames: {invariant}; unmasked losses change: {defect}; {dt:.1f}s")


def test_c05_sampler_order():
    t0 = time.perf_counter()
    ns = (4, 8, 16, 32)
    lines, ok = [], True
    for s in (0.5, 1.0, 2.0, 5.0):
        o = GaussianOracle(s)
        x = (torch.linspace(-3, 3, 11, dtype=torch.float64) * SCHED.sigma_max).reshape(-1, 1, 1, 1)
        mu, mask = torch.zeros_like(x), torch.ones(11, 1, dtype=torch.float64)
        ref = o.ode_solution(x, SCHED.sigma_max, 0.0)
        for fn, need in ((euler, 0.9), (heun, 1.8)):
            errs = [(fn(o, x, karras_step_grid(n, SCHED), mu, mask) - ref).abs().max().item() for n in ns]
            order = float(np.log2(errs[-2] / errs[-1]))
            ok &= all(b < a for a, b in zip(errs, errs[1:])) and order >= need
            lines.append(f"{fn.__name__}@s={s:g}:{order:.2f}")
    model = small_model()
    b = gen_batch(DataConfig(mel_bins=12, n_min=9, n_max=15), 0, 2).to(torch.float64)
    a1, _ = sample(model, b.mu, b.mask, "onestep", 1, torch.Generator().manual_seed(2), SCHED)
    e1, _ = sample(model, b.mu, b.mask, "euler", 1, torch.Generator().manual_seed(2), SCHED)
    same = torch.equal(a1, e1)
    dt = time.perf_counter() - t0
    verdict(5, ok and same and dt < 30, f"orders (need euler>=0.9, heun>=1.8) {' '.join(lines)}; one-step == euler-1 bitwise: {same}; {dt:.1f}s")


@pytest.fixture(scope="module")
def gmm_runs():
    cfg, pre, tuned = two_stage("toy_gmm")
    return cfg, persistence.load(pre), persistence.load(tuned)


@pytest.fixture(scope="module")
def gmm_w2(gmm_runs):
    cfg, pre, tuned = gmm_runs
    n = cfg.sampler.eval_count
    pm = model_from_checkpoint(pre, cfg)
    tm = model_from_checkpoint(tuned, cfg, use_ema=True)
    kw = dict(batch_size=512, with_consistency=False)
    a = evaluate(pm, cfg, n, "euler", 50, **kw).w2
    b = evaluate(pm, cfg, n, "onestep", 1, **kw).w2
    c = evaluate(tm, cfg, n, "onestep", 1, use_ema=True, **kw).w2
    return a, b, c


@pytest.mark.slow
def test_c06_toy_gmm_trend(gmm_runs, gmm_w2):
    cfg = gmm_runs[0]
    a, b, c = gmm_w2
    ok = c <= 0.5 * b and c <= 2.0 * a
    verdict(6, ok, f"w2 pre+euler50={a:.4f} pre+onestep={b:.4f} tuned+onestep(EMA)={c:.4f}; need c<={0.5 * b:.4f} and c<={2 * a:.4f} "
                   f"({cfg.trainer.pretrain_steps}+{cfg.trainer.tune_steps} steps, {cfg.sampler.eval_count} samples)")


@pytest.fixture(scope="module")
def mel_runs():
    cfg, pre, tuned = two_stage("toy_mel")
    return cfg, persistence.load(pre), persistence.load(tuned)


@pytest.mark.slow
def test_c07_blur_proxy(mel_runs):
    cfg, pre, tuned = mel_runs
    n = 256
    pm = model_from_checkpoint(pre, cfg)
    tm = model_from_checkpoint(tuned, cfg, use_ema=True)
    kw = dict(batch_size=64, with_consistency=False)
    s50 = evaluate(pm, cfg, n, "euler", 50, **kw).sharpness
    s1 = evaluate(pm, cfg, n, "onestep", 1, **kw).sharpness
    st = evaluate(tm, cfg, n, "onestep", 1, use_ema=True, **kw)
    ok = st.sharpness >= 0.8 * s50 and st.sharpness > s1
    verdict(7, ok, f"median sharpness tuned+onestep={st.sharpness:.4f} pre+euler50={s50:.4f} pre+onestep={s1:.4f} "
                   f"(ground truth {st.sharpness_gt:.4f}); need >= {0.8 * s50:.4f} and > {s1:.4f}")


def _deviations(cfg, pre, tuned):
    batches = [(b.mu.to(cfg.dtype), b.mask.to(cfg.dtype)) for b in held_out_stream(cfg.data, 64, 1)]
    dp = mean_consistency_deviation(model_from_checkpoint(pre, cfg), batches, cfg, 7, 64)
    dtn = mean_consistency_deviation(model_from_checkpoint(tuned, cfg, use_ema=True), batches, cfg, 7, 64)
    return dp, dtn


@pytest.mark.slow
def test_c08_consistency_deviation(mel_runs, gmm_runs):
    t0 = time.perf_counter()
    dp, dtn = _deviations(*mel_runs)
    dt = time.perf_counter() - t0
    gp, gt = _deviations(*gmm_runs)
    verdict(8, dtn < dp and dt < 120, f"MelLike mean deviation over 64 trajectories tuned={dtn:.5f} pretrained={dp:.5f}, {dt:.1f}s "
                                      f"(for reference, Gmm2D: tuned={gt:.5f} pretrained={gp:.5f})")


@pytest.mark.slow
def test_c09_ablation_harness(gmm_w2, tmp_path):
    produced = []
    for name in ("ablation_full", "ablation_wo_msgate", "ablation_wo_masked_norm", "ablation_wo_tuning"):
        cfg, pre, tuned = two_stage(name)
        ck = persistence.load(tuned or pre)
        model = model_from_checkpoint(ck, cfg, use_ema=ck.has_ema)
        rep = evaluate(model, cfg, cfg.sampler.eval_count, "onestep", 1, use_ema=ck.has_ema, batch_size=64)
        jpath, _ = write_report(rep, tmp_path / name)
        produced.append(f"{name}:sharp={rep.sharpness:.3f}")
        assert jpath.exists()
    _, b, c = gmm_w2
    verdict(9, b > c, f"smoke runs produced reports [{' '.join(produced)}]; toy GMM one-step w2 w/o tuning={b:.4f} > tuned={c:.4f}")


def test_c10_engineering_invariants(tmp_path):
    import test_formats
    from ectlab.config import RunConfig

    t0 = time.perf_counter()
    cfg = RunConfig.from_dict({
        "data": {"mel_bins": 12, "n_min": 10, "n_max": 20},
        "arch": {"base_width": 4, "emb_dim": 8},
        "schedule": {"total_tune_steps": 6},
        "trainer": {"pretrain_steps": 6, "tune_steps": 6, "batch_size": 3, "ckpt_every": 3},
    })
    checks = {}
    full = run_phase(cfg, PRETRAIN, out_dir=tmp_path / "a")
    half = persistence.load(tmp_path / "a" / "pretrain_step0000003.ckpt")
    again = run_phase(cfg, PRETRAIN, checkpoint_in=half, out_dir=tmp_path / "b")
    checks["pretrain resume"] = all(torch.equal(v, again.params[k]) for k, v in full.params.items())
    tuned = run_phase(cfg, TUNE, checkpoint_in=full, out_dir=tmp_path / "a")
    thalf = persistence.load(tmp_path / "a" / "tune_step0000003.ckpt")
    tagain = run_phase(cfg, TUNE, checkpoint_in=thalf, out_dir=tmp_path / "b")
    checks["tune resume"] = all(torch.equal(v, tagain.params[k]) for k, v in tuned.params.items()) and all(
        torch.equal(v, tagain.ema[k]) for k, v in tuned.ema.items())
    checks["save/load"] = persistence.encode(persistence.decode(persistence.encode(tuned))) == persistence.encode(tuned)

    model = model_from_checkpoint(tuned, cfg, use_ema=True)
    b = gen_batch(cfg.data, 0, 2)
    x1, _ = sample(model, b.mu, b.mask, "heun", 4, torch.Generator().manual_seed(9), cfg.schedule)
    x2, _ = sample(model, b.mu, b.mask, "heun", 4, torch.Generator().manual_seed(9), cfg.schedule)
    checks["deterministic"] = torch.equal(x1, x2) and torch.equal(gen_batch(cfg.data, 5, 3).x0, gen_batch(cfg.data, 5, 3).x0)
    nfe = [sample(model, b.mu, b.mask, m, n, torch.Generator(), cfg.schedule)[1] for m, n in (("onestep", 1), ("euler", 7), ("heun", 7))]
    checks["nfe 1/n/2n-1"] = nfe == [1, 7, 13]

    test_formats.build(tmp_path / "golden")
    try:
        test_formats._same_tree(test_formats.GOLDEN, tmp_path / "golden")
        checks["golden files"] = True
    except AssertionError:
        checks["golden files"] = False
    dt = time.perf_counter() - t0
    ok = all(checks.values()) and dt < 120
    verdict(10, ok, " ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()) + f"; {dt:.1f}s")
