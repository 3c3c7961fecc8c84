import pytest
import torch

from ectlab.data import DataConfig, gen_batch
from ectlab.denoiser import (
    ArchConfig,
    Denoiser,
    MSGate,
    build_denoiser,
    count_parameters,
    downsample_mask,
    masked_global_mean,
    score_from_denoiser,
)
from ectlab.errors import FieldError
from ectlab.schedule import ScheduleConfig, c_out, c_skip

SCHED = ScheduleConfig()
ARCH = ArchConfig(base_width=4, emb_dim=8)
DATA = DataConfig(mel_bins=12, n_min=9, n_max=21)


def batch(n=3, index=0):
    return gen_batch(DATA, index, n).to(torch.float64)


def model(arch=ARCH, seed=0):
    return build_denoiser(arch, SCHED, seed=seed, dtype=torch.float64)


def test_arch_validation():
    with pytest.raises(FieldError):
        ArchConfig(depth=0)
    with pytest.raises(FieldError):
        ArchConfig(depth=2, width_mults=(1, 2))
    with pytest.raises(FieldError):
        ArchConfig(emb_dim=7)


def test_build_is_seeded():
    a, b, c = model(seed=1), model(seed=1), model(seed=2)
    for (n, p), q, r in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_build_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    model(seed=5)
    assert torch.equal(torch.rand(3), expected)


def test_output_shape_and_padding_zero():
    b = batch()
    m = model()
    out = m(b.x0, torch.full((3,), 0.7, dtype=torch.float64), b.mu, b.mask)
    assert out.shape == b.x0.shape
    for i, L in enumerate(b.lengths):
        assert torch.all(out[i, ..., L:] == 0)


def test_padding_invariance_exact():
    b = batch()
    m = model()
    s = torch.tensor([0.1, 1.0, 5.0], dtype=torch.float64)
    ref = m(b.x0, s, b.mu, b.mask)
    for extra in (1, 7, 32):
        p = b.pad_frames(extra)
        out = m(p.x0, s, p.mu, p.mask)
        assert torch.equal(out[..., : b.x0.shape[-1]], ref)
        assert torch.all(out[..., b.x0.shape[-1]:] == 0)


def test_garbage_in_padding_is_ignored():
    b = batch()
    m = model()
    s = torch.full((3,), 0.4, dtype=torch.float64)
    ref = m(b.x0, s, b.mu, b.mask)
    x = b.x0.clone()
    mu = b.mu.clone()
    for i, L in enumerate(b.lengths):
        x[i, ..., L:] = 9.0
        mu[i, ..., L:] = -4.0
    assert torch.equal(m(x, s, mu, b.mask), ref)


def test_skip_parameterization():
    b = batch()
    m = model()
    s = torch.tensor([0.01, 0.5, 20.0], dtype=torch.float64)
    raw = m.backbone_output(b.x0, s, b.mu, b.mask)
    s4 = s[:, None, None, None]
    expected = (c_skip(s4, SCHED) * b.x0 + c_out(s4, SCHED) * raw) * b.mask[:, None, None, :]
    got = m(b.x0, s, b.mu, b.mask)
    assert torch.allclose(got, expected, rtol=1e-12, atol=1e-14)


def test_near_identity_at_sigma_min():
    b = batch()
    m = model()
    out = m(b.x0, SCHED.sigma_min, b.mu, b.mask)
    assert (out - b.x0).abs().max() < 0.02


def test_scalar_sigma_broadcasts():
    b = batch()
    m = model()
    a = m(b.x0, 0.3, b.mu, b.mask)
    c = m(b.x0, torch.full((3,), 0.3, dtype=torch.float64), b.mu, b.mask)
    assert torch.equal(a, c)


def test_rejects_non_finite_and_bad_shapes():
    b = batch()
    m = model()
    x = b.x0.clone()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        m(x, 0.5, b.mu, b.mask)
    with pytest.raises(ValueError):
        m(b.x0, 0.5, b.mu[:, :, :-1], b.mask)
    with pytest.raises(ValueError):
        m(b.x0, 0.5, b.mu, torch.zeros_like(b.mask))


def test_conditioning_matters():
    b = batch()
    m = model()
    a = m(b.x0, 1.0, b.mu, b.mask)
    c = m(b.x0, 1.0, b.mu * 0.0, b.mask)
    assert not torch.allclose(a, c)


def test_msgate_toggle_changes_parameters():
    with_gate = model(ArchConfig(base_width=4, emb_dim=8, msgate_enabled=True))
    without = model(ArchConfig(base_width=4, emb_dim=8, msgate_enabled=False))
    assert any("gates" in n for n, _ in with_gate.named_parameters())
    assert not any("gates" in n for n, _ in without.named_parameters())
    assert count_parameters(with_gate) > count_parameters(without)


def test_msgate_branches_and_range():
    torch.manual_seed(0)
    gate = MSGate(3).double()
    h = torch.randn(2, 3, 6, 7, dtype=torch.float64)
    mask = torch.ones(2, 7, dtype=torch.float64)
    g = gate.gate(h, mask)
    assert g.shape == h.shape and (g > 0).all() and (g < 1).all()
    assert torch.allclose(gate(h, mask), h * g)
    # fuse bias starts open-ish so gated skips pass most signal at init
    assert torch.all(gate.fuse.bias == 2.0)
    with pytest.raises(ValueError):
        gate.gate(torch.randn(2, 4, 6, 7, dtype=torch.float64), mask)


def test_msgate_global_branch_respects_mask():
    gate = MSGate(2).double()
    h = torch.randn(1, 2, 4, 6, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 1, 0, 0]], dtype=torch.float64)
    h2 = h.clone()
    h2[..., 4:] = 100.0
    assert torch.allclose(masked_global_mean(h, mask), masked_global_mean(h2, mask))
    # frames beyond the 5x5 reach of the padding see identical inputs
    assert torch.allclose(gate.gate(h, mask)[..., :2], gate.gate(h2, mask)[..., :2])


def test_downsample_mask_ceil():
    m = torch.tensor([[1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], dtype=torch.float64)
    assert downsample_mask(m).tolist() == [[1, 1, 0], [1, 0, 0]]


def test_score_from_denoiser():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64)
    d = torch.tensor([0.5, 0.5], dtype=torch.float64)
    assert torch.allclose(score_from_denoiser(x, 0.5, d), (d - x) / 0.25)
    with pytest.raises(ValueError):
        score_from_denoiser(x, 0.0, d)


def test_single_precision_model():
    m = build_denoiser(ARCH, SCHED, seed=0, dtype=torch.float32)
    b = gen_batch(DATA, 0, 2)
    out = m(b.x0, 0.5, b.mu, b.mask)
    assert out.dtype == torch.float32 and torch.isfinite(out).all()


def test_gmm_shaped_input():
    m = model(ArchConfig(base_width=4, emb_dim=8))
    g = gen_batch(DataConfig(mode="gmm"), 0, 5).to(torch.float64)
    out = m(g.x0, 1.0, g.mu, g.mask)
    assert out.shape == (5, 1, 2, 1) and torch.isfinite(out).all()


def test_is_denoiser_module():
    assert isinstance(model(), Denoiser)
