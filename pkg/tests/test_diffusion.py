import math

import numpy as np
import pytest
import torch

from gradcheck import fd_max_rel_error, module_fd_error
from radct.checkpoint import load_checkpoint, save_checkpoint
from radct.diffusion.unet import grid_coords, locality_embedding
from radct.diffusion import (CrossAttention, DiffusionConfig, InPlaneUNet, NoiseSchedule, UNetConfig, dm_loss,
                             load_denoiser, make_schedule, q_sample, sample, timesteps, train_diffusion)


def g(seed):
    return torch.Generator().manual_seed(seed)


def zero_model(x, t, tokens):
    return torch.zeros_like(x)


TINY = UNetConfig(latent_dims=(4, 4, 2), n_z=3, base=4, mults=(1, 2), attn_levels=1, heads=2, head_dim=3,
                  time_dim=8, groups=2)


def test_schedule_examples():
    assert NoiseSchedule(np.array([0.5])).alpha_bar(1) == 0.5
    s = make_schedule(1000, 1e-4, 0.02)
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and ab[-1] < 5e-5 and np.all((ab > 0) & (ab < 1))
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(3) == pytest.approx(np.prod(1 - np.linspace(1e-4, 0.02, 1000)[:3]), rel=1e-15)
    with pytest.raises(ValueError):
        make_schedule(10, 0.02, 1e-4)
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0]))


def test_q_sample_deterministic_branches():
    s = make_schedule(200)
    x0 = torch.randn(3, 4, dtype=torch.float64, generator=g(0))
    assert torch.equal(q_sample(x0, 5, torch.zeros_like(x0), s), math.sqrt(s.alpha_bar(5)) * x0)
    unit = NoiseSchedule(np.zeros(4))
    assert torch.equal(q_sample(x0, 2, torch.randn(3, 4, dtype=torch.float64), unit), x0)
    with pytest.raises(ValueError):
        q_sample(x0, 0, torch.zeros_like(x0), s)
    with pytest.raises(ValueError):
        q_sample(x0, 201, torch.zeros_like(x0), s)


@pytest.mark.parametrize("t", [1, 100, 200])
def test_q_sample_moments(t):
    s = make_schedule(200)
    n = 10_000
    x0 = torch.full((n, 1), 0.7, dtype=torch.float64)
    eps = torch.randn(n, 1, dtype=torch.float64, generator=g(t))
    xt = q_sample(x0, torch.full((n,), t), eps, s).numpy().ravel()
    ab = s.alpha_bar(t)
    var = 1 - ab
    assert abs(xt.mean() - math.sqrt(ab) * 0.7) <= 3 * math.sqrt(var / n)
    assert abs(xt.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


def test_dm_loss_zero_model_and_oracle():
    s = make_schedule(200)
    n = 10_000
    x0 = torch.randn(n, 1, dtype=torch.float64, generator=g(1))
    loss = dm_loss(x0, None, s, zero_model, g(2)).item()
    assert abs(loss - 1.0) <= 3 * math.sqrt(2 / n)

    def oracle(x_t, t, tokens):
        ab = torch.as_tensor(s.alpha_bar(t.numpy()), dtype=torch.float64)[:, None]
        return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

    assert dm_loss(x0, None, s, oracle, g(2)).item() < 1e-20
    assert dm_loss(x0, None, s, zero_model, g(2)).item() == loss


def test_timesteps():
    assert timesteps(200, 200) == list(range(200, 0, -1))
    ts = timesteps(200, 50)
    assert ts[0] == 200 and ts[-1] == 1 and len(ts) == 50 and all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ValueError):
        timesteps(10, 11)


@pytest.mark.parametrize("steps", [200, 50])
def test_ddim_zero_denoiser_closed_form(steps):
    s = make_schedule(200)
    x_T = torch.randn(2, 3, 4, 4, 2, dtype=torch.float64, generator=g(3))
    traj = []
    out = sample(None, s, zero_model, x_T.shape, "ddim", steps, x_T=x_T, trajectory=traj)
    ts = timesteps(200, steps) + [0]
    for i in range(len(ts) - 1):
        expected = traj[i] * math.sqrt(s.alpha_bar(ts[i + 1]) / s.alpha_bar(ts[i]))
        assert torch.max(torch.abs(traj[i + 1] - expected)) <= 1e-6
    assert torch.max(torch.abs(out - x_T / math.sqrt(s.alpha_bar(200)))) <= 1e-6


def test_ddpm_zero_beta_is_identity_and_samplers_deterministic():
    x_T = torch.randn(1, 3, 4, 4, 2, dtype=torch.float64, generator=g(4))
    out = sample(None, NoiseSchedule(np.zeros(10)), zero_model, x_T.shape, "ddpm", x_T=x_T, generator=g(5))
    assert torch.equal(out, x_T)
    s = make_schedule(50)
    for mode in ("ddim", "ddpm"):
        a = sample(None, s, zero_model, (1, 3, 4, 4, 2), mode, 10, generator=g(6))
        b = sample(None, s, zero_model, (1, 3, 4, 4, 2), mode, 10, generator=g(6))
        assert torch.equal(a, b)
    with pytest.raises(ValueError):
        sample(None, s, zero_model, (1, 3), "euler")


def test_conditioning_with_oracle_denoiser():
    """A token-aware oracle denoiser reconstructs its own example better than a mismatched prior."""
    s = make_schedule(200)
    x_a = torch.randn(1, 3, 4, 4, 2, dtype=torch.float64, generator=g(7))
    x_b = torch.randn(1, 3, 4, 4, 2, dtype=torch.float64, generator=g(8))
    table = {0: x_a, 1: x_b}

    def oracle(x_t, t, tokens):
        x0 = table[int(tokens)]
        ab = torch.as_tensor(s.alpha_bar(t.numpy()), dtype=torch.float64).reshape(-1, 1, 1, 1, 1)
        return (x_t.double() - ab.sqrt() * x0) / (1 - ab).sqrt()

    own = sample(torch.tensor(0), s, oracle, x_a.shape, "ddim", 50, generator=g(9), model_dtype=torch.float64)
    other = sample(torch.tensor(1), s, oracle, x_a.shape, "ddim", 50, generator=g(9), model_dtype=torch.float64)
    assert torch.norm(own - x_a) < 1e-8 < torch.norm(other - x_a)


def test_unet_shapes_and_errors():
    cfg = UNetConfig()
    net = InPlaneUNet(cfg, g(0))
    x = torch.randn(2, 8, 8, 8, 8)
    tokens = torch.randn(2, 512, 8)
    assert net(x, torch.tensor([1, 200]), tokens).shape == x.shape
    assert len(net.attention_blocks()) == 5  # two lowest levels down and up, plus the middle
    with pytest.raises(ValueError):
        net(x, 1, torch.randn(2, 512, 4))
    with pytest.raises(ValueError):
        net(torch.randn(2, 8, 8, 8, 4), 1, tokens)
    with pytest.raises(ValueError):
        UNetConfig(latent_dims=(7, 7, 8))


def test_unet_zero_weights():
    net = InPlaneUNet(TINY, g(0))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = net(torch.randn(1, 3, 4, 4, 2), 5, torch.randn(1, 32, 3))
    assert torch.count_nonzero(out) == 0


def test_unet_token_permutation_equivariance():
    net = InPlaneUNet(TINY, g(1)).double()
    x = torch.randn(1, 3, 4, 4, 2, dtype=torch.float64, generator=g(2))
    tokens = torch.randn(1, 32, 3, dtype=torch.float64, generator=g(3))
    perm = torch.randperm(32, generator=g(4))
    pos = net.token_pos.detach()
    a = net(x, 7, tokens)
    b = net(x, 7, tokens[:, perm], token_pos=pos[perm])
    assert torch.allclose(a, b, atol=1e-12, rtol=0)
    c = net(x, 7, tokens[:, perm])  # permuting tokens alone does change the output
    assert not torch.allclose(a, c, atol=1e-6)


def test_attention_rows_sum_to_one():
    net = InPlaneUNet(UNetConfig(), g(0))
    net(torch.randn(1, 8, 8, 8, 8), 50, torch.randn(1, 512, 8))
    for block in net.attention_blocks():
        rows = block.last_attn.sum(-1)
        assert torch.max(torch.abs(rows - 1)) <= 1e-6


def test_unet_fd():
    torch.manual_seed(0)
    net = InPlaneUNet(TINY, g(5))
    x = torch.randn(1, 3, 4, 4, 2, dtype=torch.float64, requires_grad=True)
    tokens = torch.randn(1, 32, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 4, 4, 2, dtype=torch.float64, generator=g(6))
    assert module_fd_error(net, lambda: (net(x, 17, tokens) * w).sum(), [x, tokens]) <= 1e-4


def test_cross_attention_fd():
    torch.manual_seed(1)
    attn = CrossAttention(4, 8, 3, 2, 3, 2).double()
    with torch.no_grad():
        attn.query_pos.normal_()
    x = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    ctx = torch.randn(1, 5, 3, dtype=torch.float64, requires_grad=True)
    ctx_pos = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64, generator=g(7))
    params = list(attn.parameters())
    assert fd_max_rel_error(lambda: (attn(x, ctx, ctx_pos) * w).sum(), [*params, x, ctx, ctx_pos]) <= 1e-4


def test_locality_embedding_products():
    coords = grid_coords((4, 4, 2))
    assert coords.shape == (32, 3) and torch.equal(coords[1] - coords[0], torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    q = locality_embedding(coords, 8, 2.0, "query").double()
    k = locality_embedding(coords, 8, 2.0, "key").double()
    d2 = ((coords[:, None] - coords[None]) ** 2).sum(-1)
    assert torch.allclose(q @ k.T, -d2, atol=1e-5)
    coarse = grid_coords((4, 4, 2), level=1)
    assert coarse.shape == (8, 3) and torch.allclose(coarse[0], torch.tensor([-1.0, -1.0, -0.5], dtype=torch.float64))


def test_initial_attention_is_local():
    net = InPlaneUNet(UNetConfig(mults=(1, 2)), g(0))
    net(torch.randn(1, 8, 8, 8, 8), 50, torch.randn(1, 512, 8))
    full_res = [b for b in net.attention_blocks() if b.last_attn.shape[-2] == 512]
    assert full_res
    for block in full_res:
        assert torch.equal(block.last_attn[0, 0].argmax(-1), torch.arange(512))


def toy_data(n=6, seed=0):
    gen = g(seed)
    entries = torch.randn(16, 8, generator=gen)
    entries = (entries - entries.mean(1, keepdim=True)) / entries.std(1, unbiased=False, keepdim=True)
    idx = torch.randint(16, (n, 8, 8, 8), generator=gen)
    latents = entries[idx].permute(0, 4, 1, 2, 3).contiguous()
    tokens = latents.permute(0, 4, 3, 2, 1).reshape(n, 512, 8)
    return latents, tokens


@pytest.mark.slow
def test_training_beats_zero_denoiser(tmp_path):
    latents, tokens = toy_data()
    cfg = DiffusionConfig(unet=UNetConfig(base=16, mults=(1, 2, 2)), steps=500, batch_size=4, lr=1e-3, log_every=10)
    _, ckpt, history = train_diffusion(latents, tokens, cfg, log_path=tmp_path / "dm.csv")
    late = np.mean([row["loss"] for row in history[-10:]])
    assert late < 1.0
    assert (tmp_path / "dm.csv").read_text().startswith("step,loss\n")


def test_resume_continues_identically(tmp_path):
    latents, tokens = toy_data(3)
    unet = UNetConfig(base=8, groups=4, heads=1, head_dim=8, time_dim=16)
    full_cfg = DiffusionConfig(unet=unet, steps=6, batch_size=2, log_every=1)
    full_model, _, full_hist = train_diffusion(latents, tokens, full_cfg)
    half_cfg = DiffusionConfig(unet=unet, steps=3, batch_size=2, log_every=1)
    _, half, _ = train_diffusion(latents, tokens, half_cfg)
    save_checkpoint(tmp_path / "half.xckp", half)
    model, ckpt, hist = train_diffusion(latents, tokens, full_cfg, resume=load_checkpoint(tmp_path / "half.xckp"))
    assert hist == full_hist[3:]
    for (name, a), (_, b) in zip(model.state_dict().items(), full_model.state_dict().items()):
        assert torch.equal(a, b), name
    save_checkpoint(tmp_path / "full.xckp", ckpt)
    loaded, config, scale = load_denoiser(load_checkpoint(tmp_path / "full.xckp"))
    assert config.steps == 6 and scale == 1.0
    x = torch.randn(1, 8, 8, 8, 8)
    assert torch.equal(loaded(x, 3, tokens[:1]), model(x, 3, tokens[:1]))
