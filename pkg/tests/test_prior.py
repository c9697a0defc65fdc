import hashlib

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck import fd_max_rel_error, module_fd_error
from radct.projector import drr
from radct.prior import (PriorConfig, PriorEncoder, PriorTokens, encode_prior, flatten_tokens, prior_targets,
                         radiograph_tensor, tokens_from_latent, train_prior_encoder)
from radct.volume import PhantomParams, generate_phantom, normalize_hu
from radct.vq.model import Compressor, CompressorConfig
from radct.vq.quantizer import zscore


def g(seed):
    return torch.Generator().manual_seed(seed)


def pairs(n, dims=(32, 32, 32), spacing=(10.0, 10.0, 10.0)):
    extent = tuple(d * s for d, s in zip(dims, spacing))
    rads, vols = [], []
    for i in range(n):
        hu, _ = generate_phantom(PhantomParams.from_seed(200 + i, extent), dims, spacing)
        rads.append(drr(hu))
        vols.append(normalize_hu(hu).values)
    return rads, vols


def compressor(**kw):
    return Compressor(CompressorConfig(codebook_size=64, codebook_init=1.0, **kw), generator=g(0))


def test_shape_chain():
    model = PriorEncoder(PriorConfig(), g(0))
    r = torch.rand(2, 1, 32, 32)
    assert model.lift_columns(r).shape == (2, 16, 8, 8, 8)
    assert model(r).shape == (2, 8, 8, 8, 8)
    cfg = PriorConfig(image_dims=(16, 16), latent_dims=(4, 4, 6), channels=4, features=8, mlp_hidden=8)
    assert PriorEncoder(cfg)(torch.rand(1, 1, 16, 16)).shape == (1, 8, 4, 4, 6)
    with pytest.raises(ValueError):
        model(torch.rand(1, 1, 16, 16))
    with pytest.raises(ValueError):
        PriorConfig(image_dims=(32, 24))


@pytest.mark.parametrize("pixel", [(0, 0), (13, 22), (31, 7)])
def test_column_locality(pixel):
    cfg = PriorConfig(feature_depth=0)
    model = PriorEncoder(cfg, g(1))
    r = torch.rand(1, 1, 32, 32, generator=g(2))
    r2 = r.clone()
    r2[0, 0, pixel[0], pixel[1]] += 1.0
    with torch.no_grad():
        diff = (model.lift_columns(r2) - model.lift_columns(r)).abs().amax(dim=(0, 1, 4))
    changed = torch.nonzero(diff).tolist()
    assert changed == [[pixel[0] // 4, pixel[1] // 4]]


def test_pinned_hash():
    model = PriorEncoder(PriorConfig(), g(0))
    r = torch.rand(1, 1, 32, 32, generator=g(1))
    out = np.round(model(r).detach().numpy().astype(np.float64), 5)
    assert hashlib.sha256(out.tobytes()).hexdigest()[:16] == PINNED


PINNED = "2d825bd9dd649b9a"


def test_token_flattening_i_fastest():
    z = torch.arange(3 * 4 * 5, dtype=torch.float32).reshape(1, 1, 3, 4, 5).repeat(1, 2, 1, 1, 1)
    flat = flatten_tokens(z)
    assert flat.shape == (1, 60, 2)
    h, w = 3, 4
    for (i, j, k) in [(0, 0, 0), (1, 0, 0), (0, 1, 0), (2, 3, 4)]:
        assert flat[0, i + h * (j + w * k), 0] == z[0, 0, i, j, k]
    tokens = PriorTokens(flat[0].numpy(), (3, 4, 5))
    assert np.array_equal(tokens.grid()[..., 0], z[0, 0].numpy())
    with pytest.raises(ValueError):
        PriorTokens(np.zeros((10, 2)), (3, 4, 5))


@pytest.mark.parametrize("mode", ["raw", "normalized"])
def test_tokens_are_normalized_codebook_entries(mode):
    comp = compressor()
    model = PriorEncoder(PriorConfig(), g(0))
    rads, _ = pairs(1)
    a = encode_prior(rads[0], model, comp.codebook, mode)
    b = encode_prior(rads[0], model, comp.codebook, mode)
    assert a.tokens.shape == (512, 8) and np.array_equal(a.tokens, b.tokens)
    allowed = np.concatenate([zscore(comp.codebook.entries.detach()).numpy(), np.zeros((1, 8), np.float32)])
    for t in a.tokens:
        assert np.min(np.abs(allowed - t).max(axis=1)) == 0.0
    with pytest.raises(ValueError):
        tokens_from_latent(torch.zeros(1, 4, 2, 2, 2), comp.codebook)


def test_prior_fd():
    cfg = PriorConfig(image_dims=(4, 4), latent_dims=(2, 2, 2), n_z=3, features=3, mlp_hidden=4, channels=2,
                      refine_layers=1)
    torch.manual_seed(0)
    model = PriorEncoder(cfg)
    r = torch.rand(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64, generator=g(3))
    assert module_fd_error(model, lambda: (model(r) * w).sum(), [r]) <= 1e-4
    col = PriorEncoder(PriorConfig(image_dims=(4, 4), latent_dims=(2, 2, 2), n_z=3, features=3, mlp_hidden=4,
                                   channels=2, feature_depth=0))
    col.double()
    params = [*col.features.parameters(), *col.column_mlp.parameters()]
    assert fd_max_rel_error(lambda: (col.lift_columns(r) ** 2).sum(), [*params, r]) <= 1e-4


def test_step0_loss_matches_independent_oracle():
    comp = compressor(lookup_mode="raw")
    rads, vols = pairs(3)
    cfg = PriorConfig(steps=1, batch_size=2, lr=0.0, log_every=1)
    _, _, history = train_prior_encoder(rads, vols, comp, cfg)
    # rebuild the initial net and first batch from the same seed
    gen = g(cfg.seed)
    model = PriorEncoder(cfg, gen)
    idx = torch.randint(3, (2,), generator=gen)
    r = torch.cat([radiograph_tensor(x) for x in rads])[idx]
    target, target_idx = prior_targets(comp, vols)
    with torch.no_grad():
        pred = model(r).double().numpy()
    tgt = target[idx].double().numpy()
    mse = np.mean((pred - tgt) ** 2)
    sites = pred.transpose(0, 2, 3, 4, 1).reshape(-1, 8)
    entries = comp.codebook.entries.detach().double().numpy()
    logits = -((sites[:, None, :] - entries[None]) ** 2).sum(-1)
    logp = logits - logits.max(1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(1, keepdims=True))
    ce = -np.mean(logp[np.arange(len(sites)), target_idx[idx].reshape(-1).numpy()])
    assert history[0]["loss"] == pytest.approx(mse + cfg.ce_weight * ce, rel=1e-4)


def test_zero_lr_is_noop():
    comp = compressor()
    rads, vols = pairs(2)
    cfg = PriorConfig(steps=3, batch_size=2, lr=0.0)
    model, _, _ = train_prior_encoder(rads, vols, comp, cfg)
    fresh = PriorEncoder(cfg, g(cfg.seed))
    for (name, a), (_, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), name


def test_training_beats_majority(tmp_path):
    comp = compressor()
    rads, vols = pairs(8)
    cfg = PriorConfig(steps=200, batch_size=8, lr=1e-3)
    _, ckpt, history = train_prior_encoder(rads, vols, comp, cfg, log_path=tmp_path / "prior.csv")
    final = history[-1]
    assert final["index_accuracy"] > final["majority_baseline"]
    assert ckpt.meta["stage"] == "prior" and ckpt.iteration == 200


def test_rejects_bad_inputs():
    comp = compressor()
    rads, vols = pairs(2)
    with pytest.raises(ValueError):
        train_prior_encoder(rads, vols[:1], comp, PriorConfig(steps=1))
    with pytest.raises(ValueError):
        train_prior_encoder(rads, vols, None, PriorConfig(steps=1))
