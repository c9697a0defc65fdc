import numpy as np
import pytest

from radct.checkpoint import load_checkpoint, save_checkpoint
from radct.volume import PhantomParams, generate_phantom, normalize_hu
from radct.vq.model import CompressorConfig
from radct.vq.train import NumericalAbort, evaluate_usage, load_compressor, reconstruct, train_compressor


def phantoms(n, dims=(32, 32, 32), spacing=(10.0, 10.0, 10.0)):
    extent = tuple(d * s for d, s in zip(dims, spacing))
    return [normalize_hu(generate_phantom(PhantomParams.from_seed(100 + i, extent), dims, spacing)[0]).values
            for i in range(n)]


def small_config(**kw):
    base = dict(dims=(16, 16, 16), base_channels=4, codebook_size=32, sr_channels=4, disc_channels=4,
                steps=12, log_every=2, gan_warmup=0.25)
    base.update(kw)
    return CompressorConfig(**base)


@pytest.mark.slow
def test_200_steps_reduce_reconstruction_loss(tmp_path):
    config = CompressorConfig(steps=200, log_every=10)
    model, ckpt, history = train_compressor(phantoms(4), config, log_path=tmp_path / "log.csv")
    assert history[-1]["rec"] < history[0]["rec"]
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,rec,lpips,vq,gan,total,disc,usage,slice" and len(lines) == 21
    assert 0.0 < evaluate_usage(model, phantoms(4)) <= 1.0


def test_resume_is_bit_identical(tmp_path):
    vols = phantoms(3, (16, 16, 16), (20.0, 20.0, 20.0))
    config = small_config()
    _, full, hist_full = train_compressor(vols, config)
    _, half, _ = train_compressor(vols, config, steps=6)
    save_checkpoint(tmp_path / "half.xckp", half)
    model, resumed, hist_resumed = train_compressor(vols, config, resume=load_checkpoint(tmp_path / "half.xckp"))
    save_checkpoint(tmp_path / "a.xckp", full)
    save_checkpoint(tmp_path / "b.xckp", resumed)
    assert (tmp_path / "a.xckp").read_bytes() == (tmp_path / "b.xckp").read_bytes()
    assert hist_resumed == hist_full[3:]
    restored = load_compressor(load_checkpoint(tmp_path / "a.xckp"))
    assert np.array_equal(reconstruct(restored, vols[:1]), reconstruct(model, vols[:1]))


def test_nan_aborts_with_term_name():
    vols = phantoms(2, (16, 16, 16), (20.0, 20.0, 20.0))
    vols[0] = np.full_like(vols[0], np.nan)
    vols[1] = vols[0]
    with pytest.raises(NumericalAbort, match="'rec'"):
        train_compressor(vols, small_config())


def test_input_validation():
    with pytest.raises(ValueError):
        train_compressor(phantoms(1, (16, 16, 16), (20.0,) * 3), small_config())
    with pytest.raises(ValueError):
        train_compressor(phantoms(2, (16, 16, 16), (20.0,) * 3), small_config(dims=(32, 32, 32)))
