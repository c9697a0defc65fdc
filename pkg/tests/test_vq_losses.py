import math

import pytest
import torch

from radct.vq.losses import VqLossWeights, coronal_slice, gan_loss, generator_adv_loss, vqgan_loss


def half(x):
    """Discriminator whose probability is 0.5 everywhere (logit 0)."""
    return torch.zeros(x.shape[0], dtype=x.dtype)


def vols(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(2, 1, 8, 8, 8, generator=gen) * 2 - 1


def test_gan_loss_half_discriminator():
    x = vols()
    assert gan_loss(x, x.flip(2), 3, half, half, 1.0, 1.0).item() == pytest.approx(4 * math.log(0.5), abs=1e-6)
    assert gan_loss(x, x, 3, half, half, 1.0, 1.0).item() == pytest.approx(-2.7726, abs=1e-4)
    assert gan_loss(x, x, 3, half, half, 0.0, 0.0).item() == 0.0
    assert generator_adv_loss(x, 0, half, half, 1.0, 1.0).item() == pytest.approx(-2 * math.log(0.5), abs=1e-6)


def test_gan_loss_clamps_log():
    x = vols()

    def sure(v):
        return torch.full((v.shape[0],), 1e4)

    assert gan_loss(x, x, 0, sure, sure, 1.0, 0.0).item() == pytest.approx(math.log(1e-7), rel=1e-5)


def test_slice_index_validated():
    x = vols()
    with pytest.raises(ValueError):
        coronal_slice(x, 8)
    with pytest.raises(ValueError):
        gan_loss(x, x, -1, half, half)
    assert torch.equal(coronal_slice(x, 5), x[..., 5])


def test_vqgan_loss_examples():
    x = vols()
    z = torch.randn(2, 8, 2, 2, 2)
    zero = VqLossWeights(0, 0, 0, 0)
    total, terms = vqgan_loss(x, x + 0.3, z, z + 1, zero)
    assert total.item() == 0.0
    total, terms = vqgan_loss(x, x + 0.5, z, z, VqLossWeights(1, 0, 0, 0))
    assert total.item() == pytest.approx(0.5, abs=1e-6)
    total, terms = vqgan_loss(x, x, z, z, VqLossWeights(), homogeneous=True)
    assert terms["rec"].item() == 0.0 and terms["vq"].item() == 0.0
    _, raw = vqgan_loss(x, x, z, z + 1.0, VqLossWeights(), homogeneous=False)
    assert raw["vq"].item() == pytest.approx(2 * 8, rel=1e-6)  # two terms, 8 channels of unit offset


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        VqLossWeights(rec=-1.0)
    with pytest.raises(ValueError):
        VqLossWeights(beta=-0.1)
