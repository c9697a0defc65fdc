"""Single-radiograph CT reconstruction with a VQ compressor, a radiograph
prior encoder and a prior-conditioned latent diffusion model."""

__version__ = "0.1.0"
