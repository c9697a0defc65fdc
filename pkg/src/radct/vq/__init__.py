from .losses import VqLossWeights, gan_loss, generator_adv_loss, vqgan_loss
from .model import Compressor, CompressorConfig, LatentGrid, decode, encode, quantize
from .quantizer import Codebook, codebook_usage, nearest_indices, zscore, zscore_normalize
from .train import NumericalAbort, evaluate_usage, load_compressor, train_compressor

__all__ = [
    "Codebook", "Compressor", "CompressorConfig", "LatentGrid", "NumericalAbort", "VqLossWeights",
    "codebook_usage", "decode", "encode", "evaluate_usage", "gan_loss", "generator_adv_loss",
    "load_compressor", "nearest_indices", "quantize", "train_compressor", "vqgan_loss", "zscore",
    "zscore_normalize",
]
