"""Seeded parameter initialisation independent of torch's global RNG."""

import torch
from torch import nn


def seeded_init(module: nn.Module, gen: torch.Generator) -> nn.Module:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every conv/linear weight and bias.

    Modules are visited in registration order, so the draw sequence is fixed
    by the architecture.
    """
    for mod in module.modules():
        if isinstance(mod, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            bound = 1.0 / mod.weight[0].numel() ** 0.5
            with torch.no_grad():
                mod.weight.copy_((torch.rand(mod.weight.shape, generator=gen) * 2 - 1) * bound)
                if mod.bias is not None:
                    mod.bias.copy_((torch.rand(mod.bias.shape, generator=gen) * 2 - 1) * bound)
    return module
