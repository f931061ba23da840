"""
The dehazing generator
======================

Build the default generator, push an odd-sized image through it and look at
the encoder taps the contrastive loss reads from.
"""

import torch

from ucl_dehaze import Generator, GeneratorConfig

torch.manual_seed(0)
G = Generator(GeneratorConfig()).eval()
print(f"parameters: {sum(p.numel() for p in G.parameters()) / 1e6:.2f}M")

# 250 is not a multiple of 4; the input is reflect-padded and the output cropped back
x = torch.rand(1, 3, 250, 250) * 2 - 1
with torch.no_grad():
    y = G(x)
print("input", tuple(x.shape), "-> output", tuple(y.shape), f"range [{y.min():.2f}, {y.max():.2f}]")

# default taps: input RGB, both down-sampling convs, residual blocks 1 and 5
with torch.no_grad():
    stack = G.encode_features(torch.rand(1, 3, 256, 256) * 2 - 1)
for layer_id, fmap in stack.layers:
    print(f"tap {layer_id}: {tuple(fmap.shape[1:])}")
