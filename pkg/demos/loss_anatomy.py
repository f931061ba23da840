"""
Loss anatomy
============

The contrastive and perceptual terms on hand-made inputs, where the answer
is known in advance.
"""

import math

import torch

from ucl_dehaze import LossWeights, VGGFeatures, nce_single, scp_loss, total_generator_loss

# an anchor equally similar to its positive and all N negatives cannot tell them apart
v = torch.nn.functional.normalize(torch.randn(256), dim=0)
for n in (1, 15, 255):
    print(f"N={n:3d}: nce={nce_single(v, v, v.repeat(n, 1)).item():.6f}  log(N+1)={math.log(n + 1):.6f}")

# SCP is zero when the restored image already equals the clean one
vgg = VGGFeatures(seed=0)
clean = torch.rand(1, 3, 64, 64) * 2 - 1
hazy = (clean + 1.6) / 2.2 - 0.2
print("scp(clean, clean, hazy) =", scp_loss(clean, clean, hazy, vgg).item())
print("scp(hazy, clean, hazy)  =", f"{scp_loss(hazy, clean, hazy, vgg).item():.3e}", "(denominator ~ delta)")
print("scp(mid, clean, hazy)   =", f"{scp_loss((clean + hazy) / 2, clean, hazy, vgg).item():.3f}")

# the weighted objective as used by a training step
total, bundle = total_generator_loss({"adv_g": 0.9, "pc_x": 8000.0, "pc_y": 7900.0, "scp": 2.0, "ide": 0.3},
                                     LossWeights())
print(bundle)
