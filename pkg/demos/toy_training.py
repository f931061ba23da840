"""
Training on toy smoke
=====================

Train a small model on unpaired synthetic scenes and smoke-veiled scenes,
then check what happens to a held-out veiled image.

About a hundred steps is enough to watch the losses fall and exercise the
whole loop. It is not enough to learn dehazing: expect the held-out PSNR of
the output to sit near (often below) that of the hazy input.
"""

import numpy as np

from ucl_dehaze import TrainConfig, fit, load_generator
from ucl_dehaze.cli import dehaze_image
from ucl_dehaze.metrics import psnr


def scene(rng, n=32):
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.empty((n, n, 3))
    img[:] = rng.random(3) * 0.6
    img += 0.3 * np.stack([xx * rng.random(), yy * rng.random(), (xx + yy) / 2 * rng.random()], -1)
    for _ in range(4):
        cx, cy, r = rng.random(3)
        img[(xx - cx) ** 2 + (yy - cy) ** 2 < (0.1 + 0.25 * r) ** 2] = rng.random(3)
    return np.clip(img, 0, 1)


def veil(img, rng):
    t = 0.45 + 0.2 * rng.random()
    return img * t + 0.9 * (1 - t)


rng = np.random.default_rng(0)
clean = [scene(rng) for _ in range(16)]
hazy = [veil(scene(rng), rng) for _ in range(16)]

config = TrainConfig(epochs=6, decay_start=4, crop_size=32, base_channels=16, n_residual_blocks=3,
                     disc_channels=16, num_patches=64, variant="v5")


def progress(state, bundle):
    if state.step % 16 == 0:
        print(f"step {state.step:3d}  total {bundle.total:9.2f}  adv_d {bundle.adv_d:.3f}  lr {state.lr:.1e}")


final = fit(config, (hazy, clean), on_step=progress)

G = load_generator(final)
truth = scene(rng, 64)
foggy = veil(truth, rng)
print(f"held-out PSNR: hazy {psnr(foggy, truth):.2f} dB, restored {psnr(dehaze_image(G, foggy), truth):.2f} dB")
