"""
Scoring a restoration
=====================

Veil a synthetic scene, "restore" it by inverting the veil with a small error,
and score both against the clean image.
"""

import numpy as np

from ucl_dehaze import evaluate_pair

rng = np.random.default_rng(0)
yy, xx = np.mgrid[0:96, 0:96] / 96
clean = np.stack([xx, yy, (xx + yy) / 2], -1) * 0.7 + 0.1
clean[30:60, 20:50] = [0.8, 0.2, 0.1]

t, airlight = 0.5, 0.9
hazy = clean * t + airlight * (1 - t)
restored = np.clip((hazy - airlight * (1 - t)) / (t * 1.05) + rng.normal(0, 0.01, clean.shape), 0, 1)

for name, img in (("hazy", hazy), ("restored", restored)):
    scores = evaluate_pair(img, clean, hazy)
    print(name.ljust(9), "  ".join(f"{k}={v:.3f}" for k, v in scores.items() if v is not None))
