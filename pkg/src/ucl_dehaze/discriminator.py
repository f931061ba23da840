"""PatchGAN critic and the least-squares adversarial objectives."""

from __future__ import annotations

import torch
from torch import nn

from .errors import DimensionError, InputError
from .generator import make_norm

KERNEL = 4
PADDING = 1


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN.

    ``n_layers`` stride-2 convolutions (widths ``base_channels * 2**k``, capped
    at 8x), one stride-1 convolution and a stride-1 single-channel head. There
    is no output sigmoid: scores are unbounded, as LSGAN expects.
    """

    def __init__(self, base_channels: int = 64, n_layers: int = 3, norm_kind: str = "instance"):
        super().__init__()
        c = base_channels
        layers = [nn.Conv2d(3, c, KERNEL, 2, PADDING), nn.LeakyReLU(0.2, True)]
        mult = 1
        for k in range(1, n_layers):
            prev, mult = mult, min(2 ** k, 8)
            layers += [nn.Conv2d(c * prev, c * mult, KERNEL, 2, PADDING),
                       make_norm(norm_kind, c * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [nn.Conv2d(c * prev, c * mult, KERNEL, 1, PADDING),
                   make_norm(norm_kind, c * mult), nn.LeakyReLU(0.2, True)]
        layers.append(nn.Conv2d(c * mult, 1, KERNEL, 1, PADDING))
        self.model = nn.Sequential(*layers)
        self.strides = [2] * n_layers + [1, 1]

    def score_map_size(self, size: int) -> int:
        for s in self.strides:
            size = (size + 2 * PADDING - KERNEL) // s + 1
        return size

    @property
    def receptive_field(self) -> int:
        rf = 1
        for s in reversed(self.strides):
            rf = (rf - 1) * s + KERNEL
        return rf

    def forward(self, img):
        if img.dim() != 4:
            raise DimensionError(f"expected an N x C x H x W tensor, got shape {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if self.score_map_size(h) < 1 or self.score_map_size(w) < 1:
            raise DimensionError(f"image {h}x{w} is too small to yield a single patch score")
        return self.model(img)


def _check_scores(scores, name):
    if scores.numel() == 0:
        raise InputError(f"{name} score map is empty")
    if not torch.isfinite(scores).all():
        raise InputError(f"{name} score map contains non-finite values")


def lsgan_generator_loss(fake_scores):
    """Mean of ``(D(G(x)) - 1)**2`` over every patch and batch element."""
    fake_scores = torch.as_tensor(fake_scores)
    _check_scores(fake_scores, "fake")
    return ((fake_scores - 1) ** 2).mean()


def lsgan_discriminator_loss(real_scores, fake_scores):
    """``mean((D(y) - 1)**2) + mean(D(G(x))**2)``."""
    real_scores = torch.as_tensor(real_scores)
    fake_scores = torch.as_tensor(fake_scores)
    _check_scores(real_scores, "real")
    _check_scores(fake_scores, "fake")
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()
