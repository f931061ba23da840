"""ResNet-style encoder/decoder generator with spectral norm and SC-Conv blocks.

Tensors are NCHW in the network range [-1, 1]. The encoder is exposed as an
ordered list of stages so intermediate features can be tapped for the
patch-wise contrastive loss:

    tap 0          the input image itself
    tap 1          7x7 stem convolution
    tap 2, 3       first and second stride-2 down-sampling convolutions
    tap 4 .. 3+n   residual blocks 1..n
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .errors import ConfigError, DimensionError, InputError

NORM_KINDS = ("instance", "batch", "none")
SN_SCOPES = ("residual", "all")


@dataclass
class GeneratorConfig:
    n_residual_blocks: int = 9
    base_channels: int = 64
    use_spectral_norm: bool = True
    use_sc_conv: bool = True
    norm_kind: str = "instance"
    spectral_norm_scope: str = "residual"
    sc_pooling_rate: int = 4
    reflect_pad: bool = True

    def __post_init__(self):
        if self.n_residual_blocks < 1:
            raise ConfigError("n_residual_blocks must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.use_sc_conv and self.base_channels % 2:
            raise ConfigError("SC-Conv needs an even base_channels")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.spectral_norm_scope not in SN_SCOPES:
            raise ConfigError(f"spectral_norm_scope must be one of {SN_SCOPES}")
        if self.sc_pooling_rate < 1:
            raise ConfigError("sc_pooling_rate must be >= 1")


@dataclass
class FeatureStack:
    """Encoder features at selected taps, ordered by depth."""

    layers: List[Tuple[int, torch.Tensor]]
    source: str = "input_x"

    @property
    def layer_ids(self) -> List[int]:
        return [i for i, _ in self.layers]

    @property
    def maps(self) -> List[torch.Tensor]:
        return [f for _, f in self.layers]

    def __len__(self):
        return len(self.layers)


def default_nce_layers(n_residual_blocks: int) -> List[int]:
    """Input, both down-sampling convs, and residual blocks 1 and 5.

    With fewer than five residual blocks the last block stands in for block 5.
    """
    last = 3 + min(5, n_residual_blocks)
    return sorted({0, 2, 3, 4, last})


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


# --------------------------------------------------------------------------
# spectral normalization


def _l2normalize(v, eps=1e-12):
    return v / (v.norm() + eps)


def spectral_normalize(weight, n_power_iterations: int = 30, u=None, eps: float = 1e-12):
    """Divide ``weight`` by its largest singular value, estimated by power iteration.

    Convolution kernels are flattened to ``(out_channels, -1)``. An all-zero
    weight has no defined spectral norm and is returned unchanged.

    Returns the normalized weight with the same type as the input (numpy
    arrays in, numpy arrays out).
    """
    as_numpy = not isinstance(weight, torch.Tensor)
    w = torch.as_tensor(weight, dtype=torch.float64 if as_numpy else None)
    if not torch.isfinite(w).all():
        raise InputError("weight contains non-finite entries")
    mat = w.reshape(w.shape[0], -1)
    if not mat.abs().max() > 0:
        return weight
    with torch.no_grad():
        if u is None:
            g = torch.Generator().manual_seed(0)
            u = torch.randn(mat.shape[0], generator=g, dtype=mat.dtype)
        u = _l2normalize(torch.as_tensor(u, dtype=mat.dtype), eps)
        v = _l2normalize(mat.t() @ u, eps)
        for _ in range(n_power_iterations):
            v = _l2normalize(mat.t() @ u, eps)
            u = _l2normalize(mat @ v, eps)
    sigma = torch.dot(u, mat @ v)
    out = w / sigma
    return out.numpy() if as_numpy else out


class SpectralNorm(nn.Module):
    """Parametrization dividing a weight by its power-iteration spectral norm.

    One power-iteration step runs per forward pass in training mode; the
    singular-vector estimates live in buffers so they survive checkpointing.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1,
                 init_iterations: int = 15, eps: float = 1e-12):
        super().__init__()
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        mat = weight.detach().reshape(weight.shape[0], -1)
        u = _l2normalize(mat.new_empty(mat.shape[0]).normal_(), eps)
        v = _l2normalize(mat.new_empty(mat.shape[1]).normal_(), eps)
        self.register_buffer("_u", u)
        self.register_buffer("_v", v)
        self._power_method(mat, init_iterations)

    @torch.no_grad()
    def _power_method(self, mat, n):
        for _ in range(n):
            self._v.copy_(_l2normalize(mat.t() @ self._u, self.eps))
            self._u.copy_(_l2normalize(mat @ self._v, self.eps))

    def forward(self, weight):
        mat = weight.reshape(weight.shape[0], -1)
        if self.training:
            self._power_method(mat.detach(), self.n_power_iterations)
        u = self._u.clone(memory_format=torch.contiguous_format)
        v = self._v.clone(memory_format=torch.contiguous_format)
        sigma = torch.dot(u, mat @ v)
        if sigma.detach().abs() <= self.eps:
            return weight
        return weight / sigma


def apply_spectral_norm(module: nn.Module) -> nn.Module:
    parametrize.register_parametrization(module, "weight", SpectralNorm(module.weight))
    return module


def spectral_norm_layers(model: nn.Module):
    """Yield ``(name, module)`` for every spectrally normalized layer."""
    for name, m in model.named_modules():
        if parametrize.is_parametrized(m, "weight") and any(
                isinstance(p, SpectralNorm) for p in m.parametrizations.weight):
            yield name, m


# --------------------------------------------------------------------------
# building blocks


class SCConv(nn.Module):
    """Self-calibrated convolution.

    The input is split channel-wise into ``X1`` and ``X2``. ``X2`` passes
    through a plain 3x3 convolution ``K1``. ``X1`` is calibrated by an
    attention map computed at reduced resolution by ``K2`` and modulates the
    ``K3`` response before the final ``K4``. The two outputs are concatenated,
    so channel count and spatial size are preserved.
    """

    def __init__(self, channels: int, pooling_rate: int = 4, norm_kind: str = "instance"):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"SC-Conv needs an even channel count, got {channels}")
        half = channels // 2
        self.pooling_rate = pooling_rate
        self.k1 = nn.Sequential(nn.Conv2d(half, half, 3, padding=1), make_norm(norm_kind, half))
        # no normalization here: the pooled map can be a single pixel
        self.k2 = nn.Conv2d(half, half, 3, padding=1)
        self.k3 = nn.Sequential(nn.Conv2d(half, half, 3, padding=1), make_norm(norm_kind, half))
        self.k4 = nn.Sequential(nn.Conv2d(half, half, 3, padding=1), make_norm(norm_kind, half))

    def forward(self, x):
        if x.shape[1] % 2:
            raise ConfigError(f"SC-Conv needs an even channel count, got {x.shape[1]}")
        x1, x2 = torch.chunk(x, 2, dim=1)
        h, w = x1.shape[-2:]
        r = min(self.pooling_rate, h, w)
        coarse = self.k2(F.avg_pool2d(x1, r))
        calib = torch.sigmoid(x1 + F.interpolate(coarse, size=(h, w), mode="nearest"))
        y1 = self.k4(self.k3(x1) * calib)
        y2 = self.k1(x2)
        return torch.cat([y1, y2], dim=1)


def sc_conv(x, module: Optional[SCConv] = None, seed: int = 0):
    """Apply a self-calibrated convolution to an NCHW (or CHW) feature map.

    Without ``module`` a fresh block is built for the input's channel count
    with weights drawn from ``seed``.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if module is None:
        if x.shape[1] % 2:
            raise ConfigError(f"SC-Conv needs an even channel count, got {x.shape[1]}")
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            module = SCConv(x.shape[1]).to(x.dtype)
    y = module(x)
    return y.squeeze(0) if squeeze else y


def _conv_unit(conv, cfg: GeneratorConfig, channels: int, sn: bool) -> nn.Sequential:
    if sn:
        apply_spectral_norm(conv)
    layers = [conv, make_norm(cfg.norm_kind, channels), nn.ReLU(True)]
    if cfg.use_sc_conv:
        layers.append(SCConv(channels, cfg.sc_pooling_rate, cfg.norm_kind))
    return nn.Sequential(*layers)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, cfg: GeneratorConfig):
        super().__init__()
        conv1 = nn.Conv2d(channels, channels, 3)
        conv2 = nn.Conv2d(channels, channels, 3)
        if cfg.use_spectral_norm:
            apply_spectral_norm(conv1)
            apply_spectral_norm(conv2)
        layers = [nn.ReflectionPad2d(1), conv1, make_norm(cfg.norm_kind, channels), nn.ReLU(True)]
        if cfg.use_sc_conv:
            layers.append(SCConv(channels, cfg.sc_pooling_rate, cfg.norm_kind))
        layers += [nn.ReflectionPad2d(1), conv2, make_norm(cfg.norm_kind, channels)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Hazy-to-clean mapping network ``G``."""

    def __init__(self, config: Optional[GeneratorConfig] = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        c = cfg.base_channels
        sn_all = cfg.use_spectral_norm and cfg.spectral_norm_scope == "all"

        stem = _conv_unit(nn.Conv2d(3, c, 7), cfg, c, sn_all)
        stages = [nn.Sequential(nn.ReflectionPad2d(3), *stem)]
        stages.append(_conv_unit(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), cfg, 2 * c, sn_all))
        stages.append(_conv_unit(nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), cfg, 4 * c, sn_all))
        stages += [ResidualBlock(4 * c, cfg) for _ in range(cfg.n_residual_blocks)]
        self.encoder = nn.ModuleList(stages)

        up1 = nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1)
        up2 = nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1)
        head = nn.Conv2d(c, 3, 7)
        if sn_all:
            apply_spectral_norm(head)
        self.decoder = nn.Sequential(
            _conv_unit(up1, cfg, 2 * c, sn_all),
            _conv_unit(up2, cfg, c, sn_all),
            nn.ReflectionPad2d(3),
            head,
            nn.Tanh(),
        )

    @property
    def max_layer_id(self) -> int:
        return len(self.encoder)

    def layer_channels(self, layer_ids: Sequence[int]) -> List[int]:
        c = self.config.base_channels
        widths = [3, c, 2 * c] + [4 * c] * (len(self.encoder) - 2)
        self._check_layers(layer_ids)
        return [widths[i] for i in layer_ids]

    def _check_layers(self, layer_ids):
        ids = list(layer_ids)
        for i in ids:
            if not isinstance(i, int) or not 0 <= i <= self.max_layer_id:
                raise ConfigError(f"unknown encoder layer id {i!r}; valid ids are 0..{self.max_layer_id}")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ConfigError(f"layer ids must be strictly increasing, got {ids}")

    def _prepare(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected an N x 3 x H x W tensor, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h < 8 or w < 8:
            raise DimensionError(f"image must be at least 8x8, got {h}x{w}")
        if not torch.isfinite(x).all():
            raise InputError("input image contains non-finite values")
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            if not self.config.reflect_pad:
                raise DimensionError(f"image size {h}x{w} is not divisible by 4 and padding is disabled")
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        return x, (h, w)

    def forward(self, x):
        x, (h, w) = self._prepare(x)
        feat = x
        for stage in self.encoder:
            feat = stage(feat)
        return self.decoder(feat)[..., :h, :w]

    def encode_features(self, x, layer_ids: Optional[Sequence[int]] = None,
                        source: str = "input_x") -> FeatureStack:
        if layer_ids is None:
            layer_ids = default_nce_layers(self.config.n_residual_blocks)
        layer_ids = list(layer_ids)
        self._check_layers(layer_ids)
        x, _ = self._prepare(x)
        wanted = set(layer_ids)
        out = []
        feat = x
        if 0 in wanted:
            out.append((0, feat))
        for i, stage in enumerate(self.encoder, start=1):
            if i > layer_ids[-1]:
                break
            feat = stage(feat)
            if i in wanted:
                out.append((i, feat))
        return FeatureStack(out, source)
