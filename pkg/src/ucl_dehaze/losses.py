"""Contrastive, perceptual and identity objectives for training the generator.

Patch-wise contrast (PatchNCE) compares projected encoder features of the
output with those of the input at the same spatial locations; the
self-contrastive perceptual (SCP) term pulls the restored image toward a
clean image and away from a hazy one in a frozen VGG-16 feature space.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, InputError, NonFiniteLossError
from .generator import FeatureStack

PROJECTION_DIM = 256
# torchvision vgg16().features indices of max-pool layers 2, 3 and 5
VGG_TAPS = (9, 16, 30)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SCP_DELTA = 1e-7


@dataclass
class LossWeights:
    adv: float = 1.0
    pc: float = 1.0
    scp: float = 0.0002
    ide: float = 5.0
    scp_layers: Tuple[float, float, float] = (0.4, 0.6, 1.0)
    tau: float = 0.07

    def __post_init__(self):
        self.scp_layers = tuple(float(w) for w in self.scp_layers)
        for name in ("adv", "pc", "scp", "ide"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name!r} must be non-negative")
        if any(w < 0 for w in self.scp_layers):
            raise ConfigError("scp_layers weights must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")


@dataclass
class LossBundle:
    """Unweighted loss components of one step plus the weighted total."""

    adv_g: float = 0.0
    pc_x: float = 0.0
    pc_y: float = 0.0
    scp: float = 0.0
    ide: float = 0.0
    total: float = 0.0
    adv_d: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


# --------------------------------------------------------------------------
# patch sampling and projection


class ProjectionHead(nn.Module):
    """Two-layer MLPs, one per encoder tap, mapping ``C_l -> 256 -> 256``."""

    def __init__(self, in_channels: Sequence[int], dim: int = PROJECTION_DIM):
        super().__init__()
        self.in_channels = list(in_channels)
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, dim), nn.ReLU(), nn.Linear(dim, dim))
            for c in self.in_channels
        )

    def __len__(self):
        return len(self.mlps)


@dataclass
class PatchSampleSet:
    """Unit-norm projected vectors, each ``(B*S_l, K)``, with their locations."""

    vectors: List[torch.Tensor]
    indices: List[torch.Tensor]
    layer_ids: List[int] = field(default_factory=list)


def sample_and_project(stack: FeatureStack, heads: ProjectionHead, num: int = 256,
                       reuse_indices: Optional[Sequence[torch.Tensor]] = None,
                       generator: Optional[torch.Generator] = None) -> PatchSampleSet:
    """Sample spatial locations from every tapped map and project them.

    Passing ``reuse_indices`` (typically ``other_set.indices``) samples exactly
    those locations, which is how output patches are put in correspondence
    with input patches.
    """
    if len(heads) != len(stack):
        raise ConfigError(f"{len(heads)} projection heads for {len(stack)} feature maps")
    if reuse_indices is not None and len(reuse_indices) != len(stack):
        raise ConfigError("reuse_indices must provide one index list per layer")
    vectors, indices = [], []
    for k, ((_, feat), mlp) in enumerate(zip(stack.layers, heads.mlps)):
        b, c, h, w = feat.shape
        flat = feat.permute(0, 2, 3, 1).reshape(b, h * w, c)
        if reuse_indices is None:
            perm = torch.randperm(h * w, generator=generator)
            idx = perm[: min(num, h * w)]
        else:
            idx = torch.as_tensor(reuse_indices[k], dtype=torch.long)
            if idx.numel() and (idx.min() < 0 or idx.max() >= h * w):
                raise ConfigError(f"reuse index out of range for layer with {h * w} locations")
        picked = flat[:, idx.to(flat.device), :].reshape(-1, c)
        vectors.append(F.normalize(mlp(picked), dim=1))
        indices.append(idx)
    return PatchSampleSet(vectors, indices, stack.layer_ids)


# --------------------------------------------------------------------------
# NCE


def _cosine(u, v):
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise InputError("cosine similarity is undefined for zero-norm vectors")
    return (u * v).sum(-1) / (nu * nv)


def nce_single(v, v_pos, v_negs, tau: float = 0.07):
    """Cross-entropy of picking ``v_pos`` among ``v_negs`` for anchor ``v``.

    ``v_negs`` is ``(N, K)``. Similarities are cosine, scaled by ``1/tau``.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    v, v_pos, v_negs = (torch.as_tensor(a) for a in (v, v_pos, v_negs))
    v_negs = v_negs.reshape(-1, v.shape[-1])
    logits = torch.cat([_cosine(v, v_pos).reshape(1), _cosine(v.unsqueeze(0), v_negs)]) / tau
    # log(1 + sum exp(l_n - l_pos)) stays accurate when the loss is near zero
    return torch.logsumexp(logits - logits[0], dim=0)


def patch_nce_loss(anchors: PatchSampleSet, references: PatchSampleSet, tau: float = 0.07,
                   batch_size: int = 1):
    """Multi-layer PatchNCE, summed over layers and sampled locations.

    For each anchor the positive is the reference vector at the same index;
    the negatives are all other reference vectors of the same layer and image.
    References are treated as fixed targets (no gradient).
    """
    if len(anchors.vectors) != len(references.vectors):
        raise ConfigError("anchor and reference sets have different layer counts")
    total = 0.0
    for q, k, iq, ik in zip(anchors.vectors, references.vectors, anchors.indices, references.indices):
        if iq.shape != ik.shape or not torch.equal(iq.cpu(), ik.cpu()):
            raise ConfigError("anchor and reference sets were sampled at different locations")
        if q.shape != k.shape:
            raise DimensionError("anchor and reference vectors differ in shape")
        k = k.detach()
        dim = q.shape[-1]
        q = q.reshape(batch_size, -1, dim)
        k = k.reshape(batch_size, -1, dim)
        logits = torch.bmm(q, k.transpose(1, 2)) / tau
        s = logits.shape[-1]
        target = torch.arange(s, device=q.device).repeat(batch_size)
        total = total + F.cross_entropy(logits.reshape(-1, s), target, reduction="sum") / batch_size
    return total


# --------------------------------------------------------------------------
# self-contrastive perceptual loss


class VGGFeatures(nn.Module):
    """Frozen VGG-16 trunk returning activations after max-pools 2, 3 and 5.

    ``weights_path`` may hold a full torchvision ``vgg16`` state dict or just
    its ``features`` part. Without it the trunk is initialised from ``seed``,
    which keeps the loss well defined offline.
    """

    def __init__(self, weights_path=None, seed: int = 0, taps: Sequence[int] = VGG_TAPS):
        super().__init__()
        from torchvision.models import vgg16

        with torch.random.fork_rng():
            torch.manual_seed(seed)
            features = vgg16(weights=None).features[: max(taps) + 1]
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k[len("features."):] if k.startswith("features.") else k: v
                     for k, v in state.items() if not k.startswith("classifier.")}
            features.load_state_dict(state, strict=False)
        bounds = [0] + [t + 1 for t in taps]
        self.slices = nn.ModuleList(features[a:b] for a, b in zip(bounds, bounds[1:]))
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # permanently frozen
        return super().train(False)

    def forward(self, img):
        """``img`` in the network range [-1, 1]."""
        h = ((img + 1) / 2 - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        feats = []
        for block in self.slices:
            h = block(h)
            feats.append(h)
        return feats


def scp_loss(restored, clean_pos, hazy_neg, extractor: Callable, weights: Sequence[float] = (0.4, 0.6, 1.0),
             delta: float = SCP_DELTA):
    """Weighted sum over feature levels of ``L1(clean, restored) / (L1(hazy, restored) + delta)``.

    L1 distances are element means. The outer loss weight is not applied here.
    """
    if not (restored.shape == clean_pos.shape == hazy_neg.shape):
        raise DimensionError(
            f"shape mismatch: restored {tuple(restored.shape)}, clean {tuple(clean_pos.shape)}, "
            f"hazy {tuple(hazy_neg.shape)}")
    with torch.no_grad():
        f_pos = extractor(clean_pos)
        f_neg = extractor(hazy_neg)
    f_out = extractor(restored)
    if len(weights) != len(f_out):
        raise ConfigError(f"{len(weights)} SCP weights for {len(f_out)} feature levels")
    loss = 0.0
    for w, a, p, n in zip(weights, f_out, f_pos, f_neg):
        num = (p.detach() - a).abs().mean()
        den = (n.detach() - a).abs().mean()
        loss = loss + w * num / (den + delta)
    return loss


def identity_loss(G: Callable, y):
    """Mean absolute deviation between ``G(y)`` and ``y``."""
    return (G(y) - y).abs().mean()


# --------------------------------------------------------------------------
# total objective

COMPONENTS = ("adv_g", "pc_x", "pc_y", "scp", "ide")


def total_generator_loss(parts: Mapping[str, object], weights: LossWeights):
    """Weighted generator objective.

    ``parts`` maps component names (``adv_g``, ``pc_x``, ``pc_y``, ``scp``,
    ``ide``) to scalars or scalar tensors; missing components count as zero.
    Both PatchNCE directions share the ``pc`` weight.

    Returns ``(total, bundle)``: ``total`` keeps the autograd graph when the
    parts are tensors, ``bundle`` holds plain floats of the unweighted parts.
    """
    unknown = set(parts) - set(COMPONENTS) - {"adv_d"}
    if unknown:
        raise ConfigError(f"unknown loss components: {sorted(unknown)}")
    coef = {"adv_g": weights.adv, "pc_x": weights.pc, "pc_y": weights.pc,
            "scp": weights.scp, "ide": weights.ide}
    values = {}
    for name in COMPONENTS:
        value = parts.get(name, 0.0)
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
        values[name] = scalar
    total = 0.0
    for name in COMPONENTS:
        if coef[name] != 0 and name in parts:
            total = total + coef[name] * parts[name]
    bundle = LossBundle(**values, adv_d=float(parts.get("adv_d", 0.0)))
    bundle.total = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    return total, bundle
