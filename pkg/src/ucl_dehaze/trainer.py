"""Alternating LSGAN / contrastive training loop with resumable state."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .data import (UnpairedDataset, image_to_tensor, load_checkpoint, load_image, preprocess,
                   save_checkpoint)
from .discriminator import PatchDiscriminator, lsgan_discriminator_loss, lsgan_generator_loss
from .errors import ConfigError, InputError, NonFiniteLossError
from .generator import Generator, GeneratorConfig, default_nce_layers
from .losses import (LossBundle, LossWeights, ProjectionHead, VGGFeatures, patch_nce_loss,
                     sample_and_project, scp_loss, total_generator_loss)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "adv_g", "adv_d", "pc_x", "pc_y", "scp", "ide", "total", "lr")


@dataclass
class VariantFlags:
    use_ide: bool = True
    use_dual_pc: bool = True
    use_scp: bool = True
    use_sp_norm: bool = True
    use_sc_conv: bool = True


# Each variant adds one component to the previous one; v5 is the full model.
VARIANTS: Dict[str, VariantFlags] = {
    "base": VariantFlags(False, False, False, False, False),
    "v1": VariantFlags(True, False, False, False, False),
    "v2": VariantFlags(True, True, False, False, False),
    "v3": VariantFlags(True, True, True, False, False),
    "v4": VariantFlags(True, True, True, True, False),
    "v5": VariantFlags(True, True, True, True, True),
}


@dataclass
class TrainConfig:
    epochs: int = 100
    decay_start: int = 50
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    crop_size: int = 256
    seed: int = 0
    num_patches: int = 256
    nce_layers: Optional[List[int]] = None
    base_channels: int = 64
    n_residual_blocks: int = 9
    norm_kind: str = "instance"
    spectral_norm_scope: str = "residual"
    disc_channels: int = 64
    scp_negative: str = "self"
    vgg_weights: Optional[str] = None
    vgg_seed: int = 0
    checkpoint_every: int = 1
    grad_clip: Optional[float] = None
    device: str = "cpu"
    weights: LossWeights = field(default_factory=LossWeights)
    variant: VariantFlags = field(default_factory=VariantFlags)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = _build(LossWeights, self.weights, "weights")
        if isinstance(self.variant, str):
            self.variant = variant_flags(self.variant)
        elif isinstance(self.variant, dict):
            self.variant = _build(VariantFlags, self.variant, "variant")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.decay_start <= self.epochs:
            raise ConfigError("decay_start must satisfy 0 < decay_start <= epochs")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_patches < 1:
            raise ConfigError("num_patches must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.scp_negative not in ("self", "random"):
            raise ConfigError("scp_negative must be 'self' or 'random'")
        if self.nce_layers is not None:
            self.nce_layers = [int(i) for i in self.nce_layers]

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_residual_blocks=self.n_residual_blocks,
            base_channels=self.base_channels,
            use_spectral_norm=self.variant.use_sp_norm,
            use_sc_conv=self.variant.use_sc_conv,
            norm_kind=self.norm_kind,
            spectral_norm_scope=self.spectral_norm_scope,
        )

    def effective_weights(self) -> LossWeights:
        """Loss weights with disabled components zeroed."""
        w = copy.copy(self.weights)
        if not self.variant.use_scp:
            w.scp = 0.0
        if not self.variant.use_ide:
            w.ide = 0.0
        return w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"]["scp_layers"] = list(d["weights"]["scp_layers"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, d, prefix):
    names = {f.name for f in fields(cls)}
    for key in d:
        if key not in names:
            full = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown config key {full!r}")
    return cls(**d)


def variant_flags(name: str) -> VariantFlags:
    try:
        return copy.copy(VARIANTS[name.lower()])
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}") from None


def read_config_file(path) -> dict:
    """Raw key/value mapping from a JSON or TOML config file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def load_config(path) -> TrainConfig:
    """Read a TrainConfig from a JSON or TOML file (sections ``weights`` and ``variant``)."""
    return TrainConfig.from_dict(read_config_file(path))


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Constant learning rate up to ``decay_start``, then linear decay to 0 at ``epochs``."""
    if not 1 <= epoch <= config.epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{config.epochs}")
    if epoch <= config.decay_start:
        return config.lr
    return config.lr * ((config.epochs - epoch) / (config.epochs - config.decay_start))


# --------------------------------------------------------------------------
# state


def _adam(params, config):
    return torch.optim.Adam(params, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))


class TrainState:
    """Networks, optimizers, counters and random streams of one training run."""

    def __init__(self, config: TrainConfig, extractor=None):
        self.config = config
        self.device = torch.device(config.device)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.G = Generator(config.generator_config()).to(self.device)
            self.D = PatchDiscriminator(config.disc_channels, norm_kind=config.norm_kind).to(self.device)
        self.nce_layers = config.nce_layers or default_nce_layers(config.n_residual_blocks)
        self.G.layer_channels(self.nce_layers)  # validates the taps
        self.heads: Optional[ProjectionHead] = None
        self.opt_g = _adam(self.G.parameters(), config)
        self.opt_d = _adam(self.D.parameters(), config)
        self.opt_h = None
        self.epoch = 0
        self.step = 0
        self.torch_gen = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        if extractor is None and config.variant.use_scp:
            extractor = VGGFeatures(config.vgg_weights, seed=config.vgg_seed).to(self.device)
        self.extractor = extractor

    def ensure_heads(self):
        """Build projection heads on first use; widths follow the tapped layers."""
        if self.heads is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(self.config.seed + 1)
                self.heads = ProjectionHead(self.G.layer_channels(self.nce_layers)).to(self.device)
            self.opt_h = _adam(self.heads.parameters(), self.config)
            for group in self.opt_h.param_groups:
                group["lr"] = self.opt_g.param_groups[0]["lr"]
        return self.heads

    def set_lr(self, lr: float):
        for opt in (self.opt_g, self.opt_d, self.opt_h):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    @property
    def lr(self) -> float:
        return self.opt_g.param_groups[0]["lr"]

    def state_dict(self) -> dict:
        state = {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "epoch": self.epoch,
            "step": self.step,
            "generator": self.G.state_dict(),
            "discriminator": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": self.torch_gen.get_state(),
            "numpy_rng": json.dumps(self.rng.bit_generator.state),
        }
        if self.heads is not None:
            state["heads"] = self.heads.state_dict()
            state["heads_in_channels"] = list(self.heads.in_channels)
            state["opt_h"] = self.opt_h.state_dict()
        return copy.deepcopy(state)

    def load_state_dict(self, state: dict):
        if state["config_hash"] != self.config.config_hash():
            logger.warning("checkpoint config hash differs from the current config")
        self.epoch = int(state["epoch"])
        self.step = int(state["step"])
        self.G.load_state_dict(state["generator"])
        self.D.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.torch_gen.set_state(state["torch_rng"])
        self.rng.bit_generator.state = json.loads(state["numpy_rng"])
        if "heads" in state:
            self.heads = None
            self.ensure_heads()
            self.heads.load_state_dict(state["heads"])
            self.opt_h.load_state_dict(state["opt_h"])
        else:
            self.heads, self.opt_h = None, None

    @classmethod
    def from_checkpoint(cls, state: dict, extractor=None) -> "TrainState":
        ts = cls(TrainConfig.from_dict(state["config"]), extractor=extractor)
        ts.load_state_dict(state)
        return ts


# --------------------------------------------------------------------------
# one step


def _nce(state: TrainState, src, out):
    cfg = state.config
    heads = state.ensure_heads()
    feat_k = state.G.encode_features(src, state.nce_layers, source="input_x")
    feat_q = state.G.encode_features(out, state.nce_layers, source="output_y")
    ref = sample_and_project(feat_k, heads, cfg.num_patches, generator=state.torch_gen)
    anc = sample_and_project(feat_q, heads, cfg.num_patches, reuse_indices=ref.indices)
    return patch_nce_loss(anc, ref, cfg.weights.tau, batch_size=src.shape[0])


def _check(name, value, state, snapshot):
    v = float(value.detach())
    if not math.isfinite(v):
        if snapshot is not None:
            state.load_state_dict(snapshot)
        raise NonFiniteLossError(name, v)


def train_step(x, y, state: TrainState, hazy_neg=None, atomic: bool = True
               ) -> Tuple[TrainState, LossBundle]:
    """One discriminator update followed by one generator + projection-head update.

    ``x`` (hazy) and ``y`` (clean) are ``B x 3 x H x W`` tensors in [-1, 1].
    ``hazy_neg`` overrides the SCP negative (default: ``x``). The returned
    bundle holds the loss values evaluated before the updates. If any loss is
    non-finite the state is rolled back and ``NonFiniteLossError`` raised.
    """
    cfg = state.config
    flags = cfg.variant
    x = x.to(state.device)
    y = y.to(state.device)
    state.ensure_heads()
    snapshot = state.state_dict() if atomic else None
    G, D = state.G, state.D
    G.train()
    D.train()

    need_idt = flags.use_ide or flags.use_dual_pc
    out = G(torch.cat([x, y]) if need_idt else x)
    fake = out[: x.shape[0]]
    idt = out[x.shape[0]:] if need_idt else None

    # discriminator
    state.opt_d.zero_grad(set_to_none=True)
    loss_d = lsgan_discriminator_loss(D(y), D(fake.detach()))
    _check("adv_d", loss_d, state, snapshot)
    loss_d.backward()
    state.opt_d.step()

    # generator and heads
    D.requires_grad_(False)
    try:
        parts = {"adv_g": lsgan_generator_loss(D(fake)), "pc_x": _nce(state, x, fake)}
        if flags.use_dual_pc:
            parts["pc_y"] = _nce(state, y, idt)
        if flags.use_scp:
            neg = x if hazy_neg is None else hazy_neg.to(state.device)
            parts["scp"] = scp_loss(fake, y, neg, state.extractor, cfg.weights.scp_layers)
        if flags.use_ide:
            parts["ide"] = (idt - y).abs().mean()
        try:
            total, bundle = total_generator_loss(parts, cfg.effective_weights())
            _check("total", total, state, None)
        except NonFiniteLossError:
            if snapshot is not None:
                state.load_state_dict(snapshot)
            raise
        state.opt_g.zero_grad(set_to_none=True)
        state.opt_h.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(list(G.parameters()) + list(state.heads.parameters()),
                                           cfg.grad_clip)
        state.opt_g.step()
        state.opt_h.step()
    finally:
        D.requires_grad_(True)

    bundle.adv_d = float(loss_d.detach())
    state.step += 1
    return state, bundle


# --------------------------------------------------------------------------
# fit


class _Domain:
    """Decoded images of one domain, from paths (decoded once) or arrays."""

    def __init__(self, items):
        self.items = list(items)
        self._cache = {}

    def __len__(self):
        return len(self.items)

    def get(self, i):
        item = self.items[i]
        if isinstance(item, (str, Path)):
            if i not in self._cache:
                self._cache[i] = load_image(item)
            return self._cache[i], str(item)
        return np.asarray(item), f"image[{i}]"


def _domains(data):
    if isinstance(data, UnpairedDataset):
        return _Domain(data.hazy_paths), _Domain(data.clean_paths)
    hazy, clean = data
    return _Domain(hazy), _Domain(clean)


def _batch(domain, idx, config, rng):
    tensors = []
    for i in idx:
        img, name = domain.get(int(i))
        tensors.append(image_to_tensor(preprocess(img, config.crop_size, True, rng, name)))
    return torch.cat(tensors)


def run_epoch(state: TrainState, hazy: _Domain, clean: _Domain,
              on_step: Optional[Callable[[TrainState, LossBundle], None]] = None):
    """One pass over the smaller domain; the other domain is sampled with replacement."""
    cfg = state.config
    rng = state.rng
    hazy_small = len(hazy) <= len(clean)
    small, other = (hazy, clean) if hazy_small else (clean, hazy)
    order = rng.permutation(len(small))
    for start in range(0, len(order), cfg.batch_size):
        idx_small = order[start:start + cfg.batch_size]
        idx_other = rng.integers(0, len(other), size=len(idx_small))
        idx_h, idx_c = (idx_small, idx_other) if hazy_small else (idx_other, idx_small)
        x = _batch(hazy, idx_h, cfg, rng)
        y = _batch(clean, idx_c, cfg, rng)
        neg = None
        if cfg.variant.use_scp and cfg.scp_negative == "random":
            neg = _batch(hazy, rng.integers(0, len(hazy), size=len(idx_h)), cfg, rng)
        _, bundle = train_step(x, y, state, hazy_neg=neg)
        if on_step is not None:
            on_step(state, bundle)


def _format(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


class LossLog:
    """Per-step CSV loss log."""

    def __init__(self, path, resume_step: Optional[int] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_step is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["step"]) <= resume_step]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in kept:
                w.writerow([r[c] for c in LOG_COLUMNS])

    def append(self, state: TrainState, bundle: LossBundle):
        row = {"step": state.step, "epoch": state.epoch + 1, "lr": state.lr, **bundle.as_dict()}
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_format(row[c]) for c in LOG_COLUMNS])


def read_loss_log(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def fit(config: TrainConfig, data, out_dir=None, resume_from=None,
        state: Optional[TrainState] = None,
        on_step: Optional[Callable[[TrainState, LossBundle], None]] = None) -> dict:
    """Train for ``config.epochs`` epochs and return the final checkpoint dict.

    ``data`` is an :class:`UnpairedDataset` or a ``(hazy_images, clean_images)``
    pair of sequences of ``H x W x 3`` arrays in [0, 1]. With ``out_dir`` set,
    ``epoch_NNN.ckpt`` is written every ``checkpoint_every`` epochs, plus
    ``final.ckpt`` and the per-step ``losses.csv``.
    """
    hazy, clean = _domains(data)
    if len(hazy) == 0 or len(clean) == 0:
        raise InputError("both domains must contain at least one image")
    if state is None:
        state = TrainState(config)
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        state.load_state_dict(ckpt)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = LossLog(out_dir / "losses.csv", resume_step=state.step if resume_from is not None else None)

    def _on_step(s, b):
        if log is not None:
            log.append(s, b)
        if on_step is not None:
            on_step(s, b)

    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        state.set_lr(lr_schedule(epoch, config))
        run_epoch(state, hazy, clean, _on_step)
        state.epoch = epoch
        logger.info("epoch %d/%d done (step %d)", epoch, config.epochs, state.step)
        if out_dir is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            save_checkpoint(state.state_dict(), out_dir / f"epoch_{epoch:03d}.ckpt")
    final = state.state_dict()
    if out_dir is not None:
        save_checkpoint(final, out_dir / "final.ckpt")
    return final


def load_generator(checkpoint) -> Generator:
    """Rebuild the generator stored in a checkpoint (file path or dict), in eval mode."""
    state = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    config = TrainConfig.from_dict(state["config"])
    with torch.random.fork_rng(devices=[]):
        G = Generator(config.generator_config())
    G.load_state_dict(state["generator"])
    return G.eval()
