"""Unpaired image ingestion, preprocessing and checkpoint persistence."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np
import torch

from .errors import ConfigError, DimensionError, InputError, IntegrityError, VersionError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

CHECKPOINT_MAGIC = b"UCLDHZCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")


@dataclass
class UnpairedDataset:
    hazy_paths: List[Path]
    clean_paths: List[Path]
    crop_size: int = 256
    augment: bool = True

    def __post_init__(self):
        if not self.hazy_paths:
            raise InputError("hazy domain is empty")
        if not self.clean_paths:
            raise InputError("clean domain is empty")


def _list_images(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    images = []
    for p in sorted(directory.iterdir()):
        if not p.is_file():
            continue
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            images.append(p)
        else:
            warnings.warn(f"skipping non-image file {p}", stacklevel=3)
    return images


def scan_unpaired(hazy_dir, clean_dir, crop_size: int = 256, augment: bool = True) -> UnpairedDataset:
    """List both domains in sorted order; non-image files are skipped with a warning."""
    hazy = _list_images(hazy_dir)
    clean = _list_images(clean_dir)
    if not hazy:
        raise InputError(f"no images found in hazy directory {hazy_dir}")
    if not clean:
        raise InputError(f"no images found in clean directory {clean_dir}")
    return UnpairedDataset(hazy, clean, crop_size, augment)


def load_image(path) -> np.ndarray:
    """Decode an 8- or 16-bit image to an ``H x W x 3`` float64 array in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise InputError(f"unsupported pixel type {raw.dtype} in {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
    else:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return raw.astype(np.float64) / peak


def save_image(path, img: np.ndarray):
    """Write an ``H x W x 3`` image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise InputError(f"cannot write image {path}")


def to_network_range(img):
    return img * 2.0 - 1.0


def from_network_range(img):
    return (img + 1.0) / 2.0


def preprocess(img: np.ndarray, crop_size: int = 256, augment: bool = True,
               rng: Optional[np.random.Generator] = None, name: str = "<array>") -> np.ndarray:
    """Crop (random when ``augment``, else centred), optionally flip, map to [-1, 1].

    ``img`` is ``H x W x 3`` in [0, 1]. Images smaller than ``crop_size`` are
    upscaled bilinearly first.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"{name}: expected an H x W x 3 image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise InputError(f"{name}: image contains non-finite values")
    h, w = img.shape[:2]
    if h < crop_size or w < crop_size:
        warnings.warn(f"{name}: {h}x{w} is smaller than crop {crop_size}; upscaling", stacklevel=2)
        scale = crop_size / min(h, w)
        nh, nw = max(crop_size, round(h * scale)), max(crop_size, round(w * scale))
        img = cv2.resize(img.astype(np.float64), (nw, nh), interpolation=cv2.INTER_LINEAR)
        h, w = nh, nw
    if augment:
        if rng is None:
            rng = np.random.default_rng()
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
    else:
        top, left = (h - crop_size) // 2, (w - crop_size) // 2
    out = img[top:top + crop_size, left:left + crop_size]
    if augment and rng.random() < 0.5:
        out = out[:, ::-1]
    out = np.clip(to_network_range(out.astype(np.float32)), -1.0, 1.0)
    return np.ascontiguousarray(out)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """``H x W x 3`` array to a ``1 x 3 x H x W`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()[0].transpose(1, 2, 0)


# --------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(state: dict, path) -> Path:
    """Write ``state`` as a versioned, hashed binary file plus a JSON config sidecar.

    ``state`` is a nested dict of tensors, numbers, strings and lists; the
    ``"config"`` entry (if any) is also written to ``<path>.json``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({"format_version": CHECKPOINT_VERSION, **state}, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, digest, len(payload))
    _atomic_write(path, header + payload)
    if "config" in state:
        sidecar = {"format_version": CHECKPOINT_VERSION, "sha256": digest.hex(),
                   "epoch": state.get("epoch"), "step": state.get("step"),
                   "config": state["config"]}
        _atomic_write(path.with_name(path.name + ".json"),
                      json.dumps(sidecar, indent=2, sort_keys=True, default=str).encode())
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise IntegrityError(f"{path}: file too short to be a checkpoint")
    magic, version, digest, length = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    payload = data[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checkpoint payload is truncated or corrupted")
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    state.pop("format_version", None)
    return state
