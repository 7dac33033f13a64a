"""Synthetic blastocyst-like segmentation data, client partitioning and label corruption.

Each sample is a noisy ellipse: an outer ring (ZP) around a second ring (TE)
enclosing a cavity (BL) with a blob (ICM) attached to the inner ring wall,
on background. Classes::

    0 background, 1 ZP, 2 TE, 3 ICM, 4 BL
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError

CLASS_NAMES = ("background", "ZP", "TE", "ICM", "BL")
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND = (1, 2, 3, 4)
# inner structures win where dilated segments overlap
DEFAULT_PRECEDENCE = (3, 2, 1, 4)

REFERENCE_COUNTS = (210, 120, 85, 180, 120)
DESK_COUNTS = (42, 24, 17, 36, 24)
VALIDATION_FRACTION = 0.15

# mean intensity per class before blur and noise
_INTENSITY = np.array([0.10, 0.60, 0.85, 0.70, 0.35])


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray       # (H, W) float in [0, 1]
    mask: np.ndarray        # (H, W) uint8 class ids
    sample_id: int = -1

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D grids")
        if self.mask.size and self.mask.max() >= NUM_CLASSES:
            raise DataError(f"mask class id {self.mask.max()} out of range")


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: tuple[SegSample, ...]
    validation: tuple[SegSample, ...]
    corrupted: bool = False

    @property
    def train_count(self) -> int:
        return len(self.train)

    @property
    def validation_count(self) -> int:
        return len(self.validation)


@dataclass(frozen=True)
class CorruptionSpec:
    radius: int = 3
    precedence: tuple[int, ...] = DEFAULT_PRECEDENCE
    classes: tuple[int, ...] = FOREGROUND   # which classes get dilated

    def __post_init__(self):
        if int(self.radius) < 1:
            raise ConfigurationError(f"corruption radius must be >= 1, got {self.radius}")
        if sorted(self.precedence) != sorted(FOREGROUND):
            raise ConfigurationError(f"precedence must order classes {FOREGROUND}, got {self.precedence}")
        if not set(self.classes) <= set(FOREGROUND):
            raise ConfigurationError(f"only foreground classes can be dilated, got {self.classes}")


def stack(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    """Images as an (N, 1, H, W) batch and masks as (N, H, W) int64."""
    if not samples:
        raise DataError("cannot stack an empty sample list")
    images = np.stack([s.image for s in samples])[:, None].astype(np.float64)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


# ---------------------------------------------------------------------------
# generation


def _draw_mask(rng: np.random.Generator, h: int, w: int, jitter: float) -> np.ndarray:
    s = min(h, w) / 32.0
    cy = (h - 1) / 2 + rng.uniform(-1.5, 1.5) * s
    cx = (w - 1) / 2 + rng.uniform(-1.5, 1.5) * s
    a = rng.uniform(12.0, 14.5) * s * jitter
    b = a * rng.uniform(0.82, 1.0)
    theta = rng.uniform(0, math.pi)
    zp = rng.uniform(2.2, 3.2) * s
    te = rng.uniform(1.8, 2.6) * s
    icm_r = rng.uniform(3.0, 4.2) * s
    icm_angle = rng.uniform(0, 2 * math.pi)
    harmonics = [(k, rng.uniform(0, 0.04), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4)]

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    phi = np.arctan2(v / b, u / a)
    wobble = 1.0 + sum(amp * np.sin(k * phi + ph) for k, amp, ph in harmonics)
    # radial position scaled so the outer boundary sits at distance a
    dist = np.sqrt((u / a) ** 2 + (v / b) ** 2) / wobble * a

    mask = np.zeros((h, w), dtype=np.uint8)
    inner_te = a - zp - te
    mask[dist <= a] = 1
    mask[dist <= a - zp] = 2
    mask[dist <= inner_te] = 4
    # ICM blob pressed against the inner wall of TE
    rc = max(inner_te - 0.8 * icm_r, 0.0)
    ic_u, ic_v = rc * math.cos(icm_angle), rc * math.sin(icm_angle) * (b / a)
    blob = (u - ic_u) ** 2 + (v - ic_v) ** 2 <= icm_r ** 2
    mask[blob & (mask == 4)] = 3
    return mask


def _render(rng: np.random.Generator, mask: np.ndarray, noise: float) -> np.ndarray:
    base = _INTENSITY[mask]
    base = ndimage.gaussian_filter(base, sigma=0.8, mode="nearest")
    shading = ndimage.gaussian_filter(rng.normal(0.0, 1.0, mask.shape), sigma=4.0, mode="wrap")
    shading *= 0.05 / max(shading.std(), 1e-12)
    image = base + shading + rng.normal(0.0, noise, mask.shape)
    return np.clip(image, 0.0, 1.0)


def generate_synthetic(seed: int, count: int, size: tuple[int, int] = (32, 32),
                       noise: float = 0.08, min_share: float = 0.01,
                       max_retries: int = 20) -> list[SegSample]:
    """Deterministic synthetic samples; sample ``i`` depends only on ``(seed, i)``.

    Every mask contains all five classes with at least ``min_share`` of the
    pixels each; geometry that violates this is redrawn with jittered radii.
    """
    h, w = size
    if h < 16 or w < 16:
        raise ConfigurationError(f"image size must be at least 16x16, got {h}x{w}")
    if count < 0:
        raise ConfigurationError("count must be non-negative")
    need = math.ceil(min_share * h * w)
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        for attempt in range(max_retries):
            jitter = 1.0 if attempt == 0 else rng.uniform(0.9, 1.1)
            mask = _draw_mask(rng, h, w, jitter)
            if np.bincount(mask.ravel(), minlength=NUM_CLASSES).min() >= need:
                break
        else:
            raise DataError(f"sample {i}: degenerate geometry after {max_retries} attempts")
        samples.append(SegSample(_render(rng, mask, noise), mask, i))
    return samples


# ---------------------------------------------------------------------------
# partitioning


def split_counts(count: int, fraction: float = VALIDATION_FRACTION) -> tuple[int, int]:
    """``(train, validation)`` with ``validation = floor(fraction * count)``."""
    val = math.floor(fraction * count + 1e-9)
    return count - val, val


def partition_clients(samples: Sequence[SegSample], counts: Sequence[int], seed: int,
                      fraction: float = VALIDATION_FRACTION):
    """Disjoint client assignment; returns ``(clients, test_samples)``.

    Samples are shuffled with ``seed`` and handed out in order. Leftovers form
    the test set.
    """
    counts = [int(c) for c in counts]
    if not counts or any(split_counts(c, fraction)[1] < 1 or c < 2 for c in counts):
        raise ConfigurationError(
            f"every client needs at least one training and one validation sample, got {counts}")
    if sum(counts) > len(samples):
        raise ConfigurationError(f"client counts total {sum(counts)} exceeds the {len(samples)} samples")
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(samples))
    clients, pos = [], 0
    for cid, c in enumerate(counts):
        chunk = [samples[j] for j in order[pos:pos + c]]
        pos += c
        n_train, _ = split_counts(c, fraction)
        clients.append(ClientDataset(cid, tuple(chunk[:n_train]), tuple(chunk[n_train:])))
    test = [samples[j] for j in order[pos:]]
    return clients, test


# ---------------------------------------------------------------------------
# corruption


def disk(radius: int) -> np.ndarray:
    """Boolean structuring element ``{(dy, dx): dy^2 + dx^2 <= r^2}``."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy ** 2 + xx ** 2 <= r * r


def corrupt_mask(mask: np.ndarray, spec: CorruptionSpec = CorruptionSpec()) -> np.ndarray:
    """Dilate each foreground segment by a disk; overlaps go to the higher-precedence class.

    Classes left out of ``spec.classes`` claim only their original pixels.
    Background is never grown.
    """
    mask = np.asarray(mask)
    out = mask.copy()
    se = disk(spec.radius)
    for c in reversed(spec.precedence):
        region = mask == c
        if not region.any():
            continue
        if c in spec.classes:
            region = ndimage.binary_dilation(region, structure=se)
        out[region] = c
    return out


def corrupt_client(client: ClientDataset, spec: CorruptionSpec) -> ClientDataset:
    """Corrupt every training and validation mask of ``client``."""
    def fix(samples):
        return tuple(replace(s, mask=corrupt_mask(s.mask, spec)) for s in samples)
    return replace(client, train=fix(client.train), validation=fix(client.validation), corrupted=True)


def corruption_order(counts: Sequence[int], seed: int) -> list[int]:
    """Client ids, largest clients first; equal sizes ordered by ``seed``."""
    tie = np.random.default_rng([seed, 0xC0]).permutation(len(counts))
    return sorted(range(len(counts)), key=lambda i: (-counts[i], tie[i]))


# ---------------------------------------------------------------------------
# export / import

_MAGIC = b"SEGR"
_HEADER = struct.Struct("<4sIIII")   # magic, version, sample id, H, W


def _write_sample(path: Path, s: SegSample) -> None:
    h, w = s.mask.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, s.sample_id, h, w))
        fh.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())


def _read_sample(path: Path) -> SegSample:
    blob = path.read_bytes()
    magic, version, sid, h, w = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != 1:
        raise DataError(f"{path}: not a sample record")
    off = _HEADER.size
    if len(blob) != off + 9 * h * w:
        raise DataError(f"{path}: size {len(blob)} does not match a {h}x{w} record")
    image = np.frombuffer(blob, dtype="<f8", count=h * w, offset=off).reshape(h, w).astype(np.float64)
    mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off + 8 * h * w).reshape(h, w).copy()
    return SegSample(image, mask, sid)


def export_dataset(directory, clients: Sequence[ClientDataset], test: Sequence[SegSample],
                   metadata: dict | None = None) -> Path:
    """Write per-sample records plus ``manifest.json`` describing the split."""
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    manifest = {"metadata": metadata or {}, "clients": [], "test": []}

    def dump(samples, tag):
        names = []
        for s in samples:
            name = f"{tag}-{s.sample_id:06d}.bin"
            _write_sample(root / "samples" / name, s)
            names.append(name)
        return names

    for c in clients:
        manifest["clients"].append({
            "client_id": c.client_id,
            "corrupted": c.corrupted,
            "train": dump(c.train, f"c{c.client_id}"),
            "validation": dump(c.validation, f"c{c.client_id}"),
        })
    manifest["test"] = dump(test, "test")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def import_dataset(directory):
    """Inverse of :func:`export_dataset`; returns ``(clients, test, metadata)``."""
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    load = lambda names: tuple(_read_sample(root / "samples" / n) for n in names)
    clients = [ClientDataset(c["client_id"], load(c["train"]), load(c["validation"]), c["corrupted"])
               for c in manifest["clients"]]
    return clients, list(load(manifest["test"])), manifest.get("metadata", {})
