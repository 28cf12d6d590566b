"""Patch ingestion, manifests, stratified splits and preprocessing.

Dataset root layout::

    <root>/s0/ ... <root>/s23/    training patches, one directory per scan
    <root>/test/                  test patches named s<k>_<i>.<ext>

The manifest file is a CSV with header ``path,scan_id,split``; paths are
stored relative to the directory holding the manifest.
"""

from __future__ import annotations

import csv
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from .errors import IngestionError, PatchLoadError, SplitError

NUM_SCANS = 24
SPLITS = ("train", "val", "test")
COLOR_MODES = ("rgb", "grayscale")
IMAGE_EXTENSIONS = (".tif", ".tiff", ".png", ".jpg", ".jpeg")

# Test patches per scan in the official release (scan 0 first).
OFFICIAL_TEST_COUNTS = (
    65, 65, 65, 75, 15, 40, 70, 50, 60, 60, 70, 70,
    70, 60, 60, 30, 45, 45, 25, 25, 65, 65, 65, 65,
)
OFFICIAL_TRAIN_POOL_SIZE = 23916
OFFICIAL_TEST_SIZE = 1325
OFFICIAL_PATCH_SIZE = 1000

# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_CLASS_DIR_RE = re.compile(r"^s(\d+)$")
_TEST_NAME_RE = re.compile(r"^s(\d+)_(\d+)\.(tif|tiff|png|jpg|jpeg)$", re.IGNORECASE)


def check_scan_id(value, num_classes: int = NUM_SCANS) -> int:
    """Return ``value`` as an int, raising ValueError if it is not a valid scan id."""
    if isinstance(value, (bool, np.bool_)) or int(value) != value:
        raise ValueError(f"scan id must be an integer, got {value!r}")
    value = int(value)
    if not 0 <= value < num_classes:
        raise ValueError(f"scan id {value} outside [0, {num_classes - 1}]")
    return value


@dataclass(frozen=True)
class PatchRecord:
    path: Path
    label: int
    split: str
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        check_scan_id(self.label)
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    records: list
    color_mode: str = "rgb"
    seed: Optional[int] = None
    per_class_test_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.color_mode not in COLOR_MODES:
            raise ValueError(f"unknown color mode {self.color_mode!r}")
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            dupes = [p for p, n in Counter(paths).items() if n > 1]
            raise IngestionError(f"duplicate paths in manifest: {dupes[:5]}")
        if not self.per_class_test_counts:
            self.per_class_test_counts = _count_by_label(self.subset("test"))

    def subset(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict:
        """Nested ``{split: {scan_id: count}}`` over all records."""
        out = {s: {} for s in SPLITS}
        for r in self.records:
            out[r.split][r.label] = out[r.split].get(r.label, 0) + 1
        return out

    def test_count_vector(self, num_classes: int = NUM_SCANS) -> list:
        return [self.per_class_test_counts.get(k, 0) for k in range(num_classes)]


def _count_by_label(records) -> dict:
    return dict(sorted(Counter(r.label for r in records).items()))


def _image_files(directory: Path) -> list:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and not p.name.startswith(".") and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _image_size(path: Path, require_size: Optional[int]):
    try:
        with Image.open(path) as im:
            width, height = im.size
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(f"unreadable image {path}: {exc}") from exc
    if require_size is not None and (width, height) != (require_size, require_size):
        raise IngestionError(
            f"{path} is {width}x{height}, expected {require_size}x{require_size}"
        )
    return width, height


def build_manifest(
    root_dir,
    color_mode: str = "rgb",
    require_size: Optional[int] = None,
) -> DatasetManifest:
    """Walk a dataset tree and return a manifest of every patch.

    Training patches are tagged ``train`` until :func:`stratified_split`
    assigns validation records. Each file's header is opened so unreadable
    images fail here rather than mid-training. Pass ``require_size=1000``
    to enforce the official square patch size.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist or is not a directory")

    records = []
    class_dirs = []
    for child in sorted(root.iterdir()):
        m = _CLASS_DIR_RE.match(child.name)
        if child.is_dir() and m:
            k = int(m.group(1))
            if k >= NUM_SCANS:
                raise IngestionError(f"class directory {child} outside scan range 0..{NUM_SCANS - 1}")
            class_dirs.append((k, child))

    for k, directory in sorted(class_dirs):
        for path in _image_files(directory):
            w, h = _image_size(path, require_size)
            records.append(PatchRecord(path, k, "train", w, h))

    test_dir = root / "test"
    if test_dir.is_dir():
        for path in _image_files(test_dir):
            m = _TEST_NAME_RE.match(path.name)
            if m is None:
                raise IngestionError(f"cannot parse scan id from test file name {path}")
            k = int(m.group(1))
            if k >= NUM_SCANS:
                raise IngestionError(f"test file {path} names scan {k} outside 0..{NUM_SCANS - 1}")
            w, h = _image_size(path, require_size)
            records.append(PatchRecord(path, k, "test", w, h))

    if not records:
        raise IngestionError(f"no patches found under {root}")
    return DatasetManifest(records, color_mode=color_mode)


def stratified_split(manifest: DatasetManifest, val_fraction: float = 0.2, seed: int = 0) -> DatasetManifest:
    """Assign ``floor(val_fraction * n_c)`` records of each class to ``val``.

    Every non-test record is part of the pool, so an already split manifest
    can be re-split. Test records are passed through untouched and the
    record order is preserved.
    """
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val_fraction must be in (0, 1), got {val_fraction}")

    pool = {}
    for i, r in enumerate(manifest.records):
        if r.split != "test":
            pool.setdefault(r.label, []).append(i)
    if not pool:
        raise SplitError("manifest has no training records to split")

    val_index = set()
    for label, indices in sorted(pool.items()):
        if len(indices) < 2:
            raise SplitError(f"scan {label} has {len(indices)} training record(s); cannot stratify")
        n_val = int(np.floor(val_fraction * len(indices)))
        rng = np.random.default_rng([seed, label])
        chosen = rng.permutation(len(indices))[:n_val]
        val_index.update(indices[j] for j in chosen)

    records = []
    for i, r in enumerate(manifest.records):
        if r.split != "test":
            r = replace(r, split="val" if i in val_index else "train")
        records.append(r)
    return DatasetManifest(
        records,
        color_mode=manifest.color_mode,
        seed=seed,
        per_class_test_counts=dict(manifest.per_class_test_counts),
    )


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    base = path.resolve().parent
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "scan_id", "split"])
        for r in manifest.records:
            rel = os.path.relpath(Path(r.path).resolve(), base)
            writer.writerow([Path(rel).as_posix(), r.label, r.split])
    return path


def read_manifest(path, color_mode: str = "rgb") -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} not found")
    base = path.resolve().parent
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["path", "scan_id", "split"]:
            raise IngestionError(f"{path}: expected header path,scan_id,split, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(PatchRecord(Path(os.path.normpath(base / row["path"])), int(row["scan_id"]), row["split"]))
            except (ValueError, TypeError) as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise IngestionError(f"manifest {path} has no records")
    return DatasetManifest(records, color_mode=color_mode)


@dataclass(frozen=True)
class PreprocessConfig:
    color_mode: str = "rgb"
    target_size: int = 224
    channel_mean: tuple = IMAGENET_MEAN
    channel_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.color_mode not in COLOR_MODES:
            raise ValueError(f"unknown color mode {self.color_mode!r}")
        if int(self.target_size) < 32:
            raise ValueError(f"target_size must be >= 32, got {self.target_size}")
        object.__setattr__(self, "target_size", int(self.target_size))
        object.__setattr__(self, "channel_mean", tuple(float(v) for v in self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(float(v) for v in self.channel_std))
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ValueError("channel_mean and channel_std must have 3 components")
        if min(self.channel_std) <= 0:
            raise ValueError("channel_std components must be strictly positive")

    def to_dict(self) -> dict:
        return {
            "color_mode": self.color_mode,
            "target_size": self.target_size,
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
        }


def to_grayscale(image) -> np.ndarray:
    """BT.601 luminance of an ``H x W x 3`` image, shaped ``H x W x 1``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    return (image.astype(np.float64) @ LUMA_WEIGHTS)[..., None]


def replicate_channels(image, channels: int = 3) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[-1] != 1:
        raise ValueError(f"expected a single-channel image, got shape {image.shape}")
    return np.repeat(image, channels, axis=-1)


def preprocess_array(image, config: PreprocessConfig) -> np.ndarray:
    """Color-convert, resize, rescale and normalize an 8-bit ``H x W x 3`` array."""
    x = np.asarray(image, dtype=np.float64)
    if config.color_mode == "grayscale":
        x = replicate_channels(to_grayscale(x))
    t = torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1)[None]
    if t.shape[-2:] != (config.target_size, config.target_size):
        t = F.interpolate(
            t, size=(config.target_size, config.target_size),
            mode="bilinear", align_corners=False, antialias=True,
        )
    x = t[0].permute(1, 2, 0).numpy() / 255.0
    mean = np.asarray(config.channel_mean, dtype=np.float32)
    std = np.asarray(config.channel_std, dtype=np.float32)
    return ((x - mean) / std).astype(np.float32)


def read_image(path) -> np.ndarray:
    """Decode an image file into an 8-bit RGB array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise PatchLoadError(f"cannot decode {path}: {exc}") from exc


def load_patch(record, config: PreprocessConfig) -> np.ndarray:
    """Load one square patch as a normalized ``S x S x 3`` float32 array."""
    path = record.path if isinstance(record, PatchRecord) else Path(record)
    rgb = read_image(path)
    h, w = rgb.shape[:2]
    if h != w:
        raise PatchLoadError(f"{path} is {w}x{h}; non-square images must go through tile_wsi")
    return preprocess_array(rgb, config)


class Tile(NamedTuple):
    x: int
    y: int
    patch: np.ndarray


def tile_grid_shape(height: int, width: int, patch_size: int, stride: int):
    """Rows and columns of full windows on the stride grid."""
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


def tile_wsi(
    image,
    patch_size: int,
    stride: Optional[int] = None,
    exclusion_mask=None,
    mask_threshold: float = 0.0,
    white_threshold: Optional[float] = None,
) -> list:
    """Cut an ``H x W[ x C]`` image into full square windows on a stride grid.

    A window is dropped when the fraction of its area covered by
    ``exclusion_mask`` exceeds ``mask_threshold`` (the default drops any
    overlap), or when its mean intensity exceeds ``white_threshold``.
    Tiles are returned row-major with ``(x, y)`` top-left coordinates.
    """
    image = np.asarray(image)
    stride = patch_size if stride is None else stride
    if stride < 1 or patch_size < 1:
        raise ValueError("patch_size and stride must be >= 1")
    height, width = image.shape[:2]
    if patch_size > height or patch_size > width:
        raise ValueError(f"patch_size {patch_size} exceeds image dimensions {width}x{height}")
    mask = None
    if exclusion_mask is not None:
        mask = np.asarray(exclusion_mask, dtype=bool)
        if mask.shape != (height, width):
            raise ValueError(f"exclusion mask shape {mask.shape} != image shape {(height, width)}")

    area = patch_size * patch_size
    rows, cols = tile_grid_shape(height, width, patch_size, stride)
    tiles = []
    for i in range(rows):
        y = i * stride
        for j in range(cols):
            x = j * stride
            if mask is not None:
                covered = mask[y:y + patch_size, x:x + patch_size].sum() / area
                if covered > mask_threshold:
                    continue
            patch = image[y:y + patch_size, x:x + patch_size]
            if white_threshold is not None and patch.mean() > white_threshold:
                continue
            tiles.append(Tile(x, y, patch))
    return tiles


class PatchDataset(Dataset):
    """Torch dataset yielding ``(C x S x S tensor, label)`` pairs."""

    def __init__(self, records: Sequence[PatchRecord], config: PreprocessConfig):
        self.records = list(records)
        self.config = config

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        r = self.records[idx]
        x = load_patch(r, self.config)
        return torch.from_numpy(x).permute(2, 0, 1).contiguous(), r.label
