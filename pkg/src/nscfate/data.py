"""Dataset ingestion, deterministic stratified splitting, and preprocessing.

A dataset on disk is one subdirectory per class containing image files.
The manifest indexes every file, and splitting assigns each sample to
train/val/test with a documented hash-rank rule, so the assignment is a
pure function of (seed, sample ids, fractions).
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    EmptyClassError,
    InvalidImageError,
    LabelRangeError,
    MissingClassError,
    ShapeError,
    StratificationError,
)
from .seeding import unit_hash

SPLIT_NAMES = ("train", "val", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}


@dataclass(frozen=True)
class LabelTaxonomy:
    """Ordered class labels plus the binary/multiclass mode."""

    mode: str  # "binary" or "multiclass"
    class_names: tuple

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if self.mode not in ("binary", "multiclass"):
            raise ValueError(f"mode must be binary or multiclass, got {self.mode!r}")
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError("class names must be unique and nonempty")
        if self.mode == "binary" and len(names) != 2:
            raise ValueError("binary mode requires exactly 2 classes")
        if self.mode == "multiclass" and len(names) < 3:
            raise ValueError("multiclass mode requires at least 3 classes")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def index_of(self, name: str) -> int:
        return self.class_names.index(name)


@dataclass(frozen=True)
class ImageSample:
    id: str
    source_path: str
    label_index: int
    split: str = "train"


@dataclass
class DatasetManifest:
    taxonomy: LabelTaxonomy
    samples: list
    split_fractions: tuple = (1.0, 0.0, 0.0)
    seed: int = 0
    warnings: list = field(default_factory=list)

    def class_counts(self, split: str | None = None) -> dict:
        counts = {name: 0 for name in self.taxonomy.class_names}
        for s in self.samples:
            if split is None or s.split == split:
                counts[self.taxonomy.class_names[s.label_index]] += 1
        return counts

    def split_samples(self, split: str) -> list:
        return [s for s in self.samples if s.split == split]

    def find(self, sample_id: str):
        for s in self.samples:
            if s.id == sample_id:
                return s
        return None

    def save_csv(self, path):
        """Write the manifest; image paths are stored relative to the CSV when possible."""
        path = Path(path)
        base = path.resolve().parent

        def portable(p):
            try:
                return Path(p).resolve().relative_to(base).as_posix()
            except ValueError:
                return str(p)

        with path.open("w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "path", "class", "label_index", "split"])
            for s in self.samples:
                writer.writerow(
                    [s.id, portable(s.source_path), self.taxonomy.class_names[s.label_index],
                     s.label_index, s.split]
                )

    @classmethod
    def load_csv(cls, path, taxonomy: LabelTaxonomy) -> "DatasetManifest":
        base = Path(path).resolve().parent
        samples = []
        with Path(path).open("r", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                idx = int(row["label_index"])
                if not 0 <= idx < taxonomy.class_count:
                    raise LabelRangeError(f"label_index {idx} out of range for {taxonomy.class_count} classes")
                source = row["path"]
                if not Path(source).is_absolute():
                    source = str(base / source)
                samples.append(ImageSample(row["id"], source, idx, row["split"]))
        return cls(taxonomy=taxonomy, samples=samples)


def load_manifest(root_directory, taxonomy: LabelTaxonomy) -> DatasetManifest:
    """Index a <root>/<class_name>/<file> directory tree into a manifest.

    Every sample starts in the train split; run split_dataset afterwards.
    Undecodable files are collected into a warning record, never silently
    dropped.
    """
    root = Path(root_directory)
    samples = []
    rejected = []
    for label_index, name in enumerate(taxonomy.class_names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise MissingClassError(name)
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        kept = 0
        for path in files:
            try:
                with Image.open(path) as img:
                    img.verify()
            except (UnidentifiedImageError, OSError):
                rejected.append(str(path))
                continue
            samples.append(ImageSample(id=f"{name}/{path.name}", source_path=str(path), label_index=label_index))
            kept += 1
        if kept == 0:
            raise EmptyClassError(name)
    manifest = DatasetManifest(taxonomy=taxonomy, samples=samples)
    if rejected:
        manifest.warnings.append({"rejected_files": rejected})
    return manifest


def _apportion(total: int, fractions) -> list:
    """Largest-remainder apportionment of `total` across the fractions."""
    raw = [f * total for f in fractions]
    base = [math.floor(r) for r in raw]
    shortfall = total - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:shortfall]:
        base[i] += 1
    return base


def split_dataset(manifest: DatasetManifest, fractions, seed: int) -> DatasetManifest:
    """Assign train/val/test splits, stratified per class.

    Rule (replayable by hand): within each class, samples are ranked by
    unit_hash(seed, sample_id) with the id as tie-break; per-split quotas
    come from largest-remainder apportionment of fractions * class_count;
    the ranked list is filled train-first, then val, then test. Identical
    inputs give identical assignments on every platform.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must have 3 entries summing to 1, got {fractions}")
    if not manifest.samples:
        raise ValueError("cannot split an empty manifest")

    nonzero_splits = sum(1 for f in fractions if f > 0)
    by_class = {i: [] for i in range(manifest.taxonomy.class_count)}
    for s in manifest.samples:
        by_class[s.label_index].append(s)

    assignment = {}
    for label_index, class_samples in by_class.items():
        if not class_samples:
            continue
        if len(class_samples) < nonzero_splits:
            raise StratificationError(manifest.taxonomy.class_names[label_index])
        ranked = sorted(class_samples, key=lambda s: (unit_hash(seed, s.id), s.id))
        quotas = _apportion(len(ranked), fractions)
        cursor = 0
        for split_name, quota in zip(SPLIT_NAMES, quotas):
            for s in ranked[cursor : cursor + quota]:
                assignment[s.id] = split_name
            cursor += quota

    new_samples = [replace(s, split=assignment[s.id]) for s in manifest.samples]
    return DatasetManifest(
        taxonomy=manifest.taxonomy,
        samples=new_samples,
        split_fractions=fractions,
        seed=seed,
        warnings=list(manifest.warnings),
    )


@dataclass(frozen=True)
class PreprocessSpec:
    target_height: int = 224
    target_width: int = 224
    channels: int = 3
    normalization: str = "unit_interval"  # or "per_channel_standardize"
    channel_means: tuple = (0.485, 0.456, 0.406)
    channel_stds: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.target_height < 32 or self.target_width < 32:
            raise ValueError("target dimensions must be >= 32 pixels")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.normalization not in ("unit_interval", "per_channel_standardize"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def bilinear_resize(image: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping.

    Resizing to the input's own size is an exact identity, and output
    corner pixels of a 2x upscale coincide with input corners.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    in_h, in_w, _ = img.shape

    ys = np.clip((np.arange(out_height) + 0.5) * in_h / out_height - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_width) + 0.5) * in_w / out_width - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return out[:, :, 0] if squeeze else out


def preprocess_image(raw_pixels: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Resize, adjust channel depth, and normalize one image to model input."""
    raw = np.asarray(raw_pixels, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3 or raw.shape[2] not in (1, 3):
        raise ShapeError(f"expected HxWxC with C in {{1,3}}, got shape {raw.shape}")
    if raw.shape[0] == 0 or raw.shape[1] == 0:
        raise InvalidImageError("zero-area input image")

    out = bilinear_resize(raw, spec.target_height, spec.target_width)
    if spec.channels == 3 and out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    elif spec.channels == 1 and out.shape[2] == 3:
        out = out.mean(axis=2, keepdims=True)

    out = out / 255.0
    if spec.normalization == "per_channel_standardize":
        means = np.asarray(spec.channel_means[: spec.channels])
        stds = np.asarray(spec.channel_stds[: spec.channels])
        out = (out - means) / stds
    if not np.isfinite(out).all():
        raise InvalidImageError("non-finite values after preprocessing")
    return out


def load_image(path) -> np.ndarray:
    """Decode an image file to a HxWxC uint8 array (C = 1 or 3)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_split_arrays(manifest: DatasetManifest, split: str, spec: PreprocessSpec, workers: int = 1):
    """Decode and preprocess one split; returns (X, labels, samples).

    X is N x H x W x C float32 in manifest order. Per-sample work is pure,
    so workers > 1 only changes wall time, never the result.
    """
    samples = manifest.split_samples(split)

    def one(sample):
        return preprocess_image(load_image(sample.source_path), spec).astype(np.float32)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(one, samples))
    else:
        arrays = [one(s) for s in samples]
    if not arrays:
        return (
            np.zeros((0, spec.target_height, spec.target_width, spec.channels), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            samples,
        )
    labels = np.array([s.label_index for s in samples], dtype=np.int64)
    return np.stack(arrays), labels, samples


def encode_labels(samples, taxonomy: LabelTaxonomy) -> np.ndarray:
    """One-hot encode sample labels into an N x class_count matrix."""
    n, k = len(samples), taxonomy.class_count
    out = np.zeros((n, k), dtype=np.float64)
    for i, s in enumerate(samples):
        if not 0 <= s.label_index < k:
            raise LabelRangeError(f"label_index {s.label_index} out of range [0, {k})")
        out[i, s.label_index] = 1.0
    return out
