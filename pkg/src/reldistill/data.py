"""Dataset ingestion, category splits, rotation augmentation, synthetic data.

Images are float32 arrays in [0, 1], channels-last (N, H, W, C). Rotations
are counterclockwise multiples of 90 degrees; the convention only has to be
consistent because rotation labels are self-generated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")

# packed binary layout: little-endian u32 header (count, H, W, channels),
# count*H*W*channels float32 pixels, then count int32 labels
_HEADER = struct.Struct("<4I")


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C, float32 in [0, 1]
    labels: np.ndarray  # N, int64 category ids
    category_names: list[str]
    split_assignment: dict[int, str]  # category id -> "train" | "val" | "test"

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    def categories_in_split(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")
        return sorted(c for c, s in self.split_assignment.items() if s == split)

    def indices_of(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.labels == category)

    def validate(self, min_per_category: int = 1) -> None:
        if self.images.ndim != 4:
            raise DataError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        present = set(np.unique(self.labels).tolist())
        missing = present - set(self.split_assignment)
        if missing:
            raise DataError(f"labels without split assignment: {sorted(missing)}")
        bad = {c: s for c, s in self.split_assignment.items() if s not in SPLITS}
        if bad:
            raise DataError(f"invalid split names: {bad}")
        for cat in sorted(present):
            n = int(np.sum(self.labels == cat))
            if n < min_per_category:
                name = self.category_names[cat] if cat < len(self.category_names) else str(cat)
                raise DataError(
                    f"category {name!r} (id {cat}) has {n} images, need >= {min_per_category}"
                )


@dataclass
class RotationBatch:
    images: np.ndarray  # 4*N_b x H x W x C, ordered [all 0, all 90, all 180, all 270]
    category_labels: np.ndarray  # 4*N_b
    rotation_labels: np.ndarray  # 4*N_b, k means k*90 degrees counterclockwise


def augment_rotations(batch_images: np.ndarray, batch_labels: np.ndarray) -> RotationBatch:
    """Expand a batch with its 90/180/270-degree counterclockwise rotations."""
    if batch_images.ndim != 4:
        raise DataError(f"expected N x H x W x C batch, got shape {batch_images.shape}")
    n, h, w, _ = batch_images.shape
    if h != w:
        raise DataError(f"rotation augmentation needs square images, got {h}x{w}")
    rotated = [np.rot90(batch_images, k, axes=(1, 2)) for k in range(4)]
    images = np.ascontiguousarray(np.concatenate(rotated, axis=0))
    category_labels = np.tile(np.asarray(batch_labels, dtype=np.int64), 4)
    rotation_labels = np.repeat(np.arange(4, dtype=np.int64), n)
    return RotationBatch(images, category_labels, rotation_labels)


def make_synthetic(
    n_categories: int,
    per_category: int,
    image_size: int,
    noise_sigma: float,
    seed: int,
    channels: int = 1,
) -> Dataset:
    """Generate a desk-scale dataset of noisy per-category templates.

    Each category gets a deterministic low-frequency template (a seeded 4x4
    pattern upsampled to the target size); images are the template plus
    Gaussian pixel noise, clipped to [0, 1]. The same seed reproduces the
    dataset bit-exactly. All categories start assigned to the train split.
    """
    if n_categories < 2:
        raise ConfigError(f"n_categories must be >= 2, got {n_categories}")
    if per_category < 2:
        raise ConfigError(f"per_category must be >= 2, got {per_category}")
    if image_size < 4:
        raise ConfigError(f"image_size must be >= 4, got {image_size}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = np.random.default_rng(seed)
    up = -(-image_size // 4)  # ceil division
    images = np.empty((n_categories * per_category, image_size, image_size, channels), np.float32)
    labels = np.empty(n_categories * per_category, np.int64)
    row = 0
    for cat in range(n_categories):
        low = rng.uniform(0.0, 1.0, size=(4, 4, channels))
        template = np.repeat(np.repeat(low, up, axis=0), up, axis=1)[:image_size, :image_size]
        for _ in range(per_category):
            noise = noise_sigma * rng.standard_normal(template.shape)
            images[row] = np.clip(template + noise, 0.0, 1.0)
            labels[row] = cat
            row += 1
    names = [f"synthetic_{c:03d}" for c in range(n_categories)]
    dataset = Dataset(images, labels, names, {c: "train" for c in range(n_categories)})
    dataset.validate()
    return dataset


def split_categories(dataset: Dataset, n_train: int, n_val: int, n_test: int, seed: int) -> Dataset:
    """Reassign categories to train/val/test by a seeded shuffle.

    Category ids are shuffled once, then assigned contiguously, so the three
    sets are disjoint by construction.
    """
    total = dataset.n_categories
    if n_train + n_val + n_test != total:
        raise ConfigError(
            f"split sizes {n_train}+{n_val}+{n_test} do not sum to {total} categories"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    assignment: dict[int, str] = {}
    for pos, cat in enumerate(order.tolist()):
        if pos < n_train:
            assignment[cat] = "train"
        elif pos < n_train + n_val:
            assignment[cat] = "val"
        else:
            assignment[cat] = "test"
    return replace(dataset, split_assignment=assignment)


def load_dataset(root_path: str | Path, format: str, min_per_category: int = 1) -> Dataset:
    """Load a dataset from disk; everything starts in the train split.

    ``class_folders`` expects one subdirectory per category containing image
    files; ``packed_binary`` expects the little-endian header + float payload
    layout written by :func:`write_packed`. Ordering is deterministic
    (lexicographic folder/file names, or record order).
    """
    path = Path(root_path)
    if not path.exists():
        raise DataError(f"dataset path does not exist: {path}")
    if format == "class_folders":
        dataset = _load_class_folders(path)
    elif format == "packed_binary":
        dataset = _load_packed(path)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    dataset.validate(min_per_category=min_per_category)
    return dataset


def _load_class_folders(root: Path) -> Dataset:
    from PIL import Image, UnidentifiedImageError

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class folders under {root}")
    images: list[np.ndarray] = []
    labels: list[int] = []
    names: list[str] = []
    shape: tuple[int, ...] | None = None
    for cat, class_dir in enumerate(class_dirs):
        names.append(class_dir.name)
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        if not files:
            raise DataError(f"category {class_dir.name!r} has no images")
        for file in files:
            try:
                with Image.open(file) as img:
                    arr = np.asarray(img, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise DataError(f"unreadable image {file}: {exc}") from exc
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DataError(
                    f"image {file} has shape {arr.shape}, expected {shape}"
                )
            images.append(arr)
            labels.append(cat)
    return Dataset(
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        names,
        {c: "train" for c in range(len(names))},
    )


def _load_packed(path: Path) -> Dataset:
    if path.is_dir():
        raise DataError(f"packed_binary path is a directory: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"packed file {path} too short for header")
    count, h, w, c = _HEADER.unpack_from(raw)
    pixel_bytes = count * h * w * c * 4
    expected = _HEADER.size + pixel_bytes + count * 4
    if len(raw) != expected:
        raise DataError(
            f"packed file {path} has {len(raw)} bytes, header implies {expected}"
        )
    images = np.frombuffer(raw, np.dtype("<f4"), count * h * w * c, _HEADER.size)
    images = images.reshape(count, h, w, c).astype(np.float32)
    labels = np.frombuffer(raw, np.dtype("<i4"), count, _HEADER.size + pixel_bytes)
    labels = labels.astype(np.int64)
    n_cat = int(labels.max()) + 1 if count else 0
    names = [f"class_{i:03d}" for i in range(n_cat)]
    return Dataset(images, labels, names, {i: "train" for i in range(n_cat)})


def write_packed(dataset: Dataset, path: str | Path) -> Path:
    """Persist a dataset in the packed binary layout (splits are not stored)."""
    path = Path(path)
    n, h, w, c = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(n, h, w, c))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    return path
