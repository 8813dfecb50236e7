"""Dataset loading: MNIST IDX files, image folders and synthetic blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataError, TruncatedFileError
from .numeric import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1] with integer labels.

    ``label_names[i]``, when set, is the original label behind contiguous
    label ``i`` (filled in by :func:`split_old_new`).
    """

    images: np.ndarray
    labels: np.ndarray
    label_names: list | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def class_ids(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.label_names)

    def original_labels(self) -> np.ndarray:
        if self.label_names is None:
            return self.labels.copy()
        return np.asarray(self.label_names)[self.labels]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an array of its declared shape."""
    if len(raw) < 4:
        raise TruncatedFileError("file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError("file ends inside the IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"IDX payload has {len(raw) - header} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an MNIST image/label IDX pair (optionally gzipped).

    Pixels are scaled by 1/255 into [0, 1]; images come back as (N, 1, 28, 28).
    """
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images[:, None, :, :] / 255.0, labels.astype(np.int64))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).is_file():
            return directory / name
    raise DataError(f"{stem}[.gz] not found in {directory}")


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    """Load the standard four MNIST files from one directory as (train, test)."""
    d = Path(directory)
    train = load_mnist_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    test = load_mnist_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    return train, test


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_old_new(train: Dataset, test: Dataset, held_out) -> tuple[Dataset, Dataset, Dataset]:
    """Separate old classes (for primary training) from held-out new classes.

    Returns ``(old_train, old_test, new_pool)``. Old labels are remapped to
    contiguous ``0..k-1``, with the originals in ``label_names``. The new
    pool is drawn from ``test`` and keeps its original labels.
    """
    held = sorted({int(c) for c in held_out})
    known = set(train.class_ids) | set(test.class_ids)
    unknown = [c for c in held if c not in known]
    if unknown:
        raise DataError(f"unknown class ids {unknown}")
    old = sorted(c for c in train.class_ids if c not in held)
    remap = {c: i for i, c in enumerate(old)}

    def _old(ds):
        keep = np.flatnonzero(~np.isin(ds.labels, held))
        labels = np.array([remap[int(c)] for c in ds.labels[keep]], dtype=np.int64)
        return Dataset(ds.images[keep], labels, list(old))

    new_idx = np.flatnonzero(np.isin(test.labels, held))
    new_pool = Dataset(test.images[new_idx], test.labels[new_idx])
    return _old(train), _old(test), new_pool


def stratified_subset(ds: Dataset, per_class: int | None = None, total: int | None = None, seed: int = 0) -> Dataset:
    """Deterministic class-balanced subsample (order preserved)."""
    if per_class is None and total is None:
        return ds
    rng = make_rng(seed)
    classes = ds.class_ids
    if per_class is None:
        per_class = total // len(classes)
    keep = []
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)
        keep.extend(rng.permutation(idx)[:per_class])
    return ds.subset(np.sort(np.array(keep, dtype=np.int64)))


# ---------------------------------------------------------------------------
# synthetic and image-folder sources
# ---------------------------------------------------------------------------


def synthetic_dataset(seed: int, classes: int, samples: int, size: int = 28, noise: float = 0.05) -> Dataset:
    """Gaussian class blobs rendered as single-channel ``size`` x ``size`` images.

    Each class gets a random blob centre and width; samples jitter the centre
    and add pixel noise. ``samples`` is the per-class count.
    """
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centres = rng.uniform(0.25 * size, 0.75 * size, (classes, 2))
    widths = rng.uniform(0.08 * size, 0.18 * size, classes)
    images, labels = [], []
    for c in range(classes):
        jitter = rng.normal(0.0, 0.04 * size, (samples, 2))
        for cy, cx in centres[c] + jitter:
            img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * widths[c] ** 2))
            img += rng.normal(0.0, noise, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    order = rng.permutation(len(labels))
    return Dataset(np.array(images)[order][:, None], np.array(labels)[order])


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm"}


def load_image_folder(root, size: int = 28, grayscale: bool = True, rotations: bool = False, class_names=None) -> Dataset:
    """One subdirectory per class; images are resized bilinearly to ``size``.

    With ``rotations`` each image is followed by copies rotated by 90, 180
    and 270 degrees. ``class_names`` fixes the label numbering (labels are
    indices into the sorted union otherwise).
    """
    from PIL import Image

    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"no class subdirectories under {root}")
    names = sorted(class_names) if class_names is not None else [p.name for p in dirs]
    index = {n: i for i, n in enumerate(names)}
    images, labels = [], []
    for d in dirs:
        if d.name not in index:
            raise DataError(f"class directory {d.name!r} not in the class list")
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            img = Image.open(f).convert("L" if grayscale else "RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
            arr = arr[None] if grayscale else arr.transpose(2, 0, 1)
            views = [arr] + ([np.rot90(arr, k, axes=(1, 2)) for k in (1, 2, 3)] if rotations else [])
            images.extend(views)
            labels.extend([index[d.name]] * len(views))
    if not images:
        raise DataError(f"no images found under {root}")
    return Dataset(np.array(images), np.array(labels), None)


def load_source(spec: str, rotations: bool = False) -> tuple[Dataset, Dataset]:
    """Resolve a ``--data`` argument into (train, test) datasets.

    Accepted forms: a directory holding the four MNIST IDX files; a directory
    with ``train/`` and ``test/`` image-folder trees; or
    ``synthetic:<seed>:<classes>:<per_class>``.
    """
    if spec.startswith("synthetic"):
        given = [int(p) for p in spec.split(":")[1:]]
        seed, classes, per_class = (given + [0, 10, 60][len(given):])[:3]
        full = synthetic_dataset(seed, classes, per_class)
        n_test = len(full) // 4
        return full.subset(np.arange(n_test, len(full))), full.subset(np.arange(n_test))
    path = Path(spec)
    if not path.is_dir():
        raise DataError(f"data path {spec!r} does not exist")
    if (path / "train").is_dir() and (path / "test").is_dir():
        names = sorted({p.name for sub in ("train", "test") for p in (path / sub).iterdir() if p.is_dir()})
        train = load_image_folder(path / "train", rotations=rotations, class_names=names)
        test = load_image_folder(path / "test", class_names=names)
        return train, test
    return load_mnist_dir(path)
