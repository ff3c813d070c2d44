"""Datasets: IDX files, synthetic Gaussian blobs and synthetic frame sequences."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Samples with intensities in [0, 1].

    When ``frames`` is set, ``x`` is ``(N, T_frames, ...)`` and each frame feeds
    one timestep instead of repeating a static image.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    frames: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.intp)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("intensities must lie in [0, 1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label outside class range")
        if self.frames and (self.x.ndim < 3 or self.x.shape[1] < 1):
            raise ValueError("frame datasets need shape (N, T_frames, ...)")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self) -> tuple:
        return self.x.shape[2:] if self.frames else self.x.shape[1:]

    @property
    def timesteps(self) -> int | None:
        return self.x.shape[1] if self.frames else None

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.frames)

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        return self.subset(perm[n_test:]), self.subset(perm[:n_test])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        idx = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(self), batch_size):
            j = idx[i : i + batch_size]
            yield self.x[j], self.y[j]


# -- IDX ---------------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse a big-endian unsigned-byte IDX file (any rank)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxFormatError(f"{path}: bad magic {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    elif array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    else:
        raise ValueError("IDX writer supports label vectors and (N, rows, cols) images")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(path_images, path_labels, num_classes: int | None = None) -> Dataset:
    images = read_idx(path_images)
    labels = read_idx(path_labels)
    if images.ndim != 3:
        raise IdxFormatError(f"{path_images}: expected image file (rank 3), got rank {images.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{path_labels}: expected label file (rank 1), got rank {labels.ndim}")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32)[:, None, :, :] / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(x, labels.astype(np.intp), max(k, 2))


# -- synthetic ---------------------------------------------------------------------------


def synth_blobs(n: int, dims: int, classes: int, spread: float, seed: int = 0, center_scale: float = 1.0) -> Dataset:
    """Gaussian clusters around uniform random centres, clipped to the unit cube.

    ``center_scale`` < 1 pulls the centres toward 0.5, making classes overlap more.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = 0.5 + center_scale * (rng.uniform(0.0, 1.0, size=(classes, dims)) - 0.5)
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = centers[y] + spread * rng.standard_normal((n, dims))
    return Dataset(np.clip(x, 0.0, 1.0), y, classes)


def synth_frames(n: int, t_frames: int, dims: int, classes: int, seed: int = 0, spread: float = 0.15) -> Dataset:
    """Event-style sequences: each class has its own per-frame template."""
    if t_frames < 1:
        raise ValueError("t_frames must be >= 1")
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(classes, t_frames, dims))
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = templates[y] + spread * rng.standard_normal((n, t_frames, dims))
    return Dataset(np.clip(x, 0.0, 1.0), y, classes, frames=True)


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Header row, then ``label, f1, f2, ...`` per line with features in [0, 1]."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    y = raw[:, 0].astype(np.intp)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(raw[:, 1:], y, max(k, 2))


def write_csv(path, dataset: Dataset) -> None:
    flat = dataset.x.reshape(len(dataset), -1)
    header = "label," + ",".join(f"f{i}" for i in range(flat.shape[1]))
    np.savetxt(path, np.column_stack([dataset.y, flat]), delimiter=",", header=header, comments="", fmt="%.9g")
