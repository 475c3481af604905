"""Dataset ingestion: IDX files, CSV point clouds and synthetic generators."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class DatasetHandle:
    x_train: np.ndarray
    y_train: np.ndarray
    x_dev: np.ndarray
    y_dev: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])


def carve_dev(x: np.ndarray, y: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
              fraction: float = 0.1, seed: int = 0, n_classes: int | None = None) -> DatasetHandle:
    """Hold out ``fraction`` of the training split as a development set."""
    order = np.random.default_rng(seed).permutation(len(x))
    n_dev = int(round(len(x) * fraction))
    dev, train = order[:n_dev], order[n_dev:]
    if n_classes is None:
        n_classes = int(max(y.max(), y_test.max())) + 1
    return DatasetHandle(x[train], y[train], x[dev], y[dev], x_test, y_test, n_classes)


# -- IDX -------------------------------------------------------------------------

def _read_header(blob: bytes, magic: int, what: str) -> tuple[list[int], int]:
    if len(blob) < 4:
        raise FormatError(f"{what} file truncated before the magic number", len(blob))
    found = struct.unpack_from(">I", blob, 0)[0]
    if found != magic:
        raise FormatError(f"bad {what} magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(blob) < end:
        raise FormatError(f"{what} header truncated", len(blob))
    return list(struct.unpack_from(f">{ndim}I", blob, 4)), end


def read_idx_images(path: str | Path) -> np.ndarray:
    """``(n, 1, rows, cols)`` float64 images scaled to [0, 1]."""
    blob = Path(path).read_bytes()
    (n, rows, cols), start = _read_header(blob, IMAGE_MAGIC, "image")
    need = start + n * rows * cols
    if len(blob) < need:
        raise FormatError(f"image data truncated: need {need} bytes, file has {len(blob)}", len(blob))
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * rows * cols, offset=start)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (n,), start = _read_header(blob, LABEL_MAGIC, "label")
    if len(blob) < start + n:
        raise FormatError(f"label data truncated: need {start + n} bytes, file has {len(blob)}", len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=start).astype(np.int64)


def load_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if len(x) != len(y):
        raise FormatError(f"{len(x)} images but {len(y)} labels", 4)
    return x, y


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


# -- CSV -------------------------------------------------------------------------

def write_csv(path: str | Path, x: np.ndarray, y: np.ndarray) -> None:
    x = np.asarray(x).reshape(len(x), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
            raise FormatError(f"{path}: expected header x0,...,xk,label")
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return data[:, :-1], data[:, -1].astype(np.int64)


def load_directory(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Test split of a data directory: ``test.csv`` or MNIST-style IDX files."""
    path = Path(path)
    if (path / "test.csv").exists():
        return read_csv(path / "test.csv")
    for images, labels in (("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                           ("test-images.idx", "test-labels.idx")):
        if (path / images).exists():
            return load_idx(path / images, path / labels)
    raise FileNotFoundError(f"{path}: no test.csv or IDX test files found")


def load_training_directory(path: str | Path, seed: int = 0) -> DatasetHandle:
    path = Path(path)
    if (path / "train.csv").exists():
        x, y = read_csv(path / "train.csv")
    else:
        x, y = load_idx(path / "train-images-idx3-ubyte", path / "train-labels-idx1-ubyte")
    xt, yt = load_directory(path)
    return carve_dev(x, y, xt, yt, seed=seed)


# -- synthetic -----------------------------------------------------------------------

def _to_unit(points: np.ndarray, bound: float) -> np.ndarray:
    return np.clip((points + bound) / (2 * bound), 0.0, 1.0)


def _spirals(classes: int, n: int, rng: np.random.Generator, noise: float, turns: float = 1.0):
    labels = np.arange(n) % classes
    t = rng.uniform(0.0, 1.0, n)
    radius = 0.15 + 0.85 * t
    angle = 2 * np.pi * labels / classes + 2 * np.pi * turns * t + rng.normal(0.0, noise, n)
    points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return _to_unit(points, 1.0 + 3 * noise), labels


def _gaussians(classes: int, n: int, rng: np.random.Generator, separation: float, dim: int = 2):
    labels = np.arange(n) % classes
    angles = 2 * np.pi * np.arange(classes) / classes
    centres = np.zeros((classes, dim))
    centres[:, 0], centres[:, 1] = separation * np.cos(angles), separation * np.sin(angles)
    points = centres[labels] + rng.normal(0.0, 1.0, (n, dim))
    return _to_unit(points, separation + 4.0), labels


def make_synthetic(kind: str, classes: int, n: int, seed: int = 0, noise: float = 0.1,
                   separation: float = 8.0, test_fraction: float = 0.25) -> DatasetHandle:
    """Deterministic 2-D point clouds mapped into [0, 1]^2.

    ``spirals`` draws ``classes`` interleaved arms with angular ``noise``;
    ``gaussians`` places unit-variance blobs on a circle of radius ``separation``.
    Labels cycle through the classes, so every class count is within one.
    """
    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    rng = np.random.default_rng(seed)
    if kind == "spirals":
        x, y = _spirals(classes, n, rng, noise)
    elif kind == "gaussians":
        x, y = _gaussians(classes, n, rng, separation)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return carve_dev(x[train], y[train], x[test], y[test], seed=seed, n_classes=classes)


# -- task streams -----------------------------------------------------------------

@dataclass
class Task:
    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_dev: np.ndarray
    y_dev: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def split_tasks(ds: DatasetHandle, n_tasks: int) -> list[Task]:
    """Consecutive class groups of size c/M, labels remapped to 0..c/M-1 within each task."""
    if n_tasks < 1 or ds.n_classes % n_tasks:
        raise ValueError(f"{ds.n_classes} classes cannot be split into {n_tasks} equal tasks")
    per = ds.n_classes // n_tasks
    tasks = []
    for t in range(n_tasks):
        classes = tuple(range(t * per, (t + 1) * per))

        def part(x, y):
            keep = (y >= classes[0]) & (y <= classes[-1])
            return x[keep], y[keep] - classes[0]

        tasks.append(Task(classes, *part(ds.x_train, ds.y_train), *part(ds.x_dev, ds.y_dev),
                          *part(ds.x_test, ds.y_test)))
    return tasks
