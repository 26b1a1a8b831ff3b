"""Dataset readers (IDX, CIFAR binary), synthetic blobs and task splitting."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_count: int
    image_shape: tuple[int, ...] | None = None

    @property
    def feature_count(self) -> int:
        return self.train_images.shape[1]


@dataclass
class Task:
    classes: tuple[int, ...]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class TaskSequence:
    dataset: Dataset
    tasks: list[Task]

    def __len__(self) -> int:
        return len(self.tasks)

    def class_order(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]

    def first_seen(self) -> dict[int, int]:
        return {c: k for k, t in enumerate(self.tasks) for c in t.classes}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an integer array."""
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise ParseError(f"truncated IDX payload: need {size} bytes", len(raw))
    if len(raw) > header + size:
        raise ParseError("trailing bytes after IDX payload", header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def encode_idx(values: np.ndarray, magic: int) -> bytes:
    values = np.asarray(values, dtype=np.uint8)
    ndim = magic & 0xFF
    if values.ndim != ndim:
        raise ValueError(f"magic 0x{magic:08x} needs {ndim} dims, got {values.ndim}")
    return struct.pack(f">I{ndim}I", magic, *values.shape) + values.tobytes()


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Read an IDX image/label pair; images come back flattened and scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}", 4
        )
    shape = tuple(images.shape[1:])
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64), shape


def save_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray,
             image_shape: tuple[int, int]):
    pixels = np.rint(np.asarray(images) * 255.0).astype(np.uint8)
    pixels = pixels.reshape(len(pixels), *image_shape)
    Path(images_path).write_bytes(encode_idx(pixels, IDX_IMAGES_MAGIC))
    Path(labels_path).write_bytes(encode_idx(np.asarray(labels), IDX_LABELS_MAGIC))


def load_idx_dataset(train_images, train_labels, test_images, test_labels) -> Dataset:
    xtr, ytr, shape = load_idx(train_images, train_labels)
    xte, yte, shape_te = load_idx(test_images, test_labels)
    if shape != shape_te:
        raise ValueError(f"train image shape {shape} differs from test {shape_te}")
    count = int(max(ytr.max(initial=0), yte.max(initial=0))) + 1
    return Dataset(xtr, ytr, xte, yte, count, shape)


def load_cifar_binary(path, label_bytes: int = 1, use_fine: bool = True):
    """Read a CIFAR binary batch file.

    Records are ``label_bytes`` label bytes followed by 3072 pixel bytes
    (3x32x32, channel-major). CIFAR-10 uses one label byte (3073-byte
    records); CIFAR-100 stores coarse then fine label (3074-byte records).
    Pixels are averaged over channels, giving 1024 grey features.
    """
    if label_bytes not in (1, 2):
        raise ValueError("label_bytes must be 1 or 2")
    raw = _read_bytes(path)
    record = label_bytes + 3072
    if len(raw) == 0 or len(raw) % record:
        whole = len(raw) - len(raw) % record
        raise ParseError(f"file size {len(raw)} is not a multiple of {record}", whole)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_bytes - 1 if use_fine else 0].astype(np.int64)
    pixels = arr[:, label_bytes:].reshape(-1, 3, 32 * 32).astype(np.float64)
    return pixels.mean(axis=1) / 255.0, labels, (32, 32)


def load_cifar_dataset(train_path, test_path, label_bytes: int = 1) -> Dataset:
    xtr, ytr, shape = load_cifar_binary(train_path, label_bytes)
    xte, yte, _ = load_cifar_binary(test_path, label_bytes)
    return Dataset(xtr, ytr, xte, yte, int(max(ytr.max(), yte.max())) + 1, shape)


def synth_blobs(class_count: int, samples_per_class: int, image_side: int, seed: int,
                noise: float = 0.1, test_per_class: int | None = None) -> Dataset:
    """Each class is a Gaussian bump at its own position plus clipped pixel noise."""
    if class_count < 2:
        raise ValueError("synth_blobs needs at least 2 classes")
    rng = np.random.default_rng(seed)
    test_per_class = samples_per_class if test_per_class is None else test_per_class
    yy, xx = np.mgrid[0:image_side, 0:image_side] + 0.5
    angles = 2 * np.pi * np.arange(class_count) / class_count
    radius = image_side / 3.0
    centre = image_side / 2.0
    width = max(image_side / 6.0, 0.75)
    patterns = np.stack([
        np.exp(-((xx - centre - radius * np.cos(a)) ** 2 + (yy - centre - radius * np.sin(a)) ** 2)
               / (2 * width ** 2)).ravel()
        for a in angles
    ])

    def draw(n):
        labels = np.repeat(np.arange(class_count), n)
        images = patterns[labels] + noise * rng.standard_normal((labels.size, image_side ** 2))
        return np.clip(images, 0.0, 1.0), labels

    xtr, ytr = draw(samples_per_class)
    xte, yte = draw(test_per_class)
    return Dataset(xtr, ytr, xte, yte, class_count, (image_side, image_side))


def load_digits_dataset(seed: int = 0, test_fraction: float = 0.3) -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn, split per class."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = bunch.data.astype(np.float64) / 16.0
    labels = bunch.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(len(idx) * test_fraction))
        test.append(idx[:cut])
        train.append(idx[cut:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return Dataset(images[tr], labels[tr], images[te], labels[te], 10, (8, 8))


def parse_task_classes(text: str) -> list[list[int]]:
    """``"0,1;2,3"`` -> ``[[0, 1], [2, 3]]``."""
    return [[int(c) for c in chunk.split(",") if c.strip()] for chunk in text.split(";") if chunk.strip()]


def even_task_classes(class_count: int, task_count: int) -> list[list[int]]:
    if class_count % task_count:
        raise ValueError(f"{class_count} classes do not split evenly into {task_count} tasks")
    per = class_count // task_count
    return [list(range(k * per, (k + 1) * per)) for k in range(task_count)]


def split_by_class(ds: Dataset, task_classes: Sequence[Sequence[int]]) -> TaskSequence:
    seen: set[int] = set()
    tasks = []
    for classes in task_classes:
        classes = tuple(int(c) for c in classes)
        overlap = seen.intersection(classes)
        if overlap or len(set(classes)) != len(classes):
            raise ValueError(f"task class lists overlap on {sorted(overlap) or list(classes)}")
        bad = [c for c in classes if not 0 <= c < ds.class_count]
        if bad:
            raise ValueError(f"classes {bad} not in dataset with {ds.class_count} classes")
        seen.update(classes)
        tasks.append(Task(
            classes,
            np.flatnonzero(np.isin(ds.train_labels, classes)),
            np.flatnonzero(np.isin(ds.test_labels, classes)),
        ))
    return TaskSequence(ds, tasks)
