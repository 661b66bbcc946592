"""Dataset ingestion into a uniform class -> sample-id index.

Expected layouts under ``root``::

    cifar100       cifar-100-python/{train,test,meta}           (python pickle release)
    tiny_imagenet  tiny-imagenet-200/wnids.txt
                   tiny-imagenet-200/train/<wnid>/images/*.JPEG
                   tiny-imagenet-200/val/val_annotations.txt, val/images/*.JPEG
    imagenet_r     imagenet-r/<wnid>/*.jpg

Inputs are exposed as raw pixels (uint8, ``[C, H, W]``) or raw vectors; the
backbone owns resizing and normalization.
"""

from __future__ import annotations

import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DATASETS = {
    # name: (num_classes, train samples or None when not fixed)
    "cifar100": (100, 50000),
    "tiny_imagenet": (200, 100000),
    "imagenet_r": (200, None),
}


class DatasetIngestionError(FileNotFoundError):
    pass


class DatasetCorruptionError(ValueError):
    pass


class ArraySource:
    """Inputs held in memory, addressed by sample id."""

    def __init__(self, data: np.ndarray):
        self.data = data

    def __call__(self, sample_ids: Sequence[int]) -> np.ndarray:
        return self.data[np.asarray(sample_ids, dtype=np.int64)]


class ImageFileSource:
    """Inputs decoded from image files on demand, resized to a square."""

    def __init__(self, paths: Sequence[str | Path], size: int):
        self.paths = [str(p) for p in paths]
        self.size = size

    def _load(self, sid: int) -> np.ndarray:
        from PIL import Image

        with Image.open(self.paths[sid]) as im:
            im = im.convert("RGB")
            if im.size != (self.size, self.size):
                im = im.resize((self.size, self.size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()

    def __call__(self, sample_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self._load(int(s)) for s in sample_ids])


@dataclass
class DatasetIndex:
    name: str
    num_classes: int
    train: dict[int, list[int]]
    test: dict[int, list[int]]
    labels: np.ndarray
    source: Callable[[Sequence[int]], np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        tr = [s for ids in self.train.values() for s in ids]
        te = [s for ids in self.test.values() for s in ids]
        if len(set(tr) | set(te)) != len(tr) + len(te):
            raise DatasetCorruptionError(f"{self.name}: sample ids are not unique across splits")
        for split, table in (("train", self.train), ("test", self.test)):
            if sorted(table) != list(range(self.num_classes)):
                raise DatasetCorruptionError(
                    f"{self.name}: {split} split has {len(table)} classes, expected {self.num_classes}"
                )
            empty = [c for c, ids in table.items() if not ids]
            if empty:
                raise DatasetCorruptionError(f"{self.name}: empty {split} classes {empty[:10]}")

    @property
    def num_train(self) -> int:
        return sum(len(v) for v in self.train.values())

    @property
    def num_test(self) -> int:
        return sum(len(v) for v in self.test.values())

    def test_ids(self, classes=None) -> list[int]:
        keep = sorted(self.test) if classes is None else sorted(classes)
        return [s for c in keep for s in self.test[c]]

    def fetch(self, sample_id: int) -> tuple[torch.Tensor, int]:
        x = self.source([sample_id])[0]
        return torch.from_numpy(np.ascontiguousarray(x)), int(self.labels[sample_id])

    def fetch_batch(self, sample_ids: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.source(sample_ids)
        y = self.labels[np.asarray(sample_ids, dtype=np.int64)]
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(y.astype(np.int64))

    def save(self, path: str | Path) -> Path:
        """Write an in-memory index to ``.npz`` (array-backed sources only)."""
        if not isinstance(self.source, ArraySource):
            raise TypeError("only array-backed indices can be serialized")
        path = Path(path)
        tr = np.array([(c, s) for c, ids in sorted(self.train.items()) for s in ids], dtype=np.int64)
        te = np.array([(c, s) for c, ids in sorted(self.test.items()) for s in ids], dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, name=np.array(self.name), num_classes=self.num_classes,
                     train=tr, test=te, labels=self.labels, data=self.source.data)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetIndex":
        path = Path(path)
        if not path.exists():
            raise DatasetIngestionError(f"index file not found: {path}")
        with np.load(path) as z:
            return cls(
                name=str(z["name"]),
                num_classes=int(z["num_classes"]),
                train=_group(z["train"]),
                test=_group(z["test"]),
                labels=z["labels"],
                source=ArraySource(z["data"]),
            )


def _group(pairs: np.ndarray) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for c, s in pairs.tolist():
        out.setdefault(c, []).append(s)
    return out


def make_synthetic(
    num_classes: int,
    dim: int,
    per_class: int,
    noise: float,
    seed: int = 0,
    test_per_class: int | None = None,
) -> DatasetIndex:
    """Gaussian blobs around centers drawn on the unit sphere.

    Train ids come first (class-major), then test ids.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    if test_per_class is None:
        test_per_class = max(1, per_class // 4)
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    n_tr, n_te = num_classes * per_class, num_classes * test_per_class
    labels = np.concatenate([np.repeat(np.arange(num_classes), per_class),
                             np.repeat(np.arange(num_classes), test_per_class)])
    data = centers[labels] + noise * rng.standard_normal((n_tr + n_te, dim))
    train = {c: list(range(c * per_class, (c + 1) * per_class)) for c in range(num_classes)}
    test = {c: list(range(n_tr + c * test_per_class, n_tr + (c + 1) * test_per_class))
            for c in range(num_classes)}
    index = DatasetIndex(
        name=f"synthetic-{num_classes}x{per_class}-d{dim}",
        num_classes=num_classes,
        train=train,
        test=test,
        labels=labels.astype(np.int64),
        source=ArraySource(data.astype(np.float32)),
    )
    index.centers = centers.astype(np.float32)
    return index


def _require(path: Path) -> Path:
    if not path.exists():
        raise DatasetIngestionError(f"missing dataset artifact: {path}")
    return path


def _load_cifar100(root: Path) -> DatasetIndex:
    base = _require(root / "cifar-100-python")
    arrays, labels = [], []
    for split in ("train", "test"):
        with open(_require(base / split), "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        arrays.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(d[b"fine_labels"], dtype=np.int64))
    n_tr = len(labels[0])
    all_labels = np.concatenate(labels)
    train = _group(np.stack([labels[0], np.arange(n_tr)], axis=1))
    test = _group(np.stack([labels[1], n_tr + np.arange(len(labels[1]))], axis=1))
    return DatasetIndex("cifar100", 100, train, test, all_labels, ArraySource(np.concatenate(arrays)))


def _load_tiny_imagenet(root: Path, size: int) -> DatasetIndex:
    base = _require(root / "tiny-imagenet-200")
    wnids = _require(base / "wnids.txt").read_text().split()
    cls = {w: i for i, w in enumerate(sorted(wnids))}
    paths, labels = [], []
    train_dir = _require(base / "train")
    for w in sorted(wnids):
        for p in sorted((train_dir / w / "images").glob("*.JPEG")):
            paths.append(p)
            labels.append(cls[w])
    n_tr = len(paths)
    ann = _require(base / "val" / "val_annotations.txt")
    for line in ann.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) < 2:
            continue
        if parts[1] not in cls:
            raise DatasetCorruptionError(f"unknown wnid {parts[1]} in {ann}")
        paths.append(base / "val" / "images" / parts[0])
        labels.append(cls[parts[1]])
    labels_arr = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(paths))
    train = _group(np.stack([labels_arr[:n_tr], ids[:n_tr]], axis=1))
    test = _group(np.stack([labels_arr[n_tr:], ids[n_tr:]], axis=1))
    return DatasetIndex("tiny_imagenet", len(wnids), train, test, labels_arr, ImageFileSource(paths, size))


def _load_imagenet_r(root: Path, size: int, test_fraction: float = 0.2, split_seed: int = 0) -> DatasetIndex:
    base = _require(root / "imagenet-r")
    wnids = sorted(p.name for p in base.iterdir() if p.is_dir())
    rng = np.random.default_rng(split_seed)
    paths, labels, is_test = [], [], []
    for c, w in enumerate(wnids):
        files = sorted(f for f in (base / w).iterdir() if f.suffix.lower() in {".jpg", ".jpeg", ".png"})
        n_te = int(round(test_fraction * len(files)))
        te = set(rng.choice(len(files), size=n_te, replace=False).tolist())
        for i, f in enumerate(files):
            paths.append(f)
            labels.append(c)
            is_test.append(i in te)
    labels_arr = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(is_test, dtype=bool)
    ids = np.arange(len(paths))
    train = _group(np.stack([labels_arr[~mask], ids[~mask]], axis=1))
    test = _group(np.stack([labels_arr[mask], ids[mask]], axis=1))
    return DatasetIndex("imagenet_r", len(wnids), train, test, labels_arr, ImageFileSource(paths, size))


def load_dataset(name: str, root: str | Path, image_size: int | None = None) -> DatasetIndex:
    """Build the index for one of the supported image datasets.

    Raises DatasetIngestionError when files are missing and
    DatasetCorruptionError when the class count is off.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetIngestionError(f"dataset root does not exist: {root}")
    if name == "cifar100":
        index = _load_cifar100(root)
    elif name == "tiny_imagenet":
        index = _load_tiny_imagenet(root, image_size or 64)
    else:
        index = _load_imagenet_r(root, image_size or 224)
    expected_classes, expected_train = DATASETS[name]
    if index.num_classes != expected_classes:
        raise DatasetCorruptionError(
            f"{name}: found {index.num_classes} classes, expected {expected_classes}"
        )
    if expected_train is not None and index.num_train != expected_train:
        logger.warning("%s: %d train samples, expected %d", name, index.num_train, expected_train)
    return index


DOWNLOADS = {
    "cifar100": "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
    "tiny_imagenet": "http://cs231n.stanford.edu/tiny-imagenet-200.zip",
    "imagenet_r": "https://people.eecs.berkeley.edu/~hendrycks/imagenet-r.tar",
}
