"""
Datasets: CIFAR-10 binary batches, a synthetic shapes generator with planted
low/high-frequency cues, stratified splits and the ``ATNS`` tensor format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError, VersionError
from .reports import atomic_write_bytes

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

TENSOR_MAGIC = b"ATNS"
TENSOR_VERSION = 1


@dataclass
class Dataset:
    """
    Images in ``[0, 1]`` with shape ``(N, C, H, W)``, integer labels and
    stable sample ids that survive splitting.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(self.labels.shape[0], dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.labels.shape[0]
        if self.images.shape[0] != n or self.ids.shape[0] != n:
            raise PreconditionError("images, labels and ids disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise PreconditionError(f"labels outside [0, {self.num_classes})")
        if np.unique(self.ids).shape[0] != n:
            raise PreconditionError("sample ids must be unique")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise PreconditionError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def class_index(self):
        """``{class: sorted sample ids}`` for every class, empty ones included."""
        return {c: np.sort(self.ids[self.labels == c]) for c in range(self.num_classes)}

    def subset(self, ids, split=None):
        """Rows whose sample id is in ``ids``, in the order given."""
        pos = {int(i): j for j, i in enumerate(self.ids)}
        try:
            rows = np.array([pos[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise PreconditionError(f"unknown sample id {exc.args[0]}") from None
        return Dataset(
            self.images[rows], self.labels[rows], self.num_classes, self.ids[rows],
            split or self.split,
        )

    def manifest(self):
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {
            "split": self.split,
            "n_samples": len(self),
            "num_classes": self.num_classes,
            "sample_shape": list(self.sample_shape),
            "class_counts": counts.tolist(),
            "ids": self.ids.tolist(),
        }


# ---------------------------------------------------------------------------
# CIFAR-10


def read_cifar10_batch(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError("missing CIFAR-10 batch file", path=path)
    raw = path.read_bytes()
    n, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise FormatError(
            f"truncated record {n} ({rest} of {CIFAR_RECORD} bytes)",
            offset=n * CIFAR_RECORD, path=path,
        )
    if n == 0:
        raise FormatError("empty batch file", offset=0, path=path)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        r = int(bad[0])
        raise FormatError(
            f"record {r} has label byte {labels[r]} (>= 10)", offset=r * CIFAR_RECORD, path=path
        )
    images = records[:, 1:].reshape((n,) + CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(directory, split="train", files=None):
    """
    Parse the standard binary layout: 1 label byte followed by 3072
    channel-major pixel bytes per record.
    """
    directory = Path(directory)
    if files is None:
        files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [read_cifar10_batch(directory / f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10, split=split)


def write_cifar10_batch(path, images, labels):
    """Inverse of :func:`read_cifar10_batch` (pixels rounded to bytes)."""
    images = np.asarray(images)
    px = np.clip(np.rint(images.reshape(images.shape[0], -1) * 255), 0, 255).astype(np.uint8)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    Path(path).write_bytes(records.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def _blob_centers(p, side):
    angles = 2 * np.pi * np.arange(p) / p
    radius = side / 4
    c = (side - 1) / 2
    return np.stack([c + radius * np.sin(angles), c + radius * np.cos(angles)], axis=1)


def synth_shapes(p=3, n_per_class=100, side=16, seed=0, lf_strength=0.4, hf_strength=0.6,
                 noise=0.2, channels=3):
    """
    Class-conditional images with two planted cues.

    The low-frequency cue is a smooth Gaussian blob whose position depends on
    the class.  The high-frequency cue is a fine diagonal grating (period 3
    pixels along each axis) whose phase depends on the class.  Setting either
    strength to zero removes that cue.
    """
    if p < 2:
        raise PreconditionError("need at least two classes")
    if side < 8:
        raise PreconditionError("side must be at least 8")
    if n_per_class < 1:
        raise PreconditionError("n_per_class must be positive")
    if lf_strength < 0 or hf_strength < 0:
        raise PreconditionError("cue strengths must be non-negative")
    rng = np.random.default_rng(seed)
    centers = _blob_centers(p, side)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    sigma = side / 8
    n = p * n_per_class
    labels = np.repeat(np.arange(p), n_per_class)
    images = np.empty((n, channels, side, side), dtype=np.float32)
    for i, c in enumerate(labels):
        cy, cx = centers[c] + rng.uniform(-0.75, 0.75, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        phase = 2 * np.pi * c / p + rng.uniform(-0.15, 0.15)
        grating = np.cos(2 * np.pi * (yy + xx) / 3 + phase)
        base = rng.uniform(0.35, 0.55)
        tint = rng.uniform(0.7, 1.0, size=channels)
        img = (
            base
            + lf_strength * 0.35 * blob[None] * tint[:, None, None]
            + hf_strength * 0.12 * grating[None]
            + noise * rng.standard_normal((channels, side, side))
        )
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], p)


def stratified_partition(dataset, fractions, seed=0, names=None):
    """
    Seeded stratified partition into ``len(fractions)`` parts.

    Per class the counts follow the largest-remainder rule, so each part
    stays within one sample of its exact share.
    """
    fractions = tuple(float(f) for f in fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise PreconditionError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise PreconditionError(f"fractions must sum to 1, got {sum(fractions)}")
    names = names or tuple(f"part{i}" for i in range(len(fractions)))
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for c, ids in dataset.class_index().items():
        ids = rng.permutation(ids)
        exact = np.array(fractions) * ids.shape[0]
        counts = np.floor(exact).astype(int)
        short = ids.shape[0] - counts.sum()
        for j in np.argsort(-(exact - counts), kind="stable")[:short]:
            counts[j] += 1
        edges = np.cumsum(counts)[:-1]
        for part, chunk in zip(parts, np.split(ids, edges)):
            part.extend(chunk.tolist())
    return tuple(dataset.subset(sorted(part), split=name) for part, name in zip(parts, names))


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded stratified ``(train, calibration, test)`` split."""
    if len(tuple(fractions)) != 3:
        raise PreconditionError(f"need three fractions, got {fractions}")
    return stratified_partition(dataset, fractions, seed, ("train", "calibration", "test"))


def per_class_head(dataset, n_per_class, seed=0):
    """Seeded subsample of at most ``n_per_class`` samples from every class."""
    rng = np.random.default_rng(seed)
    keep = []
    for ids in dataset.class_index().values():
        keep.extend(rng.permutation(ids)[:n_per_class].tolist())
    return dataset.subset(sorted(keep))


# ---------------------------------------------------------------------------
# tensor files


def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise FormatError("rank-0 tensors are not supported")
    header = TENSOR_MAGIC + struct.pack("<B", TENSOR_VERSION) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(raw, path=None):
    if len(raw) < 4 or raw[:4] != TENSOR_MAGIC:
        raise FormatError("bad magic, expected ATNS", offset=0, path=path)
    if len(raw) < 9:
        raise FormatError("truncated header", offset=len(raw), path=path)
    (version,) = struct.unpack_from("<B", raw, 4)
    if version != TENSOR_VERSION:
        raise VersionError(f"unsupported tensor version {version}", offset=4, path=path)
    (rank,) = struct.unpack_from("<I", raw, 5)
    if rank == 0:
        raise FormatError("rank-0 tensor", offset=5, path=path)
    off = 9
    if len(raw) < off + 4 * rank:
        raise FormatError("truncated extents", offset=len(raw), path=path)
    shape = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    need = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) - off < need:
        raise FormatError(
            f"payload has {len(raw) - off} bytes, extents imply {need}", offset=len(raw), path=path
        )
    if len(raw) - off > need:
        raise FormatError("trailing bytes after payload", offset=off + need, path=path)
    return np.frombuffer(raw, dtype="<f4", count=need // 4, offset=off).reshape(shape).astype(np.float32)


def save_tensor(path, arr):
    atomic_write_bytes(path, encode_tensor(arr))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes(), path=path)


def save_manifest(path, dataset):
    atomic_write_bytes(path, json.dumps(dataset.manifest(), indent=2, sort_keys=True).encode())
