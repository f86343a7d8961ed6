"""Attribute space and synthetic datasets.

Holds the shared attribute word-vector matrix S (N_a x D, frozen input),
per-class attribute vectors with their learned prototype embedding, the
synthetic seen/unseen dataset generator, and the .vspd binary format.

.vspd layout (all little-endian):
    magic "VSPD" | version u16 | u32 x 8: n_seen, n_unseen, n_attributes,
    dim, n_v, patch_dim, n_train, n_test
    train_labels u32[n_train] | test_labels u32[n_test]
    train_images f64[n_train * n_v * patch_dim]
    test_images  f64[n_test * n_v * patch_dim]
    class_attributes f64[(n_seen+n_unseen) * n_attributes]
    word_vectors f64[n_attributes * dim]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DatasetFormatError, ShapeError
from .tensor import Tensor, matmul

_MAGIC = b"VSPD"
_VERSION = 1


@dataclass
class AttributeMatrix:
    """One D-dim word vector per named attribute; rows frozen, never trained."""

    names: list
    matrix: np.ndarray  # (N_a, D)


def load_attribute_vectors(path, expected_dims) -> AttributeMatrix:
    """Read a flat text file: each line `name v1 v2 ... vD`, whitespace-separated.

    expected_dims is (N_a, D). Parse problems carry the 1-based line number;
    a row-count mismatch is a shape error.
    """
    n_a, d = expected_dims
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = fh.read().splitlines()
    except OSError as e:
        raise DatasetFormatError(f"cannot read attribute file {path}: {e}") from None

    names, rows = [], []
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != d + 1:
            raise DatasetFormatError(
                f"line {lineno}: expected name plus {d} values, found {len(parts)} tokens"
            )
        try:
            rows.append([float(tok) for tok in parts[1:]])
        except ValueError:
            raise DatasetFormatError(
                f"line {lineno}: non-numeric value in attribute row"
            ) from None
        names.append(parts[0])

    if not names:
        raise DatasetFormatError(f"attribute file {path} is empty")
    if len(names) != n_a:
        raise ShapeError(f"expected {n_a} attribute rows, file has {len(names)}")
    matrix = np.array(rows, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise DatasetFormatError(f"attribute file {path} contains non-finite values")
    return AttributeMatrix(names=names, matrix=matrix)


def embed_prototypes(class_attributes, w_d: Tensor) -> Tensor:
    """Per-class prototype rows a_y @ W_d; differentiable through W_d."""
    a = class_attributes if isinstance(class_attributes, Tensor) else Tensor(class_attributes)
    return matmul(a, w_d)


@dataclass
class GzslDataset:
    """Patch-grid images with a disjoint seen/unseen class split.

    Labels 0..n_seen-1 are seen; n_seen..n_classes-1 are unseen. Train images
    come from seen classes only; the test split covers every class.
    """

    train_images: np.ndarray   # (n_train, n_v, patch_dim)
    train_labels: np.ndarray   # (n_train,) int64
    test_images: np.ndarray
    test_labels: np.ndarray
    class_attributes: np.ndarray  # (n_classes, n_attributes)
    word_vectors: np.ndarray      # (n_attributes, dim)
    n_seen: int

    @property
    def n_classes(self) -> int:
        return self.class_attributes.shape[0]

    @property
    def n_unseen(self) -> int:
        return self.n_classes - self.n_seen

    @property
    def unseen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_classes, dtype=bool)
        mask[self.n_seen:] = True
        return mask

    def check(self) -> "GzslDataset":
        if self.train_labels.size and int(self.train_labels.max()) >= self.n_seen:
            raise DatasetFormatError("train split contains unseen-class labels")
        if self.test_labels.size and int(self.test_labels.max()) >= self.n_classes:
            raise DatasetFormatError("test labels exceed the class count")
        return self


def synth_gzsl_dataset(cfg: RunConfig, seed: int) -> GzslDataset:
    """Deterministic synthetic GZSL data.

    Classes are sparse nonnegative attribute vectors (k active each); unseen
    classes reuse only attributes that some seen class activates, so transfer
    is possible in principle. Each image is a fixed linear rendering of its
    class attributes into the patch grid plus i.i.d. gaussian pixel noise.
    """
    if cfg.n_seen < 1 or cfg.n_unseen < 1:
        raise ConfigError("dataset needs at least one seen and one unseen class")
    if cfg.train_per_class < 1 or cfg.test_per_class < 1:
        raise ConfigError("dataset needs at least one image per class per split")

    rng = np.random.default_rng(seed)
    n_a, d = cfg.n_attributes, cfg.dim
    n_classes = cfg.n_classes
    k = min(cfg.k_active, n_a)

    word = rng.normal(size=(n_a, d))
    word /= np.linalg.norm(word, axis=1, keepdims=True)

    attrs = np.zeros((n_classes, n_a))
    for c in range(cfg.n_seen):
        active = rng.choice(n_a, size=k, replace=False)
        attrs[c, active] = rng.uniform(0.5, 1.0, size=k)
    covered = np.flatnonzero(attrs[: cfg.n_seen].any(axis=0))
    for c in range(cfg.n_seen, n_classes):
        active = rng.choice(covered, size=min(k, covered.size), replace=False)
        attrs[c, active] = rng.uniform(0.5, 1.0, size=active.size)

    # fixed rendering: attribute vector -> flat pixel mean, shared by all classes
    render = rng.normal(scale=1.0 / np.sqrt(n_a), size=(n_a, cfg.n_v * cfg.patch_dim))

    def draw(classes, per_class):
        images, labels = [], []
        for c in classes:
            mean = attrs[c] @ render
            for _ in range(per_class):
                flat = mean + cfg.noise * rng.normal(size=mean.shape)
                images.append(flat.reshape(cfg.n_v, cfg.patch_dim))
                labels.append(c)
        return np.array(images), np.array(labels, dtype=np.int64)

    train_images, train_labels = draw(range(cfg.n_seen), cfg.train_per_class)
    test_images, test_labels = draw(range(n_classes), cfg.test_per_class)
    return GzslDataset(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        class_attributes=attrs,
        word_vectors=word,
        n_seen=cfg.n_seen,
    ).check()


# ---------------------------------------------------------------------------
# binary persistence


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError("truncated dataset file")
    return buf


def _read_f64(fh, count: int, shape) -> np.ndarray:
    arr = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape)
    return np.ascontiguousarray(arr)


def save_dataset(ds: GzslDataset, path) -> None:
    n_train = ds.train_labels.shape[0]
    n_test = ds.test_labels.shape[0]
    n_a, d = ds.word_vectors.shape
    n_v, patch_dim = ds.train_images.shape[1], ds.train_images.shape[2]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<8I", ds.n_seen, ds.n_unseen, n_a, d, n_v,
                             patch_dim, n_train, n_test))
        fh.write(ds.train_labels.astype("<u4").tobytes())
        fh.write(ds.test_labels.astype("<u4").tobytes())
        fh.write(ds.train_images.astype("<f8").tobytes())
        fh.write(ds.test_images.astype("<f8").tobytes())
        fh.write(ds.class_attributes.astype("<f8").tobytes())
        fh.write(ds.word_vectors.astype("<f8").tobytes())


def load_dataset(path) -> GzslDataset:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset file {path}: {e}") from None
    with fh:
        magic = _read_exact(fh, 4)
        if magic != _MAGIC:
            raise DatasetFormatError(f"not a dataset file (bad magic {magic!r})")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        n_seen, n_unseen, n_a, d, n_v, patch_dim, n_train, n_test = struct.unpack(
            "<8I", _read_exact(fh, 32)
        )
        train_labels = np.frombuffer(_read_exact(fh, 4 * n_train), dtype="<u4").astype(np.int64)
        test_labels = np.frombuffer(_read_exact(fh, 4 * n_test), dtype="<u4").astype(np.int64)
        train_images = _read_f64(fh, n_train * n_v * patch_dim, (n_train, n_v, patch_dim))
        test_images = _read_f64(fh, n_test * n_v * patch_dim, (n_test, n_v, patch_dim))
        attrs = _read_f64(fh, (n_seen + n_unseen) * n_a, (n_seen + n_unseen, n_a))
        word = _read_f64(fh, n_a * d, (n_a, d))
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after dataset payload")
    return GzslDataset(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        class_attributes=attrs,
        word_vectors=word,
        n_seen=n_seen,
    ).check()
