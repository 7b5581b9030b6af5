"""Labeled data containers, IDX loading, stratified splits and synthetic problems."""

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagic, CountMismatch, InsufficientData, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_CLASSES = 10


@dataclass(frozen=True)
class LabeledSet:
    """Feature matrix with integer class labels or real regression targets.

    ``n_classes`` is None for regression data.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: Optional[int] = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise CountMismatch(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.n_classes is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def kind(self) -> str:
        return "regression" if self.n_classes is None else "classification"

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    valid_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "valid_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.train_fraction + self.valid_fraction > 1.0 + 1e-12:
            raise ValueError("train_fraction + valid_fraction must not exceed 1")


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, n_dims):
    with _open(path) as fh:
        raw = fh.read()
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise TruncatedFile(f"{path}: header needs {header_len} bytes, file has {len(raw)}")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{n_dims}i", raw[4:header_len])
    size = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < size:
        raise TruncatedFile(f"{path}: expected {size} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=size).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledSet:
    """Read an IDX image file and its label file (optionally gzipped).

    Pixels are scaled to [0, 1]; each image becomes one flattened row.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledSet(features, labels.astype(np.int64), MNIST_CLASSES)


_MNIST_STEMS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = data_dir / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no IDX file for {stem!r} in {data_dir}")


def load_mnist(data_dir, part: str = "train") -> LabeledSet:
    """Load the standard MNIST file pair ``part`` ('train' or 'test') from ``data_dir``."""
    data_dir = Path(data_dir)
    img_stem, lab_stem = _MNIST_STEMS[part]
    return load_idx(_find(data_dir, img_stem), _find(data_dir, lab_stem))


def mnist_available(data_dir) -> bool:
    try:
        for stems in _MNIST_STEMS.values():
            for stem in stems:
                _find(Path(data_dir), stem)
    except (FileNotFoundError, TypeError):
        return False
    return True


def _allocate(total, weights, capacity):
    """Integer split of ``total`` proportional to ``weights`` without exceeding ``capacity``."""
    quota = total * weights / weights.sum()
    counts = np.minimum(np.floor(quota).astype(np.int64), capacity)
    order = np.argsort(-(quota - np.floor(quota)), kind="stable")
    short = total - counts.sum()
    while short > 0:
        progressed = False
        for c in order:
            if short == 0:
                break
            if counts[c] < capacity[c]:
                counts[c] += 1
                short -= 1
                progressed = True
        if not progressed:
            raise InsufficientData("not enough examples to fill the split")
    return counts


def subsample_split(data: LabeledSet, n: int, spec: SplitSpec):
    """Draw ``n`` examples and split them into disjoint train and validation sets.

    Classification data is split per class so each subset keeps the class
    proportions of ``data``. The result depends only on ``spec.seed``.
    """
    if n > len(data):
        raise InsufficientData(f"requested {n} examples from a set of {len(data)}")
    n_train = int(np.floor(n * spec.train_fraction))
    n_valid = int(np.floor(n * spec.valid_fraction))
    if n_train < 1 or n_valid < 1:
        raise InsufficientData(f"split of {n} examples leaves an empty subset")
    rng = np.random.default_rng(spec.seed)

    if data.n_classes is None:
        perm = rng.permutation(len(data))
        return data.take(perm[:n_train]), data.take(perm[n_train : n_train + n_valid])

    by_class = [np.flatnonzero(data.labels == c) for c in range(data.n_classes)]
    available = np.array([len(ix) for ix in by_class], dtype=np.int64)
    weights = available.astype(np.float64)
    train_counts = _allocate(n_train, weights, available)
    valid_counts = _allocate(n_valid, weights, available - train_counts)
    train_idx, valid_idx = [], []
    for ix, nt, nv in zip(by_class, train_counts, valid_counts):
        ix = rng.permutation(ix)
        train_idx.append(ix[:nt])
        valid_idx.append(ix[nt : nt + nv])
    train_idx = rng.permutation(np.concatenate(train_idx))
    valid_idx = rng.permutation(np.concatenate(valid_idx))
    return data.take(train_idx), data.take(valid_idx)


def make_blobs(n: int, n_features: int, n_classes: int, seed: int, spread: float = 1.0) -> LabeledSet:
    """Isotropic Gaussian clusters with centers drawn in [-3, 3]^d."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-3.0, 3.0, size=(n_classes, n_features))
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    features = centers[labels] + spread * rng.standard_normal((n, n_features))
    return LabeledSet(features, labels.astype(np.int64), n_classes)


def make_linear_regression(n: int, n_features: int, seed: int, noise: float = 0.1):
    """Linear targets ``X @ w + noise``; returns ``(data, w)``."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n_features)
    x = rng.standard_normal((n, n_features))
    y = x @ w + noise * rng.standard_normal(n)
    return LabeledSet(x, y), w


def load_digits_set() -> LabeledSet:
    """scikit-learn's bundled 8x8 digits, scaled to [0, 1]; an offline MNIST stand-in."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    return LabeledSet(bunch.data / 16.0, bunch.target.astype(np.int64), 10)


@dataclass(frozen=True)
class AnalyticBilevel:
    """Scalar bilevel instance with closed-form lower-level solution.

    Lower level ``(b - 1)^2 + exp(lam) * b^2``, upper level ``(b - 0.5)^2``.
    Its bilevel optimum is ``lam = 0``, ``b = 0.5``, upper value 0.
    """

    seed: int = 0
    bounds: tuple = ((-10.0,), (0.0,))
    problem: object = field(default=None, compare=False, repr=False)

    @staticmethod
    def beta_star(lam):
        return 1.0 / (1.0 + np.exp(lam))

    @staticmethod
    def phi(lam):
        t = np.exp(lam)
        return t / (1.0 + t)

    @staticmethod
    def lower(lam, beta):
        return (beta - 1.0) ** 2 + np.exp(lam) * beta**2

    @staticmethod
    def upper(beta):
        return (beta - 0.5) ** 2

    @staticmethod
    def lower_dbeta(lam, beta):
        return 2.0 * (beta - 1.0) + 2.0 * np.exp(lam) * beta


def synth_quadratic(seed: int = 0, bounds=((-10.0,), (0.0,))) -> AnalyticBilevel:
    """Build the analytic instance together with an equivalent ridge ``Problem``.

    One training example ``x = 1, y = 1`` and one validation example
    ``x = 1, y = 0.5`` under squared error reproduce the closed forms exactly.
    """
    from .lower_level import Bounds, ModelSpec, Problem

    train = LabeledSet(np.ones((1, 1)), np.array([1.0]))
    valid = LabeledSet(np.ones((1, 1)), np.array([0.5]))
    problem = Problem(
        spec=ModelSpec.ridge(1),
        train=train,
        valid=valid,
        test=valid,
        bounds=Bounds(np.array(bounds[0], dtype=float), np.array(bounds[1], dtype=float)),
        name="analytic",
    )
    return AnalyticBilevel(seed=seed, bounds=bounds, problem=problem)
