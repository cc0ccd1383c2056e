"""Sparse multi-class datasets: text format I/O and a synthetic mixture generator.

File format::

    num_points num_features num_labels
    label idx:val idx:val ...
    ...

Indices are 0-based; values are ASCII decimal floats.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    pass


@dataclass
class SparseDataset:
    features: sp.csr_matrix
    labels: np.ndarray
    num_labels: int

    def __post_init__(self):
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the number of examples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise ValueError("label out of range")
        if np.any(np.diff(self.features.indptr) == 0):
            raise ValueError("every example needs at least one feature")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    def row(self, i):
        lo, hi = self.features.indptr[i], self.features.indptr[i + 1]
        return self.features.indices[lo:hi], self.features.data[lo:hi]

    def subset(self, idx):
        idx = np.asarray(idx)
        return SparseDataset(self.features[idx], self.labels[idx], self.num_labels)


def _parse_error(path, lineno, msg):
    return DatasetFormatError(f"{path}:{lineno}: {msg}")


def load_dataset(path):
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split()
    try:
        declared, v, n = (int(x) for x in header)
    except ValueError:
        raise _parse_error(path, 1, f"bad header {lines[0]!r}") from None
    if v < 1 or n < 1:
        raise _parse_error(path, 1, "feature and label counts must be positive")

    indptr = [0]
    indices = []
    values = []
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            label = int(parts[0])
            pairs = [p.split(":") for p in parts[1:]]
            row_idx = [int(a) for a, _ in pairs]
            row_val = [float(b) for _, b in pairs]
        except ValueError:
            raise _parse_error(path, lineno, f"malformed line {line!r}") from None
        if not 0 <= label < n:
            raise _parse_error(path, lineno, f"label {label} out of range [0, {n})")
        if not row_idx:
            raise _parse_error(path, lineno, "example has no features")
        if min(row_idx) < 0 or max(row_idx) >= v:
            raise _parse_error(path, lineno, f"feature index out of range [0, {v})")
        labels.append(label)
        indices.extend(row_idx)
        values.extend(row_val)
        indptr.append(len(indices))
    if len(labels) != declared:
        logger.warning("%s: header declares %d points, found %d", path, declared, len(labels))
    feats = sp.csr_matrix(
        (np.array(values, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(labels), v),
    )
    return SparseDataset(feats, np.array(labels, dtype=np.int64), n)


def write_dataset(dataset, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{len(dataset)} {dataset.num_features} {dataset.num_labels}\n")
        for i in range(len(dataset)):
            idx, val = dataset.row(i)
            items = " ".join(f"{j}:{float(x)!r}" for j, x in zip(idx.tolist(), val.tolist()))
            fh.write(f"{int(dataset.labels[i])} {items}\n")


def make_synthetic_mixture(num_classes, num_features, per_class, active=8, keep=0.75, noise=2,
                           seed=None):
    """Sparse mixture: each class owns ``active`` prototype features.

    An example keeps each prototype feature with probability ``keep`` (at least
    one) and adds ``noise`` uniformly random features.  Class frequencies are
    equal; values are positive reals.
    """
    rng = np.random.default_rng(seed)
    prototypes = np.stack([rng.choice(num_features, active, replace=False) for _ in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    rows = []
    for label in labels:
        proto = prototypes[label]
        mask = rng.random(active) < keep
        if not mask.any():
            mask[rng.integers(active)] = True
        cols = np.concatenate([proto[mask], rng.integers(0, num_features, noise)])
        rows.append(np.unique(cols))
    indptr = np.concatenate([[0], np.cumsum([r.size for r in rows])])
    indices = np.concatenate(rows)
    values = rng.uniform(0.5, 1.5, size=indices.size)
    feats = sp.csr_matrix((values, indices, indptr), shape=(labels.size, num_features))
    return SparseDataset(feats, labels, num_classes)


def train_test_split(dataset, test_fraction, seed=None):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    cut = int(round(len(dataset) * (1.0 - test_fraction)))
    return dataset.subset(np.sort(perm[:cut])), dataset.subset(np.sort(perm[cut:]))
