"""Datasets for label-noise experiments: generators, corruption, splits, CSV i/o."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np


class DataFormatError(ValueError):
    """Raised for malformed CSV rows, inconsistent dimensions, or out-of-range labels."""


@dataclass(frozen=True)
class NoiseSpec:
    """Symmetric label corruption: flip a `ratio` fraction of samples to random other classes."""

    ratio: float
    seed: int = 0
    kind: str = "symmetric"

    def __post_init__(self) -> None:
        if self.kind != "symmetric":
            raise ValueError(f"unsupported noise kind: {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"noise ratio must be in [0, 1], got {self.ratio}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ratio": self.ratio, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(ratio=d["ratio"], seed=d.get("seed", 0), kind=d.get("kind", "symmetric"))


@dataclass(eq=False)
class Sample:
    """One labeled point. `true_label` is kept only for evaluation, never for training."""

    id: int
    features: np.ndarray
    observed_label: int
    true_label: int | None = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class LabeledDataset:
    """Ordered collection of samples with consistent feature dimension and classes 0..K-1.

    Arrays are stored read-only; every mutating operation returns a new dataset.
    Samples are kept sorted by id so iteration order is deterministic.
    """

    def __init__(self, ids, X, y, n_classes, y_true=None, trusted=None):
        ids = np.asarray(ids, dtype=np.int64)
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError("features must be a 2-d array")
        n, d = X.shape
        if d < 1:
            raise ValueError("feature dimension must be >= 1")
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        if ids.shape != (n,) or y.shape != (n,):
            raise ValueError("ids, features and labels must have matching length")
        if len(np.unique(ids)) != n:
            raise ValueError("sample ids must be unique")
        if n and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError("observed labels out of range")
        order = np.argsort(ids)
        self.ids = _frozen(ids[order])
        self.X = _frozen(X[order])
        self.y = _frozen(y[order])
        self.n_classes = int(n_classes)
        if y_true is not None:
            y_true = np.asarray(y_true, dtype=np.int64)
            if y_true.shape != (n,):
                raise ValueError("true labels must match dataset length")
            if n and (y_true.min() < 0 or y_true.max() >= n_classes):
                raise ValueError("true labels out of range")
            y_true = _frozen(y_true[order])
        self.y_true = y_true
        if trusted is not None:
            trusted = np.asarray(trusted, dtype=bool)
            if trusted.shape != (n,):
                raise ValueError("trusted flags must match dataset length")
            trusted = _frozen(trusted[order])
        self.trusted = trusted

    # -- basic views ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def has_true_labels(self) -> bool:
        return self.y_true is not None

    def __iter__(self):
        for i in range(len(self)):
            yield Sample(
                id=int(self.ids[i]),
                features=self.X[i],
                observed_label=int(self.y[i]),
                true_label=None if self.y_true is None else int(self.y_true[i]),
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        if self.n_classes != other.n_classes or len(self) != len(other):
            return False
        same_opt = (
            (self.y_true is None) == (other.y_true is None)
            and (self.trusted is None) == (other.trusted is None)
        )
        return (
            same_opt
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and (self.y_true is None or np.array_equal(self.y_true, other.y_true))
            and (self.trusted is None or np.array_equal(self.trusted, other.trusted))
        )

    # -- derived sets --------------------------------------------------------

    def subset(self, mask: np.ndarray) -> "LabeledDataset":
        mask = np.asarray(mask, dtype=bool)
        return LabeledDataset(
            self.ids[mask],
            self.X[mask],
            self.y[mask],
            self.n_classes,
            y_true=None if self.y_true is None else self.y_true[mask],
            trusted=None if self.trusted is None else self.trusted[mask],
        )

    def select_ids(self, ids) -> "LabeledDataset":
        return self.subset(np.isin(self.ids, np.asarray(ids, dtype=np.int64)))

    def remove_ids(self, ids) -> "LabeledDataset":
        return self.subset(~np.isin(self.ids, np.asarray(ids, dtype=np.int64)))

    def with_labels(self, ids, new_labels) -> "LabeledDataset":
        """Return a copy where the given sample ids carry new observed labels."""
        ids = np.asarray(ids, dtype=np.int64)
        new_labels = np.asarray(new_labels, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids)
        if not np.all(pos < len(self.ids)) or not np.array_equal(self.ids[pos], ids):
            raise KeyError("unknown sample id in relabel request")
        y = self.y.copy()
        y[pos] = new_labels
        return LabeledDataset(self.ids, self.X, y, self.n_classes,
                              y_true=self.y_true, trusted=self.trusted)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.n_classes != self.n_classes or other.feature_dim != self.feature_dim:
            raise ValueError("datasets are incompatible")
        both_true = self.y_true is not None and other.y_true is not None
        both_trusted = self.trusted is not None and other.trusted is not None
        return LabeledDataset(
            np.concatenate([self.ids, other.ids]),
            np.vstack([self.X, other.X]),
            np.concatenate([self.y, other.y]),
            self.n_classes,
            y_true=np.concatenate([self.y_true, other.y_true]) if both_true else None,
            trusted=np.concatenate([self.trusted, other.trusted]) if both_trusted else None,
        )

    # -- ground-truth views --------------------------------------------------

    def flipped_mask(self) -> np.ndarray:
        if self.y_true is None:
            raise ValueError("dataset has no true labels")
        return self.y != self.y_true

    def noise_ratio(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.mean(self.flipped_mask()))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


class ValidationSet:
    """Clean held-out samples, exactly `m` per class, used for scoring and saturation checks."""

    def __init__(self, ids, X, y, n_classes):
        ids = np.asarray(ids, dtype=np.int64)
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        counts = np.bincount(y, minlength=n_classes)
        if len(np.unique(counts)) != 1:
            raise ValueError("validation set must hold the same number of samples per class")
        self.ids = _frozen(ids)
        self.X = _frozen(X)
        self.y = _frozen(y)
        self.n_classes = int(n_classes)
        self.m = int(counts[0])

    def __len__(self) -> int:
        return len(self.ids)

    def class_block(self, k: int) -> np.ndarray:
        return self.X[self.y == k]


# -- generators ---------------------------------------------------------------


def generate_toy(n: int, seed: int = 0) -> LabeledDataset:
    """Two-class parabola problem: x1 ~ U(-5, 5), x2 ~ U(0, 55), label 1 iff x2 >= 3*x1^2."""
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(-5.0, 5.0, size=n)
    x2 = rng.uniform(0.0, 55.0, size=n)
    X = np.column_stack([x1, x2])
    y = (x2 >= 3.0 * x1**2).astype(np.int64)
    return LabeledDataset(np.arange(n), X, y, n_classes=2, y_true=y.copy())


def toy_rule(X: np.ndarray) -> np.ndarray:
    """Ground-truth labels of the toy problem for arbitrary points."""
    X = np.asarray(X, dtype=np.float64)
    return (X[:, 1] >= 3.0 * X[:, 0] ** 2).astype(np.int64)


def blob_means(n_classes: int, n_features: int, separation: float) -> np.ndarray:
    """Deterministic distinct cluster centers scaled by `separation`."""
    means = np.zeros((n_classes, n_features))
    if n_features == 1:
        means[:, 0] = separation * np.arange(n_classes)
    else:
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        means[:, 0] = separation * np.cos(angles)
        means[:, 1] = separation * np.sin(angles)
    return means


def generate_blobs(
    n_per_class: int,
    n_classes: int,
    n_features: int = 2,
    separation: float = 10.0,
    seed: int = 0,
) -> LabeledDataset:
    """K isotropic unit-variance Gaussian clusters, one per class."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    means = blob_means(n_classes, n_features, separation)
    X = np.vstack([
        means[k] + rng.standard_normal((n_per_class, n_features))
        for k in range(n_classes)
    ])
    y = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    n = n_classes * n_per_class
    return LabeledDataset(np.arange(n), X, y, n_classes=n_classes, y_true=y.copy())


def inject_noise(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Flip exactly floor(ratio * n) observed labels to uniformly random different classes."""
    n = len(ds)
    n_flip = math.floor(spec.ratio * n)
    if n_flip == 0:
        return ds
    rng = np.random.default_rng(spec.seed)
    pos = np.sort(rng.choice(n, size=n_flip, replace=False))
    y = np.array(ds.y)
    # draw from the K-1 other classes so every chosen sample actually changes
    draw = rng.integers(0, ds.n_classes - 1, size=n_flip)
    y[pos] = draw + (draw >= y[pos])
    y_true = ds.y_true if ds.y_true is not None else ds.y
    return LabeledDataset(ds.ids, ds.X, y, ds.n_classes,
                          y_true=np.array(y_true), trusted=ds.trusted)


def split_validation(
    ds: LabeledDataset, m: int = 5, seed: int = 0
) -> tuple[LabeledDataset, ValidationSet]:
    """Move m clean samples per class into a ValidationSet; return (train, validation).

    Clean means trusted where a trusted flag exists, otherwise observed == true.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if ds.trusted is not None:
        clean = np.array(ds.trusted)
    elif ds.y_true is not None:
        clean = ds.y == ds.y_true
    else:
        raise ValueError("dataset has neither true labels nor trusted flags")
    rng = np.random.default_rng(seed)
    val_pos: list[np.ndarray] = []
    for k in range(ds.n_classes):
        candidates = np.flatnonzero(clean & (ds.y == k))
        if len(candidates) < m:
            raise ValueError(
                f"class {k} has only {len(candidates)} clean samples, need {m}"
            )
        val_pos.append(rng.choice(candidates, size=m, replace=False))
    val_pos = np.sort(np.concatenate(val_pos))
    mask = np.zeros(len(ds), dtype=bool)
    mask[val_pos] = True
    val = ValidationSet(ds.ids[mask], ds.X[mask], ds.y[mask], ds.n_classes)
    return ds.subset(~mask), val


# -- CSV and manifest i/o -------------------------------------------------------


def _header(ds: LabeledDataset) -> list[str]:
    cols = ["id"] + [f"f{j}" for j in range(ds.feature_dim)] + ["label"]
    if ds.y_true is not None:
        cols.append("true_label")
    if ds.trusted is not None:
        cols.append("trusted")
    return cols


def save_csv(ds: LabeledDataset, path: str | os.PathLike) -> None:
    """Write `id,f0..fd-1,label[,true_label][,trusted]` with full-precision features."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(ds))
        for i in range(len(ds)):
            row = [int(ds.ids[i])]
            row += [repr(float(v)) for v in ds.X[i]]
            row.append(int(ds.y[i]))
            if ds.y_true is not None:
                row.append(int(ds.y_true[i]))
            if ds.trusted is not None:
                row.append(int(ds.trusted[i]))
            writer.writerow(row)


def load_csv(path: str | os.PathLike, n_classes: int | None = None) -> LabeledDataset:
    """Read a dataset CSV. Missing true_label/trusted columns are fine; bad rows are not."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [c.strip() for c in header]
        if len(header) < 3 or header[0] != "id":
            raise DataFormatError(f"{path}: malformed header {header!r}")
        has_true = "true_label" in header
        has_trusted = "trusted" in header
        n_extra = int(has_true) + int(has_trusted)
        d = len(header) - 2 - n_extra
        expected = ["id"] + [f"f{j}" for j in range(d)] + ["label"]
        expected += ["true_label"] * int(has_true) + ["trusted"] * int(has_trusted)
        if header != expected or d < 1:
            raise DataFormatError(f"{path}: malformed header {header!r}")
        ids, feats, labels, trues, flags = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                feats.append([float(v) for v in row[1 : 1 + d]])
                labels.append(int(row[1 + d]))
                if has_true:
                    trues.append(int(row[2 + d]))
                if has_trusted:
                    flags.append(int(row[-1]) != 0)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed row ({exc})") from None
    if not ids:
        raise DataFormatError(f"{path}: no data rows")
    labels_arr = np.array(labels, dtype=np.int64)
    trues_arr = np.array(trues, dtype=np.int64) if has_true else None
    observed_max = int(labels_arr.max())
    if trues_arr is not None:
        observed_max = max(observed_max, int(trues_arr.max()))
    if n_classes is None:
        n_classes = max(observed_max + 1, 2)
    elif observed_max >= n_classes or labels_arr.min() < 0:
        raise DataFormatError(f"{path}: label out of range for {n_classes} classes")
    try:
        return LabeledDataset(ids, np.array(feats), labels_arr, n_classes,
                              y_true=trues_arr,
                              trusted=np.array(flags) if has_trusted else None)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_manifest(
    path: str | os.PathLike,
    ds: LabeledDataset,
    csv_name: str,
    noise_spec: NoiseSpec | None = None,
) -> None:
    doc = {
        "num_classes": ds.n_classes,
        "feature_dim": ds.feature_dim,
        "path": csv_name,
        "noise_spec": noise_spec.to_dict() if noise_spec is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_manifest(path: str | os.PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("num_classes", "feature_dim", "path"):
        if key not in doc:
            raise DataFormatError(f"{path}: manifest missing {key!r}")
    return doc


def load_dataset(path: str | os.PathLike) -> tuple[LabeledDataset, NoiseSpec | None]:
    """Load from a manifest JSON, a directory holding one, or a bare CSV."""
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if path.endswith(".json"):
        doc = read_manifest(path)
        csv_path = os.path.join(os.path.dirname(path), doc["path"])
        ds = load_csv(csv_path, n_classes=doc["num_classes"])
        if ds.feature_dim != doc["feature_dim"]:
            raise DataFormatError(
                f"{csv_path}: feature dim {ds.feature_dim} != manifest {doc['feature_dim']}"
            )
        spec = doc.get("noise_spec")
        return ds, NoiseSpec.from_dict(spec) if spec else None
    return load_csv(path), None
