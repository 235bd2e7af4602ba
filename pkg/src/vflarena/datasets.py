"""Synthetic vertically-partitioned datasets, CSV ingestion, and auxiliary
labeled subsets for model-completion / model-inversion attacks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError
from .numerics import RngStream

SYNTHETIC_KINDS = (
    "synthetic-binary-imbalanced",
    "synthetic-binary-balanced",
    "synthetic-multiclass",
    "synthetic-image-pattern",
)

# Default class ratios mirror the imbalanced (1:9) and balanced (1:2)
# binary regimes of the evaluated tabular datasets.
DEFAULT_POSITIVE_RATIO = {
    "synthetic-binary-imbalanced": 0.1,
    "synthetic-binary-balanced": 1.0 / 3.0,
}

AUX_SIZE_GRID = (40, 80, 160, 200, 400)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n_train: int = 1000
    n_test: int = 500
    dims_a: int = 8
    dims_b: int = 8
    num_classes: int = 2
    positive_ratio: float | None = None
    separation: float = 2.0
    noise: float = 1.0
    image_side: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS and self.kind != "csv":
            raise ConfigError(f"dataset kind {self.kind!r} not recognized")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset counts must be >= 1")
        if self.kind != "csv" and self.kind != "synthetic-image-pattern" and self.dims_a + self.dims_b == 0:
            raise ConfigError("dims_a + dims_b must be positive")
        ratio = self.effective_positive_ratio()
        if ratio is not None and not 0.0 < ratio < 1.0:
            raise ConfigError("positive_ratio must lie in (0, 1)")

    def effective_positive_ratio(self) -> float | None:
        if self.kind in DEFAULT_POSITIVE_RATIO:
            return self.positive_ratio if self.positive_ratio is not None else DEFAULT_POSITIVE_RATIO[self.kind]
        return self.positive_ratio


@dataclass
class VerticalDataset:
    """Two feature shards over a shared sample-ID space; labels live with party A."""

    features_a: np.ndarray
    features_b: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"
    image_shape_b: tuple[int, int] | None = None  # set for pattern data

    def __post_init__(self):
        self.features_a = np.ascontiguousarray(self.features_a, dtype=np.float64)
        self.features_b = np.ascontiguousarray(self.features_b, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if self.features_a.shape[0] != n or self.features_b.shape[0] != n:
            raise ConfigError("party shards and labels must share one sample-ID space")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def take(self, indices: np.ndarray) -> "VerticalDataset":
        """One shared permutation/selection applied to both shards and labels."""
        idx = np.asarray(indices)
        return VerticalDataset(self.features_a[idx], self.features_b[idx],
                               self.labels[idx], self.num_classes, self.split_tag,
                               self.image_shape_b)


@dataclass(frozen=True)
class AuxiliarySample:
    """Stratified indices into a labeled pool, disjoint from excluded indices."""

    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.indices.shape[0]


def _stratified_counts(total: int, num_classes: int) -> list[int]:
    base = total // num_classes
    counts = [base] * num_classes
    for i in range(total - base * num_classes):
        counts[i] += 1
    return counts


def _stratified_labels(n: int, class_fractions: np.ndarray, rng: RngStream) -> np.ndarray:
    # exact per-class counts (within one sample of the requested fractions)
    counts = np.floor(class_fractions * n).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(class_fractions * n - counts))
    for i in range(remainder):
        counts[order[i % len(counts)]] += 1
    labels = np.repeat(np.arange(len(counts)), counts)
    return labels[rng.gen.permutation(n)]


def generate_synthetic(spec: DatasetSpec) -> tuple[VerticalDataset, VerticalDataset]:
    """Class-conditional Gaussian clusters, feature columns split between parties."""
    if spec.kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"generate_synthetic needs a synthetic kind, got {spec.kind!r}")
    if spec.kind == "synthetic-image-pattern":
        return generate_image_patterns(spec)

    dims = spec.dims_a + spec.dims_b
    num_classes = spec.num_classes if spec.kind == "synthetic-multiclass" else 2
    root = RngStream(spec.seed, ("dataset", spec.kind))

    # class means at pairwise distance ~ 2 * separation
    mean_rng = root.child("means")
    directions = mean_rng.gen.standard_normal((num_classes, dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * spec.separation

    ratio = spec.effective_positive_ratio()
    if num_classes == 2:
        fractions = np.array([1.0 - ratio, ratio])
    else:
        fractions = np.full(num_classes, 1.0 / num_classes)

    def make(split: str, n: int) -> VerticalDataset:
        rng = root.child(split)
        labels = _stratified_labels(n, fractions, rng.child("labels"))
        x = means[labels] + spec.noise * rng.child("noise").gen.standard_normal((n, dims))
        return VerticalDataset(x[:, :spec.dims_a], x[:, spec.dims_a:], labels,
                               num_classes, split_tag=split)

    return make("train", spec.n_train), make("test", spec.n_test)


def generate_image_patterns(spec: DatasetSpec) -> tuple[VerticalDataset, VerticalDataset]:
    """Small grayscale class-dependent patterns; top half of each image goes to
    party A, bottom half to party B (dims_a == 0 keeps only the B half)."""
    if spec.kind != "synthetic-image-pattern":
        raise ConfigError(f"generate_image_patterns needs kind synthetic-image-pattern, got {spec.kind!r}")
    side = spec.image_side
    if side < 4 or side % 2:
        raise ConfigError("image_side must be an even number >= 4")
    num_classes = spec.num_classes
    root = RngStream(spec.seed, ("dataset", "pattern"))

    # per-class template: coarse random field upsampled bilinearly to side x side
    coarse = root.child("templates").gen.uniform(0.0, 1.0, size=(num_classes, 4, 4))
    templates = np.empty((num_classes, side, side))
    axis = (np.arange(side) + 0.5) * 4.0 / side - 0.5
    i0 = np.clip(np.floor(axis).astype(int), 0, 3)
    i1 = np.clip(i0 + 1, 0, 3)
    frac = np.clip(axis - i0, 0.0, 1.0)
    fr, fs = frac[:, None], frac[None, :]
    for c in range(num_classes):
        g00 = coarse[c][np.ix_(i0, i0)]
        g01 = coarse[c][np.ix_(i0, i1)]
        g10 = coarse[c][np.ix_(i1, i0)]
        g11 = coarse[c][np.ix_(i1, i1)]
        templates[c] = (g00 * (1 - fr) * (1 - fs) + g01 * (1 - fr) * fs
                        + g10 * fr * (1 - fs) + g11 * fr * fs)

    half = side // 2

    def make(split: str, n: int) -> VerticalDataset:
        rng = root.child(split)
        labels = _stratified_labels(n, np.full(num_classes, 1.0 / num_classes), rng.child("labels"))
        pix = templates[labels] + 0.1 * spec.noise * rng.child("noise").gen.standard_normal((n, side, side))
        pix = np.clip(pix, 0.0, 1.0)
        top = pix[:, :half, :].reshape(n, -1)
        bottom = pix[:, half:, :].reshape(n, -1)
        feats_a = top if spec.dims_a != 0 else np.zeros((n, 0))
        return VerticalDataset(feats_a, bottom, labels, num_classes,
                               split_tag=split, image_shape_b=(half, side))

    return make("train", spec.n_train), make("test", spec.n_test)


def load_csv(path, label_column: str, party_a_columns: list[str], party_b_columns: list[str],
             num_classes: int | None = None, test_fraction: float = 0.2,
             seed: int = 0) -> tuple[VerticalDataset, VerticalDataset]:
    """Ingest a user CSV (header row, '.' decimals) into a vertical dataset pair.

    Feature columns are z-scored with statistics computed on the train split
    only; the label column must hold integer class ids.
    """
    if set(party_a_columns) & set(party_b_columns):
        raise ConfigError("party_a_columns and party_b_columns must be disjoint")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = list(reader)
    col_index = {name: i for i, name in enumerate(header)}
    for name in [label_column, *party_a_columns, *party_b_columns]:
        if name not in col_index:
            raise ConfigError(f"column {name!r} not present in {path}")

    def parse_cell(row_i: int, name: str, want_int: bool):
        raw = rows[row_i][col_index[name]]
        try:
            return int(raw) if want_int else float(raw)
        except ValueError:
            raise ParseError(f"{path}: row {row_i + 2}, column {name!r}: "
                             f"cannot parse {raw!r}") from None

    n = len(rows)
    if n == 0:
        raise ParseError(f"{path}: no data rows")
    labels = np.array([parse_cell(i, label_column, True) for i in range(n)], dtype=np.int64)
    feats_a = np.array([[parse_cell(i, c, False) for c in party_a_columns] for i in range(n)],
                       dtype=np.float64).reshape(n, len(party_a_columns))
    feats_b = np.array([[parse_cell(i, c, False) for c in party_b_columns] for i in range(n)],
                       dtype=np.float64).reshape(n, len(party_b_columns))

    if labels.min() < 0:
        raise ConfigError("label column contains negative class ids")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if labels.max() >= k:
        raise ConfigError(f"label {labels.max()} outside [0, {k})")

    n_test = int(round(n * test_fraction))
    perm = RngStream(seed, ("csv-split",)).gen.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if train_idx.size == 0:
        raise ConfigError("test_fraction leaves no training rows")

    def zscore(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = x[train_idx].mean(axis=0) if x.shape[1] else np.zeros(0)
        sd = x[train_idx].std(axis=0) if x.shape[1] else np.zeros(0)
        sd = np.where(sd == 0.0, 1.0, sd)
        return mu, sd

    mu_a, sd_a = zscore(feats_a)
    mu_b, sd_b = zscore(feats_b)
    feats_a = (feats_a - mu_a) / sd_a if feats_a.shape[1] else feats_a
    feats_b = (feats_b - mu_b) / sd_b if feats_b.shape[1] else feats_b

    train = VerticalDataset(feats_a[train_idx], feats_b[train_idx], labels[train_idx], k, "train")
    test = VerticalDataset(feats_a[test_idx], feats_b[test_idx], labels[test_idx], k, "test")
    return train, test


def draw_auxiliary(pool: VerticalDataset, size: int, seed: int,
                   excluded: np.ndarray | None = None) -> AuxiliarySample:
    """Stratified, deterministic auxiliary index set, disjoint from `excluded`."""
    if size > pool.n:
        raise ConfigError(f"auxiliary size {size} exceeds pool of {pool.n}")
    banned = set() if excluded is None else set(np.asarray(excluded).tolist())
    counts = _stratified_counts(size, pool.num_classes)
    rng = RngStream(seed, ("auxiliary", size))
    chosen: list[np.ndarray] = []
    for c in range(pool.num_classes):
        members = np.flatnonzero(pool.labels == c)
        members = members[[m not in banned for m in members]] if banned else members
        if members.size == 0:
            raise ConfigError(f"class {c} absent from auxiliary pool")
        if members.size < counts[c]:
            raise ConfigError(f"class {c} has only {members.size} usable rows, "
                              f"need {counts[c]}")
        pick = rng.child(c).gen.permutation(members.size)[:counts[c]]
        chosen.append(members[pick])
    return AuxiliarySample(np.sort(np.concatenate(chosen)))
