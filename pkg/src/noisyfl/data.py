"""Datasets, client partitioners and label-noise injection.

Every dataset keeps its clean labels next to the observed ones, so the
corruption mask is always available as an oracle for tests and diagnostics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import RngStream

log = logging.getLogger(__name__)

NOISE_KINDS = ("symmetric", "pairflip", "mixed", "matrix-file", "replacement-file")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    observed_labels: np.ndarray
    clean_labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D array")
        y = np.array(self.observed_labels, dtype=np.int64).reshape(-1)
        c = np.array(self.clean_labels, dtype=np.int64).reshape(-1)
        if not (x.shape[0] == y.size == c.size):
            raise ValueError(
                f"row count mismatch: features {x.shape[0]}, observed {y.size}, clean {c.size}"
            )
        m = int(self.num_classes)
        for name, arr in (("observed", y), ("clean", c)):
            if arr.size and (arr.min() < 0 or arr.max() >= m):
                raise ValueError(f"{name} labels must lie in [0, {m})")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        for arr in (x, y, c):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "observed_labels", y)
        object.__setattr__(self, "clean_labels", c)
        object.__setattr__(self, "num_classes", m)

    @property
    def corrupted(self) -> np.ndarray:
        return self.observed_labels != self.clean_labels

    def __len__(self) -> int:
        return self.features.shape[0]

    def with_observed(self, labels) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.clean_labels, self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "assignments", tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        )

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [a.size for a in self.assignments]

    def validate(self, n: int) -> None:
        """Raise unless the plan is a disjoint cover of ``range(n)`` with no empty client."""
        if any(a.size == 0 for a in self.assignments):
            raise ValueError("partition has an empty client")
        allidx = np.concatenate(self.assignments) if self.assignments else np.zeros(0, int)
        if allidx.size != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise ValueError("partition is not a disjoint cover of the dataset")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    rate_lo: float = 0.0
    rate_hi: float = 0.0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not (0.0 <= self.rate_lo <= self.rate_hi <= 1.0):
            raise ValueError(
                f"noise rates must satisfy 0 <= rate_lo <= rate_hi <= 1, got {self.rate_lo}, {self.rate_hi}"
            )
        if self.kind in ("matrix-file", "replacement-file") and not self.path:
            raise ValueError(f"noise kind {self.kind!r} requires a path")


# ---------------------------------------------------------------- datasets

def class_means(classes: int, feature_dim: int, radius: float = 2.0) -> np.ndarray:
    """Well-separated class centres.

    With ``feature_dim >= classes`` the centres are scaled standard basis vectors
    (vertices of a simplex). Otherwise they sit on a regular polygon in the first
    two coordinates, or evenly along the axis when ``feature_dim == 1``.
    """
    means = np.zeros((classes, feature_dim))
    if feature_dim >= classes:
        # pairwise centre distance 2*radius
        means[:, :classes] = np.eye(classes) * radius * np.sqrt(2.0)
    elif feature_dim == 1:
        means[:, 0] = radius * (np.arange(classes) - (classes - 1) / 2.0)
    else:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def generate_blobs(samples: int, classes: int, feature_dim: int, spread: float,
                   rng: RngStream, means: np.ndarray | None = None) -> LabeledDataset:
    """Class-balanced isotropic Gaussian clusters, labels uncorrupted."""
    if classes > samples:
        raise ValueError(f"need at least one sample per class: {classes} classes > {samples} samples")
    if classes < 1 or feature_dim < 1:
        raise ValueError("classes and feature_dim must be positive")
    if spread <= 0:
        raise ValueError("spread must be positive")
    if means is None:
        means = class_means(classes, feature_dim)
    labels = np.arange(samples) % classes
    labels = labels[rng.permutation(samples)]
    x = means[labels] + spread * rng.normal(size=(samples, feature_dim))
    return LabeledDataset(x, labels, labels, classes)


def load_delimited(path, delimiter: str | None = None, num_classes: int | None = None) -> LabeledDataset:
    """Load ``feature,...,feature,label`` rows; the label column must hold integers."""
    arr = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    raw = arr[:, -1]
    labels = raw.astype(np.int64)
    if not np.array_equal(labels, raw):
        raise ValueError(f"{path}: label column must hold integers")
    m = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(arr[:, :-1], labels, labels, m)


# ------------------------------------------------------------ partitioners

def partition_iid(dataset: LabeledDataset, num_clients: int, rng: RngStream) -> PartitionPlan:
    n = len(dataset)
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"cannot split {n} samples over {num_clients} clients")
    perm = rng.permutation(n)
    return PartitionPlan(tuple(np.array_split(perm, num_clients)))


def partition_sharding(dataset: LabeledDataset, num_clients: int, shards_per_client: int,
                       rng: RngStream) -> PartitionPlan:
    """Sort by clean label, cut into N*S shards and deal S random shards to each client."""
    n = len(dataset)
    total = num_clients * shards_per_client
    if num_clients < 1 or shards_per_client < 1 or total > n:
        raise ValueError(f"cannot cut {n} samples into {num_clients}*{shards_per_client} shards")
    # shuffle first so the within-class order (and hence shard contents) depends on the seed
    perm = rng.permutation(n)
    order = perm[np.argsort(dataset.clean_labels[perm], kind="stable")]
    shards = np.array_split(order, total)
    deal = rng.permutation(total).reshape(num_clients, shards_per_client)
    return PartitionPlan(tuple(np.concatenate([shards[s] for s in row]) for row in deal))


def partition_dirichlet(dataset: LabeledDataset, num_clients: int, beta: float,
                        rng: RngStream) -> PartitionPlan:
    """Per-class Dirichlet(beta) proportions, multinomial split, empty clients repaired."""
    if beta <= 0:
        raise ValueError("dirichlet concentration beta must be positive")
    n = len(dataset)
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"cannot split {n} samples over {num_clients} clients")
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    labels = dataset.clean_labels
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        p = rng.dirichlet(np.full(num_clients, float(beta)))
        # tiny beta can underflow every component; fall back to a one-hot draw
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.zeros(num_clients)
            p[rng.integers(num_clients)] = 1.0
        counts = rng.multinomial(idx.size, p / p.sum())
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if part.size:
                buckets[k].append(part)
    parts = [np.concatenate(b) if b else np.zeros(0, np.int64) for b in buckets]
    for k in range(num_clients):
        if parts[k].size == 0:
            donor = max(range(num_clients), key=lambda j: (parts[j].size, -j))
            parts[k] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
    return PartitionPlan(tuple(np.sort(p) for p in parts))


# ------------------------------------------------------- transition matrices

def _check_rate(num_classes: int, rho: float) -> None:
    if num_classes < 2:
        raise ValueError("a noise transition matrix needs at least 2 classes")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rho}")


def build_symmetric_matrix(num_classes: int, rho: float) -> np.ndarray:
    _check_rate(num_classes, rho)
    t = np.full((num_classes, num_classes), rho / (num_classes - 1))
    np.fill_diagonal(t, 1.0 - rho)
    return t


def build_pairflip_matrix(num_classes: int, rho: float) -> np.ndarray:
    """Class i keeps 1-rho and flips to (i+1) mod M with probability rho."""
    _check_rate(num_classes, rho)
    t = np.eye(num_classes) * (1.0 - rho)
    t[np.arange(num_classes), (np.arange(num_classes) + 1) % num_classes] += rho
    return t


def check_stochastic(t: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError(f"transition matrix must be square, got shape {t.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("transition matrix entries must lie in [0, 1]")
    bad = np.flatnonzero(np.abs(t.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise ValueError(f"transition matrix row {int(bad[0])} sums to {t[bad[0]].sum()!r}, not 1")
    return t


def load_transition_matrix(path) -> np.ndarray:
    return check_stochastic(np.loadtxt(path, ndmin=2))


def client_noise_rate(k: int, num_clients: int, spec: NoiseSpec) -> float:
    if num_clients == 1:
        return spec.rate_hi
    return spec.rate_lo + (spec.rate_hi - spec.rate_lo) * k / (num_clients - 1)


def client_transition(k: int, num_clients: int, spec: NoiseSpec, num_classes: int,
                      matrix: np.ndarray | None = None) -> np.ndarray:
    if spec.kind == "matrix-file":
        return matrix if matrix is not None else load_transition_matrix(spec.path)
    rho = client_noise_rate(k, num_clients, spec)
    kind = spec.kind
    if kind == "mixed":
        kind = "symmetric" if k % 2 == 0 else "pairflip"
    if kind == "symmetric":
        return build_symmetric_matrix(num_classes, rho)
    if kind == "pairflip":
        return build_pairflip_matrix(num_classes, rho)
    raise ValueError(f"noise kind {spec.kind!r} is not injected through a transition matrix")


def sample_labels(clean: np.ndarray, t: np.ndarray, rng: RngStream) -> np.ndarray:
    """Draw one observed label per sample from row ``t[clean]``."""
    cdf = np.cumsum(t, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(clean.size)
    rows = cdf[clean]
    out = (u[:, None] >= rows).sum(axis=1)
    return np.minimum(out, t.shape[1] - 1)


def inject_noise(dataset: LabeledDataset, plan: PartitionPlan, spec: NoiseSpec,
                 rng: RngStream) -> LabeledDataset:
    """Corrupt observed labels client by client; features and clean labels are untouched."""
    if spec.kind == "replacement-file":
        raise ValueError("replacement-file noise is applied with load_label_replacement")
    plan.validate(len(dataset))
    matrix = load_transition_matrix(spec.path) if spec.kind == "matrix-file" else None
    if matrix is not None and matrix.shape[0] != dataset.num_classes:
        raise ValueError(
            f"transition matrix is {matrix.shape[0]}x{matrix.shape[0]}, dataset has {dataset.num_classes} classes"
        )
    observed = dataset.clean_labels.copy()
    n_clients = plan.num_clients
    for k, idx in enumerate(plan.assignments):
        t = client_transition(k, n_clients, spec, dataset.num_classes, matrix)
        observed[idx] = sample_labels(dataset.clean_labels[idx], t, rng.derive(k))
    return dataset.with_observed(observed)


def load_label_replacement(path, dataset: LabeledDataset) -> LabeledDataset:
    """Replace observed labels with one integer per line from ``path``."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                value = int(text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer label: {text!r}") from None
            if not 0 <= value < dataset.num_classes:
                raise ValueError(
                    f"{path}:{lineno}: label {value} outside [0, {dataset.num_classes})"
                )
            labels.append(value)
    if len(labels) != len(dataset):
        raise ValueError(
            f"{path}: expected {len(dataset)} labels, found {len(labels)}"
        )
    return dataset.with_observed(np.asarray(labels, dtype=np.int64))


def write_labels(path, labels: Sequence[int]) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def empirical_transition(dataset: LabeledDataset) -> np.ndarray:
    """Row i is the observed-label distribution among samples whose clean label is i."""
    m = dataset.num_classes
    counts = np.zeros((m, m))
    np.add.at(counts, (dataset.clean_labels, dataset.observed_labels), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    out = np.eye(m)
    has = totals[:, 0] > 0
    out[has] = counts[has] / totals[has]
    return out
