"""Synthetic datasets, the three initial partitioners and label-distribution metrics."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import DataBatch


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] != labels.shape[0]:
            raise ContractError("inputs must be an (S, d) matrix matching the labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def as_batch(self):
        return DataBatch(self.inputs, self.labels)


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint shards (index arrays into a parent dataset), one per vehicle.

    ``edge_assignment`` is only set by the edge non-i.i.d. partitioner; the
    other cases leave initial placement to the caller.
    """

    shards: tuple
    case: str
    edge_assignment: np.ndarray | None = None
    classes_used: tuple = field(default=())

    @property
    def num_vehicles(self):
        return len(self.shards)

    @property
    def sizes(self):
        return np.array([len(s) for s in self.shards], dtype=np.int64)

    @property
    def covered(self):
        return int(self.sizes.sum())

    def all_indices(self):
        return np.concatenate(self.shards)


def class_means(C, d, separation):
    """Deterministic class centres with pairwise distance >= ``separation``.

    For ``C <= d`` the centres are scaled basis vectors, which puts every pair at
    exactly ``separation``. Otherwise they sit on an integer lattice with
    spacing ``separation``.
    """
    means = np.zeros((C, d))
    if C <= d:
        means[np.arange(C), np.arange(C)] = separation / math.sqrt(2.0)
        return means
    base = math.ceil(C ** (1.0 / d))
    while base ** d < C:
        base += 1
    for c in range(C):
        digits, rem = [], c
        for _ in range(d):
            digits.append(rem % base)
            rem //= base
        means[c] = separation * np.array(digits, dtype=np.float64)
    return means


def generate_synthetic(C, d, per_class, separation, seed, offset=0.0, split=0):
    """Unit-variance Gaussian blobs, exactly ``per_class`` samples per class,
    ordered by class.

    ``offset`` is added to every coordinate of every class centre. Uncentred
    features leave a centralised learner unaffected but make models trained
    on single classes disagree, which is what edge-level label skew exposes.
    """
    if C < 2 or d < 2 or per_class < 1 or not separation > 0:
        raise ConfigError("generate_synthetic needs C >= 2, d >= 2, per_class >= 1, separation > 0")
    rng = np.random.default_rng([int(seed), 0xDA7A, int(split)])
    means = class_means(C, d, separation) + float(offset)
    labels = np.repeat(np.arange(C), per_class)
    inputs = means[labels] + rng.standard_normal((C * per_class, d))
    return LabeledDataset(inputs, labels, C)


def _split_even(indices, parts):
    """Split into ``parts`` consecutive chunks whose sizes differ by at most one;
    the first ``len % parts`` chunks get the extra element."""
    n = len(indices)
    q, r = divmod(n, parts)
    out, start = [], 0
    for i in range(parts):
        size = q + (1 if i < r else 0)
        out.append(np.asarray(indices[start:start + size], dtype=np.int64))
        start += size
    return out


def partition_iid(dataset, M, seed):
    S = len(dataset)
    if M < 1 or M > S:
        raise ConfigError(f"need 1 <= M <= S, got M={M}, S={S}", key="M")
    perm = np.random.default_rng([int(seed), 0x11D]).permutation(S)
    shards = _split_even(perm, M)
    used = tuple(int(c) for c in np.unique(dataset.labels))
    return PartitionPlan(tuple(shards), "iid", None, used)


def partition_local_niid(dataset, M, l, seed):
    """Sort by label, cut every class into ``M*l/C`` chunks and give each vehicle
    ``l`` chunks from ``l`` distinct classes (vehicle ``m`` takes chunks
    ``m, m+M, ..., m+(l-1)M`` of the class-major chunk list)."""
    C = dataset.num_classes
    if not 1 <= l <= C:
        raise ConfigError(f"l must be in [1, C={C}]", key="l")
    if (M * l) % C:
        raise ConfigError(f"local non-i.i.d. needs M*l divisible by C (M={M}, l={l}, C={C})", key="l")
    per_class_chunks = M * l // C
    rng = np.random.default_rng([int(seed), 0x10CA1])
    counts = np.bincount(dataset.labels, minlength=C)
    if len(set(counts.tolist())) != 1:
        warnings.warn("classes are unbalanced; local non-i.i.d. shards will differ in size")
    chunks = []
    for c in range(C):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < per_class_chunks:
            raise ConfigError(f"class {c} has {len(members)} samples, fewer than its {per_class_chunks} chunks")
        chunks.extend(_split_even(rng.permutation(members), per_class_chunks))
    shards = [np.concatenate([chunks[m + k * M] for k in range(l)]) for m in range(M)]
    used = tuple(int(c) for c in range(C) if counts[c] > 0)
    return PartitionPlan(tuple(shards), f"local_niid({l})", None, used)


def partition_edge_niid(dataset, N, M, l, seed):
    """Edge ``n`` owns the sorted classes ``[n*l, (n+1)*l)``; its pool is split
    evenly among vehicles ``n*M/N .. (n+1)*M/N - 1``, which start on edge ``n``."""
    C = dataset.num_classes
    if N < 1 or l < 1:
        raise ConfigError("edge non-i.i.d. needs N >= 1 and l >= 1")
    if N * l > C:
        raise ConfigError(f"edge non-i.i.d. needs N*l <= C (N={N}, l={l}, C={C})", key="l")
    if C % (N * l):
        raise ConfigError(f"edge non-i.i.d. needs C divisible by N*l (N={N}, l={l}, C={C})", key="l")
    if M % N:
        raise ConfigError(f"edge non-i.i.d. needs M divisible by N (M={M}, N={N})", key="M")
    if N * l < C:
        warnings.warn(f"edge non-i.i.d. uses {N * l} of {C} classes; "
                      f"classes {N * l}..{C - 1} are left unassigned")
    per_edge = M // N
    shards = []
    assignment = np.repeat(np.arange(N), per_edge)
    for n in range(N):
        classes = np.arange(n * l, (n + 1) * l)
        pool = np.flatnonzero(np.isin(dataset.labels, classes))
        if len(pool) < per_edge:
            raise ConfigError(f"edge {n} pool has {len(pool)} samples for {per_edge} vehicles")
        perm = np.random.default_rng([int(seed), 0xED6E, n]).permutation(pool)
        shards.extend(_split_even(perm, per_edge))
    used = tuple(range(N * l))
    return PartitionPlan(tuple(shards), f"edge_niid({l})", assignment, used)


def label_distribution(labels, C):
    """Empirical class frequencies of a shard or pool (an index-free label array
    or anything with a ``labels`` attribute)."""
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    if labels.size == 0:
        raise ContractError("label distribution of an empty set is undefined")
    return np.bincount(labels, minlength=C).astype(np.float64) / labels.size


def probability_difference(p, q):
    """L1 distance between two label distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"distributions have different lengths: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def edge_label_distributions(labels, plan, assignment, N, C):
    """Per-edge pooled label distribution and data weight ``theta``.

    Rows of empty edges are NaN with theta 0.
    """
    assignment = np.asarray(assignment)
    counts = np.zeros((N, C))
    for m, shard in enumerate(plan.shards):
        counts[assignment[m]] += np.bincount(labels[shard], minlength=C)
    totals = counts.sum(axis=1)
    theta = totals / totals.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        dists = counts / totals[:, None]
    return dists, theta


def write_dataset_csv(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def read_dataset_csv(path, num_classes=None):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise ConfigError(f"{path}: header must end with a 'label' column")
        d = len(header) - 1
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise ConfigError(f"{path}: expected {d + 1} fields, got {len(row)}", line=lineno)
            try:
                xs.append([float(v) for v in row[:-1]])
                ys.append(int(row[-1]))
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}", line=lineno) from None
    labels = np.array(ys, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(np.array(xs, dtype=np.float64).reshape(len(ys), d), labels, num_classes)
