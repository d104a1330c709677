"""Datasets, synthetic generators, file loaders, and the non-IID splitter.

Everything here is a pure function of its inputs and a seed; datasets are
immutable after construction and safe to share across parallel client
training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError

log = logging.getLogger(__name__)

# IDX element type codes (third magic byte) -> numpy dtype.
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n x d, float64) with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ContractError("features must be a non-empty 2-D array")
        if not np.all(np.isfinite(f)):
            raise ContractError("features must be finite")
        if y.shape != (f.shape[0],):
            raise ContractError("labels length must equal feature rows")
        if self.class_count < 2:
            raise ContractError("class_count must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ContractError("label out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client index lists covering a parent dataset."""

    client_shards: tuple
    alpha: float
    seed: int
    parent_size: int

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=np.int64) for s in self.client_shards)
        object.__setattr__(self, "client_shards", shards)
        joined = np.concatenate(shards) if shards else np.empty(0, dtype=np.int64)
        if len(np.unique(joined)) != joined.size:
            raise ContractError("client shards overlap")
        if joined.size != self.parent_size or (
            joined.size and set(joined.tolist()) != set(range(self.parent_size))
        ):
            raise ContractError("shards must cover every parent index exactly once")

    @property
    def client_count(self) -> int:
        return len(self.client_shards)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.client_shards]


@dataclass(frozen=True)
class ReferenceSet:
    """Held-out shared dataset plus the parent indices it came from."""

    dataset: Dataset
    parent_indices: np.ndarray

    def class_coverage(self) -> np.ndarray:
        return self.dataset.class_counts()


def synth_blobs(
    classes: int, dim: int, per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian class clusters around unit-spaced means.

    The first min(classes, dim) class means are distinct unit basis vectors;
    any further means are seeded random unit vectors. Points are the mean
    plus isotropic noise of scale ``spread``, and rows are shuffled.
    """
    if classes < 2 or dim < 2 or per_class < 1 or spread <= 0:
        raise ContractError("need classes >= 2, dim >= 2, per_class >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    for k in range(classes):
        if k < dim:
            means[k, k] = 1.0
        else:
            v = rng.normal(size=dim)
            means[k] = v / np.linalg.norm(v)
    n = classes * per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    features = means[labels] + spread * rng.normal(size=(n, dim))
    order = rng.permutation(n)
    return Dataset(features[order], labels[order], classes)


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file (1- or 3-dimensional variants)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise DataFormatError(f"{path}: empty file")
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: bad IDX magic at offset 0")
    dtype = _IDX_DTYPES.get(raw[2])
    ndim = raw[3]
    if dtype is None:
        raise DataFormatError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    if ndim not in (1, 3):
        raise DataFormatError(f"{path}: unsupported IDX rank {ndim} (want 1 or 3)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header at offset {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != header + expected:
        raise DataFormatError(
            f"{path}: payload is {len(raw) - header} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def _load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    labels = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if width is None:
                width = len(fields)
                if width < 2:
                    raise DataFormatError(f"{path}:{lineno}: need >= 2 columns")
            elif len(fields) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: ragged row, {len(fields)} fields vs {width}"
                )
            try:
                values = [float(v) for v in fields]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            lab = values[-1]
            if lab != int(lab):
                raise DataFormatError(f"{path}:{lineno}: label {lab} is not integral")
            rows.append(values[:-1])
            labels.append(int(lab))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def load_numeric(
    path, format: str, labels_path=None, class_count: int | None = None
) -> Dataset:
    """Load a dataset from disk.

    CSV: UTF-8, comma-separated, no header, integral label in the last
    column. IDX: big-endian magic-typed; ``path`` is the feature file
    (rank 3 flattens to rows, rank 1 loads as one column) and
    ``labels_path`` the rank-1 label file. Unsigned-byte features are
    rescaled to [0, 1]. K is inferred as max(label)+1 unless given.
    """
    if format == "csv":
        features, labels = _load_csv(path)
    elif format == "idx":
        if labels_path is None:
            raise DataFormatError("idx format needs labels_path (separate label file)")
        feats = read_idx(path)
        byte_valued = feats.dtype == np.dtype(">u1")
        features = np.asarray(feats, dtype=np.float64).reshape(feats.shape[0], -1)
        if byte_valued:
            features /= 255.0
        lab = read_idx(labels_path)
        if lab.ndim != 1:
            raise DataFormatError(f"{labels_path}: label file must be rank 1")
        if lab.shape[0] != features.shape[0]:
            raise DataFormatError(
                f"{labels_path}: {lab.shape[0]} labels for {features.shape[0]} rows"
            )
        labels = np.asarray(lab, dtype=np.int64)
    else:
        raise DataFormatError(f"unknown dataset format {format!r}")
    if labels.min() < 0:
        raise DataFormatError("negative label")
    k = class_count if class_count is not None else int(labels.max()) + 1
    ds = Dataset(features, labels, k)
    log.info("loaded %s: %d rows, %d features, %d classes", path, len(ds), ds.dim, k)
    return ds


def dirichlet_proportions(
    alpha: float, clients: int, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Proportion vector(s) from normalized Gamma(alpha, 1) draws."""
    shape = (clients,) if size is None else (size, clients)
    draws = rng.gamma(alpha, 1.0, size=shape)
    totals = draws.sum(axis=-1, keepdims=True)
    # Underflow guard: for very small alpha a whole row can collapse to 0.
    degenerate = totals == 0.0
    if np.any(degenerate):
        draws = np.where(degenerate, 1.0, draws)
        totals = draws.sum(axis=-1, keepdims=True)
    return draws / totals


def dirichlet_partition(
    dataset: Dataset,
    clients: int,
    alpha: float,
    seed: int,
    min_client_samples: int = 4,
) -> Partition:
    """Label-skewed split: per class, shuffled indices are cut contiguously
    at the rounded cumulative points of a Dirichlet(alpha) proportion draw.

    Starved shards are then repaired: while any shard is below
    ``min_client_samples``, one index moves from the currently largest
    shard (its most-represented class) to the smallest, all ties toward
    the lowest index. This keeps every client trainable at the cost of a
    minimal perturbation of the drawn skew.
    """
    if clients < 2:
        raise ContractError("need at least 2 clients")
    if alpha <= 0:
        raise ContractError("alpha must be > 0")
    if min_client_samples < 0:
        raise ContractError("min_client_samples must be >= 0")
    if len(dataset) < clients * min_client_samples:
        raise ContractError(
            f"infeasible min_client_samples: {clients} x {min_client_samples} "
            f"> {len(dataset)} rows"
        )
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(clients)]
    for k in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        props = dirichlet_proportions(alpha, clients, rng)
        cuts = np.round(np.cumsum(props) * idx.size).astype(np.int64)
        cuts[-1] = idx.size
        start = 0
        for c in range(clients):
            shards[c].extend(idx[start : cuts[c]].tolist())
            start = cuts[c]

    # Repair starved shards.
    while True:
        sizes = [len(s) for s in shards]
        needy = [c for c in range(clients) if sizes[c] < min_client_samples]
        if not needy:
            break
        recipient = needy[0]
        donor = int(np.argmax(sizes))  # argmax ties -> lowest index
        donor_labels = dataset.labels[np.array(shards[donor], dtype=np.int64)]
        counts = np.bincount(donor_labels, minlength=dataset.class_count)
        klass = int(np.argmax(counts))
        # take the last held index of that class, deterministically
        pos = max(i for i, j in enumerate(shards[donor]) if dataset.labels[j] == klass)
        shards[recipient].append(shards[donor].pop(pos))

    frozen = tuple(np.sort(np.array(s, dtype=np.int64)) for s in shards)
    return Partition(frozen, alpha=alpha, seed=seed, parent_size=len(dataset))


def uniform_holdout(dataset: Dataset, count: int, seed: int):
    """Uniformly sample ``count`` rows without replacement; both halves sorted."""
    n = len(dataset)
    if not 0 < count < n:
        raise ContractError(f"holdout size {count} must be in (0, {n})")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.permutation(n)[:count])
    mask = np.ones(n, dtype=bool)
    mask[chosen] = False
    remainder = np.flatnonzero(mask)
    return chosen, remainder


def holdout_reference(dataset: Dataset, ref_size: int, seed: int):
    """Hold out a shared reference set; returns (ReferenceSet, remainder)."""
    chosen, rest = uniform_holdout(dataset, ref_size, seed)
    ref = ReferenceSet(dataset.subset(chosen), parent_indices=chosen)
    log.info(
        "reference holdout: %d rows, class coverage %s",
        ref_size,
        ref.class_coverage().tolist(),
    )
    return ref, dataset.subset(rest)
