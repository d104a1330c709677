"""The knowledge-market core.

Each round, clients' logits on the shared reference set are flattened and
unit-normalized; cosine similarity between those vectors plus per-client
reference accuracy define a weighted neighbor graph; each client's teacher
is the weighted ensemble of its neighbors' temperature-softened predictions.
With all clients as neighbors, self included, and uniform weights, every
teacher collapses to the single uniformly-averaged global teacher.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ContractError, DegenerateLogitsError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarketPolicy:
    """Neighbor selection and weighting rules for teacher construction."""

    neighbor_mode: str = "knn"  # "knn" | "full"
    k: int = 5
    include_self: bool = False
    weighting: str = "similarity_accuracy"  # | "uniform"
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.neighbor_mode not in ("knn", "full"):
            raise ContractError(f"neighbor_mode must be knn or full, got {self.neighbor_mode!r}")
        if self.neighbor_mode == "knn" and self.k <= 0:
            raise ContractError(f"k must be > 0, got {self.k}")
        if self.weighting not in ("similarity_accuracy", "uniform"):
            raise ContractError(f"unknown weighting {self.weighting!r}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class MarketGraph:
    """One round's similarity matrix, accuracies, neighbor sets and weights."""

    similarity: np.ndarray  # C x C, symmetric, unit diagonal
    accuracy: np.ndarray  # C, reference accuracies in [0, 1]
    neighbors: list  # per client: sorted int list
    weights: list  # per client: float64 vector aligned to neighbors
    policy: MarketPolicy

    @property
    def client_count(self) -> int:
        return self.similarity.shape[0]


@dataclass(frozen=True)
class TeacherSet:
    """Per-client teacher distributions over the reference set."""

    teachers: tuple  # per client: (N_ref x K) probability rows
    temperature: float


def flatten_normalize(logits: np.ndarray) -> np.ndarray:
    """Row-major flatten of a logits matrix, scaled to unit L2 norm."""
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("logits must be finite")
    vec = arr.ravel(order="C")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegenerateLogitsError("all-zero logits cannot be normalized")
    return vec / norm


def similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise dot products of unit vectors: symmetric, unit diagonal."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("similarity_matrix expects unit-norm vectors")
    s = v @ v.T
    s = 0.5 * (s + s.T)
    np.clip(s, -1.0, 1.0, out=s)
    np.fill_diagonal(s, 1.0)
    return s


def reference_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label (ties -> lowest class)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != logits.shape[0]:
        raise ContractError("labels length must equal logits rows")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def select_neighbors(similarity: np.ndarray, i: int, policy: MarketPolicy) -> list[int]:
    """Neighbor set for client i under the policy, sorted ascending.

    kNN keeps the k largest off-diagonal similarities (ties toward the
    lower client index, k capped at C-1); full keeps every other client.
    Client i itself is included iff the policy says so.
    """
    c = similarity.shape[0]
    if c < 2:
        raise ContractError("need at least 2 clients to select neighbors")
    others = [j for j in range(c) if j != i]
    if policy.neighbor_mode == "full":
        chosen = others
    else:
        ranked = sorted(others, key=lambda j: (-similarity[i, j], j))
        chosen = ranked[: min(policy.k, len(others))]
    if policy.include_self:
        chosen = chosen + [i]
    return sorted(chosen)


def market_weights(
    similarity_row: np.ndarray,
    accuracy: np.ndarray,
    neighbors,
    epsilon: float,
    weighting: str = "similarity_accuracy",
) -> np.ndarray:
    """Normalized teacher weights over a neighbor set.

    similarity_accuracy: w ~ max(S_ij, 0) * max(acc_j, epsilon), normalized
    to sum 1. If every similarity is clipped to zero the weights fall back
    to uniform (logged). uniform: 1/|neighbors|.
    """
    if len(neighbors) == 0:
        raise ContractError("empty neighbor set")
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    m = len(neighbors)
    if weighting == "uniform":
        return np.full(m, 1.0 / m)
    if weighting != "similarity_accuracy":
        raise ContractError(f"unknown weighting {weighting!r}")
    idx = np.asarray(neighbors, dtype=np.int64)
    raw = np.maximum(similarity_row[idx], 0.0) * np.maximum(accuracy[idx], epsilon)
    total = raw.sum()
    if total == 0.0:
        log.warning(
            "all similarities clipped to zero over neighbors %s; using uniform weights",
            list(neighbors),
        )
        return np.full(m, 1.0 / m)
    return raw / total


def teacher_ensemble(neighbor_logits, weights: np.ndarray, temperature: float) -> np.ndarray:
    """Weighted ensemble of neighbors' temperature-softened predictions."""
    stack = np.ascontiguousarray(np.stack(neighbor_logits), dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if stack.shape[0] != weights.shape[0]:
        raise ContractError("one weight per neighbor matrix required")
    if temperature <= 0:
        raise ContractError("temperature must be > 0")
    return K.ensemble_probs(stack, weights, temperature)


def fedmd_global_teacher(all_logits, temperature: float) -> np.ndarray:
    """Uniform average of every client's softened predictions."""
    count = len(all_logits)
    if count < 1:
        raise ContractError("need at least one client")
    return teacher_ensemble(all_logits, np.full(count, 1.0 / count), temperature)


def build_market(all_logits, ref_labels: np.ndarray, policy: MarketPolicy) -> MarketGraph:
    """Assemble the round's market graph from every client's reference logits."""
    vectors = np.stack([flatten_normalize(z) for z in all_logits])
    sim = similarity_matrix(vectors)
    acc = np.array([reference_accuracy(z, ref_labels) for z in all_logits])
    neighbors = []
    weights = []
    for i in range(sim.shape[0]):
        hood = select_neighbors(sim, i, policy)
        neighbors.append(hood)
        weights.append(
            market_weights(sim[i], acc, hood, policy.epsilon, policy.weighting)
        )
    return MarketGraph(sim, acc, neighbors, weights, policy)


def build_teachers(graph: MarketGraph, all_logits, temperature: float) -> TeacherSet:
    """Per-client teacher ensembles from a market graph."""
    teachers = tuple(
        teacher_ensemble([all_logits[j] for j in hood], w, temperature)
        for hood, w in zip(graph.neighbors, graph.weights)
    )
    return TeacherSet(teachers, temperature)


def dump_market_csv(graph: MarketGraph, out_dir, round_index: int) -> None:
    """Write the round's similarity matrix, accuracies and weights as CSV."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"market_round{round_index:04d}.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("kind,i,j,value\n")
        c = graph.client_count
        for i in range(c):
            for j in range(c):
                fh.write(f"similarity,{i},{j},{graph.similarity[i, j]:.6g}\n")
        for i in range(c):
            fh.write(f"accuracy,{i},,{graph.accuracy[i]:.6g}\n")
        for i in range(c):
            for j, w in zip(graph.neighbors[i], graph.weights[i]):
                fh.write(f"weight,{i},{j},{w:.6g}\n")
