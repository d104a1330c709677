"""Round orchestration for the five algorithms, communication metering,
and the experiment runner.

A round is two-staged for the prediction-exchange algorithms: every client
first trains on its private shard, then (after a barrier at which all
reference-set logits are collected) distills from its teacher. Parameter
algorithms instead install the server model, train locally and upload for
weighted averaging. All phases are deterministic functions of the client
states and their private RNG streams, so running clients in parallel
cannot change results.
"""
from __future__ import annotations

import copy
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, dirichlet_partition, holdout_reference, load_numeric, synth_blobs, uniform_holdout
from .errors import ContractError
from .market import (
    MarketGraph,
    MarketPolicy,
    TeacherSet,
    build_market,
    build_teachers,
    dump_market_csv,
    fedmd_global_teacher,
    reference_accuracy,
)
from .nncore import MlpModel, OptimizerState, cross_entropy, kl_distill, optimizer_step

log = logging.getLogger(__name__)

ALGORITHMS = ("local", "fedavg", "fedprox", "fedmd", "kta_v2")

SCALAR_BYTES = 4  # metering models float32 payloads
PAYLOAD_KINDS = ("params_down", "params_up", "logits_up", "teacher_down")
UPLINK_KINDS = frozenset({"params_up", "logits_up"})

# Seed-derivation tags: every randomized stage of a run draws from its own
# stream derived from (root seed, tag[, client id]).
TAG_DATA, TAG_TEST, TAG_REF, TAG_PART, TAG_SERVER, TAG_CLIENT = range(101, 107)


def derive_seed(root: int, *tags: int) -> int:
    return int(np.random.SeedSequence((root, *tags)).generate_state(1)[0])


def derive_rng(root: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((root, *tags)))


class CommLedger:
    """Exact byte accounting per (round, client, payload kind).

    Counts are integers (scalar count x 4 bytes); totals are integer sums,
    never float accumulations.
    """

    def __init__(self):
        self._events: dict[tuple[int, int, str], int] = {}

    def add(self, round_index: int, client_id: int, payload: str, scalar_count: int) -> None:
        if payload not in PAYLOAD_KINDS:
            raise ContractError(f"unknown payload kind {payload!r}")
        if scalar_count < 0:
            raise ContractError("scalar_count must be >= 0")
        key = (round_index, client_id, payload)
        self._events[key] = self._events.get(key, 0) + scalar_count * SCALAR_BYTES

    def rows(self):
        """Sorted (round, client, payload, bytes) tuples."""
        return [(r, c, p, b) for (r, c, p), b in sorted(self._events.items())]

    def total_bytes(self, view: str = "both") -> int:
        if view == "both":
            return sum(self._events.values())
        if view == "uplink_only":
            return sum(b for (_, _, p), b in self._events.items() if p in UPLINK_KINDS)
        if view == "downlink_only":
            return sum(b for (_, _, p), b in self._events.items() if p not in UPLINK_KINDS)
        raise ContractError(f"unknown metering view {view!r}")

    def client_cumulative(self, client_id: int, through_round: int, uplink: bool) -> int:
        return sum(
            b
            for (r, c, p), b in self._events.items()
            if c == client_id and r <= through_round and (p in UPLINK_KINDS) == uplink
        )


@dataclass
class RoundPlan:
    """Per-round schedule and hyperparameters; all fields are validated
    even when the chosen algorithm ignores them."""

    algorithm: str
    rounds_total: int = 10
    e_local: int = 1
    e_distill: int = 5
    batch_size: int = 64
    lam: float = 0.5
    temperature: float = 2.0
    prox_mu: float = 0.01
    optimizer: str = "adam"
    lr: float = 1e-3
    market: MarketPolicy = field(default_factory=MarketPolicy)
    bn_safe: bool = True
    reset_optimizer_on_install: bool = True
    track_consensus: bool = False

    def __post_init__(self):
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.rounds_total < 0:
            problems.append("rounds_total must be >= 0")
        if self.e_local < 1:
            problems.append("e_local must be >= 1")
        if self.e_distill < 0:
            problems.append("e_distill must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            problems.append("lam must be in [0, 1]")
        if self.temperature <= 0:
            problems.append("temperature must be > 0")
        if self.prox_mu < 0:
            problems.append("prox_mu must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if problems:
            raise ContractError("; ".join(problems))


@dataclass
class ClientState:
    """One simulated device: model, optimizer, private shard, RNG stream."""

    id: int
    model: MlpModel
    optimizer: OptimizerState
    shard: np.ndarray
    rng: np.random.Generator
    skipped_update_count: int = 0
    applied_update_count: int = 0

    def snapshot(self):
        return (
            self.model.get_params(),
            self.model.get_buffers(),
            self.optimizer.snapshot(),
            copy.deepcopy(self.rng.bit_generator.state),
            self.skipped_update_count,
            self.applied_update_count,
        )

    def restore(self, snap) -> None:
        params, buffers, opt, rng_state, skipped, applied = snap
        self.model.set_params(params)
        self.model.set_buffers(buffers)
        self.optimizer.restore(opt)
        self.rng.bit_generator.state = copy.deepcopy(rng_state)
        self.skipped_update_count = skipped
        self.applied_update_count = applied


@dataclass
class ServerState:
    """Server-side state; only parameter-averaging algorithms use it."""

    global_params: np.ndarray | None = None

    def snapshot(self):
        return None if self.global_params is None else self.global_params.copy()

    def restore(self, snap) -> None:
        self.global_params = snap


@dataclass
class RoundMetrics:
    round_index: int
    client_ids: list
    client_test_acc: list
    client_test_loss: list
    client_ref_acc: list
    client_shard_sizes: list
    mean_acc: float
    weighted_acc: float
    mean_loss: float
    acc_variance: float
    comm_up_cum: list  # per client, cumulative uplink bytes through this round
    comm_down_cum: list


@dataclass
class RoundResult:
    metrics: RoundMetrics
    graph: MarketGraph | None = None
    teachers: TeacherSet | None = None
    dispersion_before: float | None = None
    dispersion_after: float | None = None


def _map_clients(fn, clients, workers: int):
    """Apply fn to every client, preserving input order.

    Each client's state is owned by exactly one task, and every client
    consumes only its own RNG stream, so the result is independent of
    worker count and scheduling.
    """
    if workers <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


def _sgd_step_on_batch(client, x, y, plan, anchor):
    model = client.model
    logits = model.forward(x, "train")
    _, dlogits = cross_entropy(logits, y)
    model.zero_grads()
    model.backward(dlogits)
    if anchor is not None and plan.prox_mu > 0:
        model.grads += plan.prox_mu * (model.params - anchor)
    optimizer_step(client.optimizer, model.params, model.grads)


def local_phase(client: ClientState, train_data: Dataset, plan: RoundPlan,
                global_params: np.ndarray | None = None) -> ClientState:
    """Supervised epochs on the client's private shard.

    Shuffling comes from the client's own RNG. Any batch of size <= 1 is
    skipped and counted (the BN-safe rule); with ``plan.bn_safe`` off such
    batches are attempted anyway, which is a contract violation for models
    with BatchNorm. With FedProx, ``global_params`` anchors the proximal
    term at the round-start global model.
    """
    if client.shard.size == 0:
        raise ContractError("client shard is empty")
    applied_before = client.applied_update_count
    for _ in range(plan.e_local):
        order = client.rng.permutation(client.shard.size)
        for start in range(0, client.shard.size, plan.batch_size):
            take = order[start : start + plan.batch_size]
            if take.size <= 1 and plan.bn_safe:
                client.skipped_update_count += 1
                continue
            rows = client.shard[take]
            _sgd_step_on_batch(
                client, train_data.features[rows], train_data.labels[rows], plan, global_params
            )
            client.applied_update_count += 1
    if client.applied_update_count == applied_before:
        log.debug("client %d applied no updates this phase (shard size %d)",
                  client.id, client.shard.size)
    return client


def evaluate_on_reference(client: ClientState, reference: Dataset) -> np.ndarray:
    """Eval-mode logits over the reference set; mutates nothing."""
    if len(reference) == 0:
        raise ContractError("reference set is empty")
    return client.model.forward(reference.features, "eval")


def distill_phase(client: ClientState, teacher_probs: np.ndarray, reference: Dataset,
                  plan: RoundPlan) -> ClientState:
    """Mixed supervised+distillation epochs over the reference set.

    Minimizes (1-lam)*CE(reference labels) + lam*T^2*KL(student || teacher),
    with teacher rows aligned to the sampled reference positions and held
    constant for the whole phase. One forward serves both terms.
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    if teacher_probs.shape != (len(reference), client.model.class_count):
        raise ContractError(
            f"teacher must be {(len(reference), client.model.class_count)}, "
            f"got {teacher_probs.shape}"
        )
    lam, temp = plan.lam, plan.temperature
    model = client.model
    for _ in range(plan.e_distill):
        order = client.rng.permutation(len(reference))
        for start in range(0, len(reference), plan.batch_size):
            take = order[start : start + plan.batch_size]
            if take.size <= 1 and plan.bn_safe:
                client.skipped_update_count += 1
                continue
            logits = model.forward(reference.features[take], "train")
            dlogits = np.zeros_like(logits)
            if lam < 1.0:
                _, dce = cross_entropy(logits, reference.labels[take])
                dlogits += (1.0 - lam) * dce
            if lam > 0.0:
                _, dkl = kl_distill(logits, teacher_probs[take], temp)
                dlogits += lam * temp * temp * dkl
            model.zero_grads()
            model.backward(dlogits)
            optimizer_step(client.optimizer, model.params, model.grads)
            client.applied_update_count += 1
    return client


def fedavg_aggregate(param_vectors, sizes) -> np.ndarray:
    """Average parameter vectors with weights proportional to shard sizes."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(param_vectors) != sizes.size or sizes.size == 0:
        raise ContractError("one size per parameter vector required")
    if np.any(sizes <= 0):
        raise ContractError("sizes must be positive")
    if len({v.shape for v in param_vectors}) != 1:
        raise ContractError("parameter vectors must have equal length")
    stacked = np.stack(param_vectors)
    weights = sizes / sizes.sum()
    return weights @ stacked


def market_dispersion(logit_list, graph: MarketGraph) -> float:
    """Weighted-graph quadratic form: sum_i sum_{j in N(i)} w_ij ||Z_i - Z_j||^2."""
    total = 0.0
    for i, (hood, weights) in enumerate(zip(graph.neighbors, graph.weights)):
        for j, w in zip(hood, weights):
            diff = logit_list[i] - logit_list[j]
            total += float(w) * float(np.sum(diff * diff))
    return total


def consensus_diagnostic(logits_before, logits_after, graph: MarketGraph):
    """Market-graph logit dispersion before and after a distillation phase."""
    if len(logits_before) != len(logits_after) or len(logits_before) != graph.client_count:
        raise ContractError("logit lists must align with the graph")
    for a, b in zip(logits_before, logits_after):
        if a.shape != b.shape:
            raise ContractError("before/after logit shapes must match")
    return market_dispersion(logits_before, graph), market_dispersion(logits_after, graph)


def _evaluate_clients(clients, reference: Dataset, test_data: Dataset, workers: int):
    def one(client):
        t_logits = client.model.forward(test_data.features, "eval")
        acc = float(np.mean(np.argmax(t_logits, axis=1) == test_data.labels))
        loss, _ = cross_entropy(t_logits, test_data.labels)
        r_logits = client.model.forward(reference.features, "eval")
        return acc, loss, reference_accuracy(r_logits, reference.labels)

    return _map_clients(one, clients, workers)


def _round_metrics(clients, reference, test_data, ledger, round_index, workers):
    evals = _evaluate_clients(clients, reference, test_data, workers)
    accs = [e[0] for e in evals]
    losses = [e[1] for e in evals]
    refs = [e[2] for e in evals]
    sizes = [int(c.shard.size) for c in clients]
    total = float(sum(sizes))
    weighted = float(sum(a * s for a, s in zip(accs, sizes)) / total)
    mean_acc = float(np.mean(accs))
    return RoundMetrics(
        round_index=round_index,
        client_ids=[c.id for c in clients],
        client_test_acc=accs,
        client_test_loss=losses,
        client_ref_acc=refs,
        client_shard_sizes=sizes,
        mean_acc=mean_acc,
        weighted_acc=weighted,
        mean_loss=float(np.mean(losses)),
        acc_variance=float(np.mean((np.asarray(accs) - mean_acc) ** 2)),
        comm_up_cum=[ledger.client_cumulative(c.id, round_index, True) for c in clients],
        comm_down_cum=[ledger.client_cumulative(c.id, round_index, False) for c in clients],
    )


def run_round(
    clients,
    server: ServerState,
    plan: RoundPlan,
    round_index: int,
    train_data: Dataset,
    reference: Dataset,
    test_data: Dataset,
    ledger: CommLedger,
    workers: int = 1,
) -> RoundResult:
    """Execute one federated round; on any phase error, every client and
    the server are rolled back to their round-start snapshots."""
    snaps = [c.snapshot() for c in clients]
    server_snap = server.snapshot()
    try:
        graph = None
        teachers = None
        disp_before = disp_after = None
        alg = plan.algorithm

        if alg == "local":
            _map_clients(lambda c: local_phase(c, train_data, plan), clients, workers)

        elif alg in ("fedavg", "fedprox"):
            if server.global_params is None:
                raise ContractError("parameter averaging needs server global params")
            anchor = server.global_params.copy()
            for c in clients:
                ledger.add(round_index, c.id, "params_down", c.model.param_count)
                c.model.set_params(server.global_params)
                if plan.reset_optimizer_on_install:
                    c.optimizer.reset_moments()
            prox = anchor if alg == "fedprox" else None
            _map_clients(lambda c: local_phase(c, train_data, plan, prox), clients, workers)
            for c in clients:
                ledger.add(round_index, c.id, "params_up", c.model.param_count)
            server.global_params = fedavg_aggregate(
                [c.model.get_params() for c in clients],
                [c.shard.size for c in clients],
            )

        elif alg in ("fedmd", "kta_v2"):
            _map_clients(lambda c: local_phase(c, train_data, plan), clients, workers)
            # Barrier: all logits are collected before any teacher is built.
            logits = _map_clients(lambda c: evaluate_on_reference(c, reference), clients, workers)
            payload = len(reference) * clients[0].model.class_count
            for c in clients:
                ledger.add(round_index, c.id, "logits_up", payload)
            if alg == "fedmd":
                global_teacher = fedmd_global_teacher(logits, plan.temperature)
                teachers = TeacherSet(tuple(global_teacher for _ in clients), plan.temperature)
            else:
                graph = build_market(logits, reference.labels, plan.market)
                teachers = build_teachers(graph, logits, plan.temperature)
                if plan.track_consensus:
                    disp_before = market_dispersion(logits, graph)
            for c in clients:
                ledger.add(round_index, c.id, "teacher_down", payload)
            _map_clients(
                lambda c: distill_phase(c, teachers.teachers[c.id], reference, plan),
                clients,
                workers,
            )
            if graph is not None and plan.track_consensus:
                after = _map_clients(
                    lambda c: evaluate_on_reference(c, reference), clients, workers
                )
                disp_after = market_dispersion(after, graph)

        else:
            raise ContractError(f"unknown algorithm {alg!r}")

        metrics = _round_metrics(clients, reference, test_data, ledger, round_index, workers)
        return RoundResult(metrics, graph, teachers, disp_before, disp_after)
    except Exception:
        for c, s in zip(clients, snaps):
            c.restore(s)
        server.restore(server_snap)
        raise


# ---------------------------------------------------------------------------
# Experiment runner


@dataclass
class SeedRun:
    seed: int
    metrics: list  # RoundMetrics, index 0 = initialization evaluation
    ledger: CommLedger
    dispersions: list  # (before, after) per training round, None entries if untracked
    skipped_updates: int
    applied_updates: int
    param_count: int

    @property
    def final_mean_acc(self) -> float:
        return self.metrics[-1].mean_acc

    @property
    def final_weighted_acc(self) -> float:
        return self.metrics[-1].weighted_acc


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seed_runs: list

    def final_accs(self) -> list:
        return [run.final_mean_acc for run in self.seed_runs]

    def acc_mean_std(self) -> tuple[float, float]:
        accs = np.asarray(self.final_accs())
        return float(accs.mean()), float(accs.std())  # population std

    def comm_bytes(self, view: str) -> int:
        return self.seed_runs[0].ledger.total_bytes(view) if self.seed_runs else 0

    def skipped_fraction(self) -> float:
        skipped = sum(r.skipped_updates for r in self.seed_runs)
        applied = sum(r.applied_updates for r in self.seed_runs)
        return skipped / max(1, skipped + applied)


def _build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.data_source == "blobs":
        return synth_blobs(
            cfg.data_classes,
            cfg.data_dim,
            cfg.data_per_class,
            cfg.data_spread,
            derive_seed(seed, TAG_DATA),
        )
    return load_numeric(cfg.data_path, cfg.data_source, labels_path=cfg.data_labels_path)


def build_world(cfg: ExperimentConfig, seed: int):
    """Dataset pipeline for one seed: full -> test split -> reference
    holdout -> Dirichlet client partition. All three subsets are pairwise
    disjoint by construction."""
    full = _build_dataset(cfg, seed)
    test_count = max(1, int(round(cfg.data_test_fraction * len(full))))
    test_idx, rest_idx = uniform_holdout(full, test_count, derive_seed(seed, TAG_TEST))
    test_data = full.subset(test_idx)
    pool = full.subset(rest_idx)
    ref, train_pool = holdout_reference(pool, cfg.data_ref_size, derive_seed(seed, TAG_REF))
    partition = dirichlet_partition(
        train_pool,
        cfg.clients,
        cfg.partition_alpha,
        derive_seed(seed, TAG_PART),
        cfg.data_min_client_samples,
    )
    return full, train_pool, ref.dataset, test_data, partition


def make_clients(cfg: ExperimentConfig, seed: int, partition, input_dim: int,
                 class_count: int) -> list:
    clients = []
    for i in range(cfg.clients):
        rng = derive_rng(seed, TAG_CLIENT, i)
        model = MlpModel(input_dim, cfg.model_hidden, class_count,
                         batchnorm=cfg.model_batchnorm, rng=rng)
        opt = OptimizerState.for_model(cfg.train_optimizer, cfg.train_lr, model.param_count)
        clients.append(ClientState(i, model, opt, partition.client_shards[i], rng))
    return clients


def make_server(cfg: ExperimentConfig, seed: int, input_dim: int,
                class_count: int) -> ServerState:
    if cfg.algorithm in ("fedavg", "fedprox"):
        rng = derive_rng(seed, TAG_SERVER)
        model = MlpModel(input_dim, cfg.model_hidden, class_count,
                         batchnorm=cfg.model_batchnorm, rng=rng)
        return ServerState(model.get_params())
    return ServerState(None)


def run_seed(cfg: ExperimentConfig, seed: int, workers: int = 1,
             out_dir=None) -> SeedRun:
    plan = cfg.to_round_plan()
    full, train_pool, reference, test_data, partition = build_world(cfg, seed)
    clients = make_clients(cfg, seed, partition, full.dim, full.class_count)
    server = make_server(cfg, seed, full.dim, full.class_count)
    ledger = CommLedger()
    metrics = [_round_metrics(clients, reference, test_data, ledger, 0, workers)]
    dispersions = []
    for round_index in range(1, plan.rounds_total + 1):
        result = run_round(
            clients, server, plan, round_index, train_pool, reference, test_data,
            ledger, workers,
        )
        metrics.append(result.metrics)
        dispersions.append((result.dispersion_before, result.dispersion_after))
        if result.graph is not None and cfg.market_dump and out_dir is not None:
            dump_market_csv(result.graph, Path(out_dir) / f"seed{seed}", round_index)
        if cfg.checkpoint_every and round_index % cfg.checkpoint_every == 0 and out_dir is not None:
            path = Path(out_dir) / "checkpoints" / f"seed{seed}_round{round_index:04d}.ckpt"
            write_checkpoint(
                path, cfg.config_hash(), seed, round_index,
                [c.model.get_params() for c in clients],
            )
    return SeedRun(
        seed=seed,
        metrics=metrics,
        ledger=ledger,
        dispersions=dispersions,
        skipped_updates=sum(c.skipped_update_count for c in clients),
        applied_updates=sum(c.applied_update_count for c in clients),
        param_count=clients[0].model.param_count,
    )


def run_experiment(cfg: ExperimentConfig, workers: int = 1, out_dir=None) -> ExperimentResult:
    """Run every configured seed; deterministic per seed and worker-count
    independent. Config validation happens exhaustively at parse time."""
    runs = [run_seed(cfg, seed, workers, out_dir) for seed in cfg.seeds]
    return ExperimentResult(cfg, runs)


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary round-state dumps.
#
# Layout (little-endian): magic "FMCKPT01" | u32 version | 32-byte config
# hash (sha256) | u64 seed | u32 round | u32 client count C | u64 parameter
# count P | C consecutive parameter vectors, each P float64 values.

CHECKPOINT_MAGIC = b"FMCKPT01"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<I32sQIIQ")


def write_checkpoint(path, config_hash: bytes, seed: int, round_index: int, param_vectors) -> None:
    if len(config_hash) != 32:
        raise ContractError("config hash must be 32 bytes (sha256)")
    vectors = [np.ascontiguousarray(v, dtype="<f8") for v in param_vectors]
    if not vectors:
        raise ContractError("need at least one parameter vector")
    p = vectors[0].size
    if any(v.size != p for v in vectors):
        raise ContractError("parameter vectors must share one length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_CKPT_HEAD.pack(CHECKPOINT_VERSION, config_hash, seed, round_index, len(vectors), p))
        for v in vectors:
            fh.write(v.tobytes())


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, config_hash, seed, round_index, count, p = _CKPT_HEAD.unpack_from(
        raw, len(CHECKPOINT_MAGIC)
    )
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=len(CHECKPOINT_MAGIC) + _CKPT_HEAD.size)
    if body.size != count * p:
        raise ContractError(f"{path}: truncated checkpoint body")
    return {
        "version": version,
        "config_hash": config_hash,
        "seed": seed,
        "round": round_index,
        "params": [body[i * p : (i + 1) * p].copy() for i in range(count)],
    }
