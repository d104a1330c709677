"""Experiment configuration: flat dotted-key text files, strict schema.

Files contain ``key = value`` lines (UTF-8, ``#`` starts a comment line,
blank lines ignored). Every key must be in the schema below; unknown keys
are rejected. Precedence: built-in defaults < config file < environment
variables (``FEDMARKET_<KEY>`` with dots as underscores, uppercased) <
explicit CLI overrides. Validation is exhaustive: every problem found is
reported before any work starts.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "FEDMARKET_"
# Backend selection is handled at import time, not by the experiment schema.
_ENV_IGNORE = {"FEDMARKET_KERNELS"}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _parse_int_list(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v.strip()) for v in raw.split(","))


def _parse_str(raw: str) -> str:
    return raw.strip()


@dataclass(frozen=True)
class _Key:
    attr: str
    parse: object
    default: object
    doc: str
    check: object = None  # value -> error string or None


def _positive(v):
    return None if v > 0 else f"must be > 0 (got {v})"


def _nonneg(v):
    return None if v >= 0 else f"must be >= 0 (got {v})"


def _at_least(n):
    return lambda v: None if v >= n else f"must be >= {n} (got {v})"


def _in_range_open(lo, hi):
    return lambda v: None if lo < v < hi else f"must be in ({lo}, {hi}) (got {v})"


def _in_range_closed(lo, hi):
    return lambda v: None if lo <= v <= hi else f"must be in [{lo}, {hi}] (got {v})"


def _choice(*options):
    return lambda v: None if v in options else f"must be one of {options} (got {v!r})"


def _nonempty(v):
    return None if len(v) > 0 else "must not be empty"


SCHEMA: dict[str, _Key] = {
    # dataset
    "data.source": _Key("data_source", _parse_str, "blobs",
                        "dataset source: blobs | csv | idx", _choice("blobs", "csv", "idx")),
    "data.path": _Key("data_path", _parse_str, "",
                      "feature/data file path (csv and idx sources)"),
    "data.labels_path": _Key("data_labels_path", _parse_str, "",
                             "label file path (idx source only)"),
    "data.classes": _Key("data_classes", int, 3,
                         "blob generator: number of classes", _at_least(2)),
    "data.dim": _Key("data_dim", int, 8,
                     "blob generator: feature dimension", _at_least(2)),
    "data.per_class": _Key("data_per_class", int, 400,
                           "blob generator: samples per class", _at_least(1)),
    "data.spread": _Key("data_spread", float, 0.5,
                        "blob generator: Gaussian noise scale", _positive),
    "data.test_fraction": _Key("data_test_fraction", float, 0.25,
                               "fraction of rows held out as the shared test set",
                               _in_range_open(0.0, 1.0)),
    "data.ref_size": _Key("data_ref_size", int, 200,
                          "shared reference set size (full-scale runs use 2000; "
                          "default is scaled down for desk runs)", _at_least(1)),
    "data.min_client_samples": _Key("data_min_client_samples", int, 4,
                                    "partition repair floor per client shard", _nonneg),
    # federation
    "federation.clients": _Key("clients", int, 8, "number of clients", _at_least(2)),
    "federation.alpha": _Key("partition_alpha", float, 0.5,
                             "Dirichlet concentration for the label-skew split",
                             _positive),
    "federation.algorithm": _Key("algorithm", _parse_str, "kta_v2",
                                 "local | fedavg | fedprox | fedmd | kta_v2",
                                 _choice("local", "fedavg", "fedprox", "fedmd", "kta_v2")),
    "federation.rounds": _Key("rounds", int, 10, "training rounds", _nonneg),
    # model
    "model.hidden": _Key("model_hidden", _parse_int_list, (64, 64),
                         "hidden layer widths, comma separated", _nonempty),
    "model.batchnorm": _Key("model_batchnorm", _parse_bool, False,
                            "insert BatchNorm after each hidden layer"),
    # training
    "train.epochs_local": _Key("train_epochs_local", int, 1,
                               "supervised epochs per round", _at_least(1)),
    "train.epochs_distill": _Key("train_epochs_distill", int, 5,
                                 "distillation epochs per round", _nonneg),
    "train.batch_size": _Key("train_batch_size", int, 64, "minibatch size", _at_least(1)),
    "train.lr": _Key("train_lr", float, 1e-3, "learning rate", _nonneg),
    "train.optimizer": _Key("train_optimizer", _parse_str, "adam",
                            "sgd | adam", _choice("sgd", "adam")),
    "train.lambda": _Key("train_lambda", float, 0.5,
                         "distillation mixing weight in [0, 1]", _in_range_closed(0.0, 1.0)),
    "train.temperature": _Key("train_temperature", float, 2.0,
                              "distillation temperature", _positive),
    "train.prox_mu": _Key("train_prox_mu", float, 0.01,
                          "proximal weight (fedprox)", _nonneg),
    "train.bn_safe": _Key("train_bn_safe", _parse_bool, True,
                          "skip batches of size <= 1 (disable only to debug)"),
    "train.reset_optimizer_on_install": _Key("train_reset_optimizer", _parse_bool, True,
                                             "reset Adam moments when global params are installed"),
    # market
    "market.neighbors": _Key("market_neighbors", _parse_str, "knn",
                             "neighbor rule: knn | full", _choice("knn", "full")),
    "market.k": _Key("market_k", int, 5, "kNN neighbor count", _at_least(1)),
    "market.include_self": _Key("market_include_self", _parse_bool, False,
                                "include the client itself among its neighbors"),
    "market.weighting": _Key("market_weighting", _parse_str, "similarity_accuracy",
                             "similarity_accuracy | uniform",
                             _choice("similarity_accuracy", "uniform")),
    "market.epsilon": _Key("market_epsilon", float, 1e-3,
                           "accuracy floor in the weight product", _positive),
    "market.dump": _Key("market_dump", _parse_bool, False,
                        "write per-round similarity/accuracy/weight CSVs"),
    # run
    "run.seeds": _Key("seeds", _parse_int_list, (0, 1, 2),
                      "seed list, comma separated", _nonempty),
    "run.workers": _Key("workers", int, 1,
                        "parallel workers for client phases", _at_least(1)),
    "run.metering": _Key("metering", _parse_str, "both",
                         "communication reporting view: both | uplink_only",
                         _choice("both", "uplink_only")),
    "run.checkpoint_every": _Key("checkpoint_every", int, 0,
                                 "write a round-state checkpoint every N rounds (0 = off)",
                                 _nonneg),
    "run.consensus_diag": _Key("consensus_diag", _parse_bool, False,
                               "record market-graph logit dispersion before/after distillation"),
}

_ATTR_TO_KEY = {key.attr: name for name, key in SCHEMA.items()}


@dataclass
class ExperimentConfig:
    data_source: str
    data_path: str
    data_labels_path: str
    data_classes: int
    data_dim: int
    data_per_class: int
    data_spread: float
    data_test_fraction: float
    data_ref_size: int
    data_min_client_samples: int
    clients: int
    partition_alpha: float
    algorithm: str
    rounds: int
    model_hidden: tuple
    model_batchnorm: bool
    train_epochs_local: int
    train_epochs_distill: int
    train_batch_size: int
    train_lr: float
    train_optimizer: str
    train_lambda: float
    train_temperature: float
    train_prox_mu: float
    train_bn_safe: bool
    train_reset_optimizer: bool
    market_neighbors: str
    market_k: int
    market_include_self: bool
    market_weighting: str
    market_epsilon: float
    market_dump: bool
    seeds: tuple
    workers: int
    metering: str
    checkpoint_every: int
    consensus_diag: bool

    def to_round_plan(self):
        from .federation import RoundPlan
        from .market import MarketPolicy

        return RoundPlan(
            algorithm=self.algorithm,
            rounds_total=self.rounds,
            e_local=self.train_epochs_local,
            e_distill=self.train_epochs_distill,
            batch_size=self.train_batch_size,
            lam=self.train_lambda,
            temperature=self.train_temperature,
            prox_mu=self.train_prox_mu,
            optimizer=self.train_optimizer,
            lr=self.train_lr,
            market=MarketPolicy(
                neighbor_mode=self.market_neighbors,
                k=self.market_k,
                include_self=self.market_include_self,
                weighting=self.market_weighting,
                epsilon=self.market_epsilon,
            ),
            bn_safe=self.train_bn_safe,
            reset_optimizer_on_install=self.train_reset_optimizer,
            track_consensus=self.consensus_diag,
        )

    def canonical_dump(self) -> str:
        lines = []
        for name in sorted(SCHEMA):
            value = getattr(self, SCHEMA[name].attr)
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_dump().encode("utf-8")).digest()

    def replace(self, **raw_overrides) -> "ExperimentConfig":
        """New config with the given dotted keys re-parsed from strings."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        problems = []
        for name, rawval in raw_overrides.items():
            if name not in SCHEMA:
                problems.append(f"unknown config key {name!r}")
                continue
            key = SCHEMA[name]
            try:
                values[key.attr] = key.parse(str(rawval))
            except ValueError as exc:
                problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigError(problems)
        cfg = ExperimentConfig(**values)
        _validate(cfg)
        return cfg


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value strings from config text; syntax errors are collected."""
    raw: dict[str, str] = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        name, _, value = stripped.partition("=")
        name = name.strip()
        if name in raw:
            problems.append(f"{source}:{lineno}: duplicate key {name!r}")
            continue
        raw[name] = value.strip()
    if problems:
        raise ConfigError(problems)
    return raw


def _problems(cfg: ExperimentConfig) -> list:
    problems = []
    for name, key in SCHEMA.items():
        if key.check is not None:
            err = key.check(getattr(cfg, key.attr))
            if err:
                problems.append(f"{name}: {err}")
    if cfg.data_source in ("csv", "idx") and not cfg.data_path:
        problems.append("data.path: required for csv/idx sources")
    if cfg.data_source == "idx" and not cfg.data_labels_path:
        problems.append("data.labels_path: required for the idx source")
    if cfg.data_source == "blobs":
        n = cfg.data_classes * cfg.data_per_class
        test = int(round(cfg.data_test_fraction * n))
        remaining = n - max(1, test) - cfg.data_ref_size
        if remaining < cfg.clients * cfg.data_min_client_samples:
            problems.append(
                "data.*: blobs too small for test split + reference holdout + "
                f"{cfg.clients} clients x {cfg.data_min_client_samples} samples"
            )
    return problems


def _validate(cfg: ExperimentConfig) -> None:
    problems = _problems(cfg)
    if problems:
        raise ConfigError(problems)


def load_config(path=None, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """Build a validated config from defaults, file, environment, overrides."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        raw.update(parse_config_text(text, source=str(path)))
    env_by_name = {name: ENV_PREFIX + name.replace(".", "_").upper() for name in SCHEMA}
    for name, var in env_by_name.items():
        if var in env:
            raw[name] = env[var]
    if overrides:
        for name, value in overrides.items():
            raw[str(name)] = str(value)

    problems = []
    values = {key.attr: key.default for key in SCHEMA.values()}
    for name, rawval in raw.items():
        if name not in SCHEMA:
            problems.append(f"unknown config key {name!r}")
            continue
        key = SCHEMA[name]
        try:
            values[key.attr] = key.parse(rawval)
        except ValueError as exc:
            problems.append(f"{name}: {exc}")
    # Report parse and domain problems together: unparseable keys keep their
    # defaults just long enough to surface every other issue in one pass.
    cfg = ExperimentConfig(**values)
    problems.extend(_problems(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def default_config() -> ExperimentConfig:
    return load_config(env={})


def print_config_text() -> str:
    """Documented default for every key (the print-config command body)."""
    lines = [
        "# fedmarket configuration keys (key = default), all overridable by",
        f"# environment variables {ENV_PREFIX}<KEY> with dots as underscores.",
    ]
    for name in sorted(SCHEMA):
        key = SCHEMA[name]
        default = key.default
        if isinstance(default, (tuple, list)):
            default = ",".join(str(v) for v in default)
        elif isinstance(default, bool):
            default = "true" if default else "false"
        lines.append(f"{name} = {default}")
        lines.append(f"#   {key.doc}")
    return "\n".join(lines) + "\n"
