"""Command-line front end.

Subcommands: run, sweep, partition-inspect, print-config, version.
Exit codes: 0 success, 2 configuration error, 3 runtime error. Failures
print a single machine-parsable line to stderr:
``fedmarket: error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import BACKEND
from .config import SCHEMA, ExperimentConfig, load_config, print_config_text
from .errors import ConfigError, FedMarketError
from .federation import build_world, run_experiment

_F = "{:.6g}".format  # CSV float policy: 6 significant digits


def format_mean_std(values) -> str:
    """Mean and population std over seeds, e.g. '0.720 ± 0.016'."""
    arr = np.asarray(list(values), dtype=np.float64)
    return f"{arr.mean():.3f} ± {arr.std():.3f}"


def write_metrics_csv(path, seed_runs) -> None:
    """Per-round rows for every client plus two aggregate rows per round:
    AGG (client mean) and AGG_DW (shard-size weighted)."""
    lines = [
        "seed,round,client_id,test_acc,test_loss,ref_acc,"
        "comm_up_bytes_cum,comm_down_bytes_cum,acc_variance"
    ]
    for run in seed_runs:
        for m in run.metrics:
            for i, cid in enumerate(m.client_ids):
                lines.append(
                    f"{run.seed},{m.round_index},{cid},"
                    f"{_F(m.client_test_acc[i])},{_F(m.client_test_loss[i])},"
                    f"{_F(m.client_ref_acc[i])},"
                    f"{m.comm_up_cum[i]},{m.comm_down_cum[i]},"
                )
            up_total = sum(m.comm_up_cum)
            down_total = sum(m.comm_down_cum)
            mean_ref = float(np.mean(m.client_ref_acc))
            lines.append(
                f"{run.seed},{m.round_index},AGG,"
                f"{_F(m.mean_acc)},{_F(m.mean_loss)},{_F(mean_ref)},"
                f"{up_total},{down_total},{_F(m.acc_variance)}"
            )
            sizes = np.asarray(m.client_shard_sizes, dtype=np.float64)
            w = sizes / sizes.sum()
            dw_loss = float(w @ np.asarray(m.client_test_loss))
            dw_ref = float(w @ np.asarray(m.client_ref_acc))
            lines.append(
                f"{run.seed},{m.round_index},AGG_DW,"
                f"{_F(m.weighted_acc)},{_F(dw_loss)},{_F(dw_ref)},"
                f"{up_total},{down_total},{_F(m.acc_variance)}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ledger_csv(path, seed_runs) -> None:
    lines = ["seed,round,client_id,payload,bytes"]
    for run in seed_runs:
        for round_index, client_id, payload, nbytes in run.ledger.rows():
            lines.append(f"{run.seed},{round_index},{client_id},{payload},{nbytes}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary(path, cfg: ExperimentConfig, result) -> None:
    accs = result.final_accs()
    weighted = [run.final_weighted_acc for run in result.seed_runs]
    both_mb = result.comm_bytes("both") / 1e6
    up_mb = result.comm_bytes("uplink_only") / 1e6
    lines = [
        f"algorithm: {cfg.algorithm}",
        f"seeds: {','.join(str(s) for s in cfg.seeds)}",
        f"rounds: {cfg.rounds}",
        f"param_count: {result.seed_runs[0].param_count}",
        f"final_round_acc: {format_mean_std(accs)}",
        f"final_round_acc_weighted: {format_mean_std(weighted)}",
        f"comm_total_mb[both]: {both_mb:.3f}",
        f"comm_total_mb[uplink_only]: {up_mb:.3f}",
        f"comm_total_mb[{cfg.metering}] is the configured reporting view",
        f"skipped_update_fraction: {result.skipped_fraction():.6f}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _config_overrides(args) -> dict:
    overrides = {}
    if getattr(args, "seeds", None):
        overrides["run.seeds"] = args.seeds
    if getattr(args, "workers", None) is not None:
        overrides["run.workers"] = str(args.workers)
    if getattr(args, "metering", None):
        overrides["run.metering"] = args.metering
    return overrides


def cmd_run(args) -> int:
    cfg = load_config(args.config, overrides=_config_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg, workers=cfg.workers, out_dir=out)
    write_metrics_csv(out / "metrics.csv", result.seed_runs)
    write_ledger_csv(out / "ledger.csv", result.seed_runs)
    write_summary(out / "summary.txt", cfg, result)
    mean, std = result.acc_mean_std()
    print(f"run complete: final acc {mean:.3f} ± {std:.3f}, "
          f"outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep: empty value list")
    if args.param not in SCHEMA:
        raise ConfigError(
            f"sweep: unknown parameter {args.param!r}; see print-config for valid keys"
        )
    base = load_config(args.config, overrides=_config_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["sweep_value,method,final_acc_mean,final_acc_std,comm_mb"]
    for value in values:
        cfg = base.replace(**{args.param: value})
        run_dir = out / f"{args.param}={value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = run_experiment(cfg, workers=cfg.workers, out_dir=run_dir)
        write_metrics_csv(run_dir / "metrics.csv", result.seed_runs)
        write_ledger_csv(run_dir / "ledger.csv", result.seed_runs)
        write_summary(run_dir / "summary.txt", cfg, result)
        mean, std = result.acc_mean_std()
        comm_mb = result.comm_bytes(cfg.metering) / 1e6
        rows.append(f"{value},{cfg.algorithm},{_F(mean)},{_F(std)},{_F(comm_mb)}")
        print(f"sweep point {args.param}={value}: acc {mean:.3f} ± {std:.3f}")
    (out / "tradeoff.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def cmd_partition_inspect(args) -> int:
    cfg = load_config(args.config, overrides=_config_overrides(args))
    seed = cfg.seeds[0]
    full, train_pool, _, _, partition = build_world(cfg, seed)
    k = full.class_count
    print(f"partition inspection (seed {seed}, alpha {cfg.partition_alpha}):")
    header = "client | " + " ".join(f"class{j:<4d}" for j in range(k)) + " | total | max_share"
    print(header)
    shares = []
    col_sums = np.zeros(k, dtype=np.int64)
    for cid, shard in enumerate(partition.client_shards):
        counts = np.bincount(train_pool.labels[shard], minlength=k)
        col_sums += counts
        share = counts.max() / max(1, counts.sum())
        shares.append(share)
        row = " ".join(f"{c:<9d}" for c in counts)
        print(f"{cid:>6d} | {row} | {counts.sum():>5d} | {share:.3f}")
    expected = train_pool.class_counts()
    ok = np.array_equal(col_sums, expected)
    print(f"conservation: column sums {col_sums.tolist()} vs dataset "
          f"{expected.tolist()} -> {'OK' if ok else 'MISMATCH'}")
    mean_share = float(np.mean(shares))
    if mean_share <= 1.5 / k:
        label = "low skew"
    elif mean_share >= 0.5:
        label = "high label skew"
    else:
        label = "moderate label skew"
    print(f"skew: mean max-class share {mean_share:.3f} ({label})")
    return 0


def cmd_print_config(_args) -> int:
    sys.stdout.write(print_config_text())
    return 0


def cmd_version(_args) -> int:
    print(f"fedmarket {__version__} (kernels: {BACKEND})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmarket",
        description="Deterministic federated-learning simulator with a "
        "prediction-space knowledge market.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--seeds", default=None, help="comma-separated seed list override")
        p.add_argument("--workers", type=int, default=None, help="parallel worker override")
        p.add_argument("--metering", choices=("both", "uplink_only"), default=None,
                       help="communication reporting view override")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p_run = sub.add_parser("run", help="run one experiment, write metrics/ledger/summary")
    common(p_run, needs_out=True)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one experiment per swept value")
    common(p_sweep, needs_out=True)
    p_sweep.add_argument("--param", required=True, help="config key to sweep")
    p_sweep.add_argument("--values", required=True, help="comma-separated value list")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_insp = sub.add_parser("partition-inspect", help="print per-client class histograms")
    common(p_insp, needs_out=False)
    p_insp.set_defaults(fn=cmd_partition_inspect)

    p_cfg = sub.add_parser("print-config", help="print every config key with its default")
    p_cfg.set_defaults(fn=cmd_print_config)

    p_ver = sub.add_parser("version", help="print version and kernel backend")
    p_ver.set_defaults(fn=cmd_version)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"fedmarket: error: config: {exc}", file=sys.stderr)
        return 2
    except (FedMarketError, OSError) as exc:
        print(f"fedmarket: error: runtime: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
