"""Command line driver.

    bufsecagg run --mode basa-afl --users 32 --buffer 10 --beta 6 --seed 1
    bufsecagg run --mode sync-fedavg --users 32 --beta 3
    bufsecagg run --mode bench-user-cost --buffer 10..1000 --dim 100000
    bufsecagg run --mode demo-tcp --buffer 3 --dim 100

Every flag can also come from a flat key=value config file (--config);
command-line flags override file entries. Buffer sweeps use "a..b", which
expands to five geometric steps. Artifacts land in --out-dir: metrics.csv,
trace.jsonl and summary.json. Set BUFSECAGG_LOG=debug for verbose logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .field import DEFAULT_CLIP, DEFAULT_MODULUS, DEFAULT_SCALE, QuantizerConfig
from .simulate import (
    CostModel,
    DEFAULT_COST,
    SimConfig,
    aggregate_round_cost,
    measure_user_protocol_cost,
    metrics_to_csv,
    run_simulation,
    trace_to_jsonl,
)
from .training import StalenessFn, make_synthetic_task, run_sync_baseline

logger = logging.getLogger("bufsecagg")

MODES = ("basa-afl", "nosa-afl", "sync-fedavg", "demo-tcp", "bench-user-cost")

# flag name -> (type, default); None defaults mean "not set"
_OPTIONS: dict[str, tuple] = {
    "mode": (str, None),
    "users": (int, None),
    "concurrency": (int, None),
    "buffer": (str, "10"),
    "beta": (float, 0.0),
    "dim": (int, 101),
    "modulus": (int, DEFAULT_MODULUS),
    "scale": (float, DEFAULT_SCALE),
    "clip": (float, DEFAULT_CLIP),
    "server-lr": (float, 1.0),
    "local-lr": (float, 0.1),
    "local-steps": (int, 5),
    "batch-size": (int, 32),
    "samples-per-user": (int, 40),
    "staleness": (str, "polynomial"),
    "timeout": (float, 30.0),
    "seed": (int, 0),
    "target-accuracy": (float, 0.9),
    "max-time": (float, None),
    "max-commits": (int, 2000),
    "max-rounds": (int, 500),
    "drop-rate": (float, 0.0),
    "cohort": (int, None),
    "sa-overhead": (float, 0.0),
    "base-train-time": (float, 1.0),
    "out-dir": (str, "."),
    "cost-prg": (float, None),
    "cost-enc": (float, None),
    "cost-dec": (float, None),
    "cost-byte": (float, None),
    "cost-fixed": (float, None),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bufsecagg")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a training mode, benchmark or demo")
    run.add_argument("--config", type=str, default=None, help="flat key=value config file")
    run.add_argument("--cost-calibrate", action="store_true",
                     help="measure protocol costs on this machine instead of defaults")
    for name, (typ, _default) in _OPTIONS.items():
        kwargs = {"type": typ, "default": None}
        if name == "mode":
            kwargs["choices"] = MODES
        run.add_argument(f"--{name}", **kwargs)
    return parser


def _load_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in _OPTIONS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = val
    return values


def _resolve(args, file_values: dict) -> dict:
    cfg = {}
    for name, (typ, default) in _OPTIONS.items():
        attr = name.replace("-", "_")
        cli_val = getattr(args, attr)
        if cli_val is not None:
            cfg[attr] = cli_val
        elif name in file_values:
            cfg[attr] = typ(file_values[name])
        else:
            cfg[attr] = default
    return cfg


def _parse_sweep(text: str) -> list[int]:
    """'a..b' expands to 5 geometric steps; a plain integer stays single."""
    if ".." in text:
        lo_s, hi_s = text.split("..", 1)
        lo, hi = int(lo_s), int(hi_s)
        if lo < 1 or hi < lo:
            raise ValueError(f"bad sweep {text!r}")
        if lo == hi:
            return [lo]
        steps = 5
        ratio = (hi / lo) ** (1.0 / (steps - 1))
        ks = sorted({int(round(lo * ratio**i)) for i in range(steps)})
        return ks
    return [int(text)]


def _cost_model(cfg: dict, calibrate: bool) -> CostModel:
    if calibrate:
        base = CostModel.calibrate(dim=min(cfg["dim"], 65536), modulus=cfg["modulus"])
    else:
        base = DEFAULT_COST
    overrides = {}
    for flag, fieldname in (
        ("cost_prg", "prg_per_element"),
        ("cost_enc", "encrypt_seal"),
        ("cost_dec", "decrypt_seal"),
        ("cost_byte", "upload_per_byte"),
        ("cost_fixed", "fixed"),
    ):
        if cfg[flag] is not None:
            overrides[fieldname] = cfg[flag]
            if fieldname == "upload_per_byte":
                overrides["download_per_byte"] = cfg[flag]
    if overrides:
        from dataclasses import replace

        base = replace(base, **overrides)
    return base


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _write_summary(out_dir: Path, summary: dict) -> None:
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def _run_afl(cfg: dict, cost: CostModel) -> int:
    buffers = _parse_sweep(cfg["buffer"])
    if len(buffers) != 1:
        return _fail("training modes take a single --buffer value, not a sweep")
    buffer_size = buffers[0]
    users = cfg["users"]
    if users is None:
        return _fail("--users is required for training modes")
    if buffer_size > users:
        return _fail(f"buffer {buffer_size} exceeds user count {users}")
    task = make_synthetic_task(
        dim=cfg["dim"],
        n_users=users,
        samples_per_user=cfg["samples_per_user"],
        lr=cfg["local_lr"],
        steps=cfg["local_steps"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
    )
    quantizer = QuantizerConfig(modulus=cfg["modulus"], scale=cfg["scale"], clip=cfg["clip"])
    sim = SimConfig(
        task=task,
        mode=cfg["mode"],
        n_users=users,
        concurrency=cfg["concurrency"] or users,
        buffer_size=buffer_size,
        beta=cfg["beta"],
        base_train_time=cfg["base_train_time"],
        quantizer=quantizer,
        server_lr=cfg["server_lr"],
        staleness=StalenessFn.from_name(cfg["staleness"]),
        timeout_s=cfg["timeout"],
        cost_model=cost if cfg["mode"] == "basa-afl" else CostModel.zero(),
        drop_rate=cfg["drop_rate"],
        seed=cfg["seed"],
        target_accuracy=cfg["target_accuracy"],
        max_sim_time_s=cfg["max_time"],
        max_commits=cfg["max_commits"],
    )
    report = run_simulation(sim)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_to_csv(report.rows, out_dir / "metrics.csv")
    trace_to_jsonl(report.trace, out_dir / "trace.jsonl")
    summary = report.summary()
    summary["metrics_csv"] = str(out_dir / "metrics.csv")
    summary["trace_jsonl"] = str(out_dir / "trace.jsonl")
    _write_summary(out_dir, summary)
    return 0


def _run_sync(cfg: dict) -> int:
    users = cfg["users"]
    if users is None:
        return _fail("--users is required for training modes")
    cohort = cfg["cohort"] or min(32, users)
    if cohort > users:
        return _fail(f"cohort {cohort} exceeds user count {users}")
    task = make_synthetic_task(
        dim=cfg["dim"],
        n_users=users,
        samples_per_user=cfg["samples_per_user"],
        lr=cfg["local_lr"],
        steps=cfg["local_steps"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
    )
    report = run_sync_baseline(
        task,
        cohort_size=cohort,
        beta=cfg["beta"],
        base_train_time=cfg["base_train_time"],
        sa_overhead=cfg["sa_overhead"],
        server_lr=cfg["server_lr"],
        target_accuracy=cfg["target_accuracy"],
        max_rounds=cfg["max_rounds"],
        max_sim_time=cfg["max_time"],
        seed=cfg["seed"],
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_to_csv(report.rows, out_dir / "metrics.csv")
    summary = {
        "mode": "sync-fedavg",
        "seed": cfg["seed"],
        "beta": cfg["beta"],
        "time_to_target_s": report.time_to_target,
        "censored": report.censored,
        "rounds": report.rounds,
        "final_accuracy": report.final_accuracy,
        "metrics_csv": str(out_dir / "metrics.csv"),
    }
    _write_summary(out_dir, summary)
    return 0


def _run_bench(cfg: dict, cost: CostModel) -> int:
    buffers = _parse_sweep(cfg["buffer"])
    users = cfg["users"] or 32
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    rows = []
    with open(csv_path, "w") as fh:
        fh.write("buffer_size,dim,n_users,per_user_cost_s,round_cost_s\n")
        for k in buffers:
            per_user = measure_user_protocol_cost(k, cfg["dim"], users, cost)
            per_round = aggregate_round_cost(k, cost, cfg["dim"])
            fh.write(f"{k},{cfg['dim']},{users},{per_user:.9f},{per_round:.9f}\n")
            rows.append({"buffer_size": k, "per_user_cost_s": per_user, "round_cost_s": per_round})
    summary = {"mode": "bench-user-cost", "dim": cfg["dim"], "n_users": users,
               "sweep": rows, "bench_csv": str(csv_path)}
    _write_summary(out_dir, summary)
    return 0


def _run_demo(cfg: dict) -> int:
    from .demo import run_demo

    buffers = _parse_sweep(cfg["buffer"])
    if len(buffers) != 1:
        return _fail("demo-tcp takes a single --buffer value")
    quantizer = QuantizerConfig(modulus=cfg["modulus"], scale=cfg["scale"], clip=cfg["clip"])
    summary = run_demo(
        buffer_size=buffers[0], dim=cfg["dim"], seed=cfg["seed"], cfg=quantizer
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_summary(out_dir, summary)
    return 0 if summary["match"] else 1


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("BUFSECAGG_LOG", "WARNING").upper(), logging.WARNING)
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = _load_config_file(args.config) if args.config else {}
        cfg = _resolve(args, file_values)
        if cfg["mode"] is None:
            return _fail("--mode is required")
        logger.info("mode=%s seed=%s out_dir=%s", cfg["mode"], cfg["seed"], cfg["out_dir"])
        if cfg["mode"] in ("basa-afl", "nosa-afl"):
            cost = _cost_model(cfg, args.cost_calibrate)
            return _run_afl(cfg, cost)
        if cfg["mode"] == "sync-fedavg":
            return _run_sync(cfg)
        if cfg["mode"] == "bench-user-cost":
            return _run_bench(cfg, _cost_model(cfg, args.cost_calibrate))
        if cfg["mode"] == "demo-tcp":
            return _run_demo(cfg)
        return _fail(f"unknown mode {cfg['mode']!r}")
    except (ValueError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
