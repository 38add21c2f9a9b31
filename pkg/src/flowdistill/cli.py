"""Command-line entry point: ``flowdistill <subcommand> [--config FILE] [flags]``.

Each subcommand starts from built-in defaults, applies the JSON config file if
given, then any flags (last wins). The resolved settings are written into the
output location before work starts.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from typing import Dict, List

from . import __version__
from . import analysis as A
from . import checkpoint as ckpt
from . import distill as D
from . import sim
from .bench import bench_sweep, depth_fit, speedup_summary
from .policy import ConfigError, PolicyConfig
from .training import FlowPolicy, TrainConfig, TrainingError, train_policy

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _int_list(s: str) -> List[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _float_list(s: str) -> List[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _staleness(s: str):
    if s == "auto":
        return s
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError("staleness must be an integer or 'auto'")
    if v < 0:
        raise argparse.ArgumentTypeError("staleness must be >= 0")
    return v


def _policy_defaults() -> dict:
    return PolicyConfig().to_dict()


def _train_defaults() -> dict:
    return {f.name: f.default for f in fields(TrainConfig)}


def _distill_defaults() -> dict:
    return {f.name: f.default for f in fields(D.DistillConfig)}


# subcommand -> (defaults, [(flag, key, type, help)])
SUBCOMMANDS: Dict[str, tuple] = {
    "gen-data": (
        {"episodes": 2000, "suite": "static", "seed": 0, "chunk_len": 8, "settle_steps": 4,
         "max_steps": 60, "out": "data.bin"},
        [("--episodes", "episodes", int, "number of expert episodes"),
         ("--suite", "suite", str, "static or dynamic"),
         ("--chunk-len", "chunk_len", int, "action chunk length"),
         ("--settle-steps", "settle_steps", int, "steps recorded after success")],
    ),
    "train-teacher": (
        {**_policy_defaults(), **_train_defaults(), "data": None, "out": "runs/teacher"},
        [("--data", "data", str, "dataset file"),
         ("--layers", "n_layers", int, "transformer depth"),
         ("--d-model", "d_model", int, "model width"),
         ("--batch-size", "batch_size", int, "observations per step"),
         ("--lr", "lr", float, "peak learning rate")],
    ),
    "distill": (
        {**_distill_defaults(), "teacher": None, "data": None, "out": "runs/student"},
        [("--teacher", "teacher", str, "teacher checkpoint"),
         ("--data", "data", str, "dataset file"),
         ("--layers", "student_layers", int, "student depth"),
         ("--lambda-task", "lambda_task", float, "flow-matching loss weight"),
         ("--lambda-kd", "lambda_kd", float, "teacher velocity loss weight"),
         ("--lambda-attn", "lambda_attn", float, "attention KL loss weight"),
         ("--placement", "attn_placement", str, "initial, middle or later"),
         ("--scope", "attn_scope", str, "action_only or all_tokens"),
         ("--batch-size", "batch_size", int, "observations per step"),
         ("--lr", "lr", float, "peak learning rate")],
    ),
    "eval": (
        {"ckpt": None, "suite": "static", "episodes": 200, "seed": 10_000, "staleness": 0,
         "latency_ms": None, "period_ms": 33.3, "actions_per_replan": 4, "ensemble_decay": 0.1,
         "n_steps": 10, "codebook_seed": 0, "out": "runs/eval"},
        [("--ckpt", "ckpt", str, "policy checkpoint"),
         ("--suite", "suite", str, "static or dynamic"),
         ("--episodes", "episodes", int, "number of evaluation episodes"),
         ("--staleness", "staleness", _staleness, "frames of observation delay, or 'auto'"),
         ("--latency-ms", "latency_ms", float, "inference latency used by --staleness auto"),
         ("--period-ms", "period_ms", float, "control period used by --staleness auto"),
         ("--replan", "actions_per_replan", int, "actions executed per replan"),
         ("--n-steps", "n_steps", int, "Euler steps per inference")],
    ),
    "analyze-similarity": (
        {"ckpt": None, "data": None, "n": 256, "taus": list(A.DEFAULT_TAU_GRID), "seed": 0,
         "codebook_seed": 0, "out": "runs/similarity"},
        [("--ckpt", "ckpt", str, "policy checkpoint"),
         ("--data", "data", str, "dataset file supplying evaluation rows"),
         ("--n", "n", int, "number of evaluation rows"),
         ("--taus", "taus", _float_list, "comma-separated flow times")],
    ),
    "analyze-sensitivity": (
        {"ckpt": None, "suite": "static", "episodes": 200, "seed": 10_000, "n_steps": 10,
         "codebook_seed": 0, "out": "runs/sensitivity"},
        [("--ckpt", "ckpt", str, "policy checkpoint"),
         ("--suite", "suite", str, "static or dynamic"),
         ("--episodes", "episodes", int, "episodes per skip setting"),
         ("--n-steps", "n_steps", int, "Euler steps per inference")],
    ),
    "analyze-progressive": (
        {"ckpt": None, "sensitivity": None, "order": None, "max_removed": None, "suite": "static",
         "episodes": 200, "seed": 10_000, "n_steps": 10, "codebook_seed": 0, "out": "runs/progressive"},
        [("--ckpt", "ckpt", str, "policy checkpoint"),
         ("--sensitivity", "sensitivity", str, "sensitivity.csv giving the removal order"),
         ("--order", "order", _int_list, "explicit removal order (comma list)"),
         ("--max-removed", "max_removed", int, "largest number of skipped layers"),
         ("--suite", "suite", str, "static or dynamic"),
         ("--episodes", "episodes", int, "episodes per skip setting"),
         ("--n-steps", "n_steps", int, "Euler steps per inference")],
    ),
    "bench-latency": (
        {**_policy_defaults(), "depths": [2, 4, 6, 8, 12, 18], "tokens": [4, 8, 16, 32], "n_steps": 10,
         "trials": 30, "warmup": 5, "threads": 1, "seed": 0, "json": False, "out": "runs/bench"},
        [("--depths", "depths", _int_list, "comma-separated depth grid"),
         ("--tokens", "tokens", _int_list, "comma-separated visual-token grid"),
         ("--layers", "n_layers", int, "base depth"),
         ("--n-steps", "n_steps", int, "Euler steps per inference"),
         ("--trials", "trials", int, "timed runs per grid point"),
         ("--warmup", "warmup", int, "untimed runs per grid point"),
         ("--threads", "threads", int, "BLAS threads during timing")],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"flowdistill {__version__} (checkpoint {ckpt.MAGIC.decode()} v{ckpt.FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, flags) in SUBCOMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of settings (flags override it)")
        p.add_argument("--seed", dest="seed", type=int, help="global seed")
        p.add_argument("--out", dest="out", help="output file or run directory")
        if name in ("train-teacher", "distill"):
            p.add_argument("--steps", dest="steps", type=int, help="optimisation steps")
        for flag, key, typ, help_ in flags:
            p.add_argument(flag, dest=key, type=typ, help=help_)
        if name == "bench-latency":
            p.add_argument("--json", dest="json", action="store_true", help="also write bench.json")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    defaults, _ = SUBCOMMANDS[command]
    cfg = dict(defaults)
    given = dict(vars(args))
    given.pop("command", None)
    path = given.pop("config", None)
    if path:
        try:
            with open(path) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(from_file)
    cfg.update(given)
    return cfg


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _write_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_dir(cfg: dict) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_config(cfg, os.path.join(out, "config.json"))
    return out


def _pick(cfg: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _suite(cfg: dict) -> str:
    if cfg["suite"] not in ("static", "dynamic"):
        raise ConfigError(f"suite must be 'static' or 'dynamic', got {cfg['suite']!r}")
    return cfg["suite"]


def _load_policy(cfg: dict):
    params = ckpt.load(cfg["ckpt"])
    return params, sim.Codebook.create(params.config, cfg["codebook_seed"])


def cmd_gen_data(cfg: dict) -> int:
    dynamic = _suite(cfg) == "dynamic"
    out = cfg["out"]
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    _write_config(cfg, out + ".config.json")
    ds = sim.gen_dataset(cfg["episodes"], dynamic, cfg["seed"], cfg["chunk_len"], cfg["settle_steps"],
                         cfg["max_steps"])
    sim.save_dataset(ds, out)
    print(f"wrote {len(ds)} rows from {cfg['episodes']} episodes to {out}")
    return EXIT_OK


def cmd_train_teacher(cfg: dict) -> int:
    _require(cfg, "data")
    pcfg = PolicyConfig.from_dict(_pick(cfg, PolicyConfig))
    tcfg = TrainConfig(**_pick(cfg, TrainConfig))
    out = _run_dir(cfg)
    ds = sim.load_dataset(cfg["data"])
    params = train_policy(ds, pcfg, tcfg, log_path=os.path.join(out, "loss.csv"))
    ckpt.save(params, os.path.join(out, "model.ckpt"))
    print(f"saved {params.num_parameters()} parameters to {os.path.join(out, 'model.ckpt')}")
    return EXIT_OK


def cmd_distill(cfg: dict) -> int:
    _require(cfg, "teacher", "data")
    dcfg = D.DistillConfig.from_dict(_pick(cfg, D.DistillConfig))
    teacher = ckpt.load(cfg["teacher"])
    dcfg.validate(teacher.config.n_layers)
    out = _run_dir(cfg)
    ds = sim.load_dataset(cfg["data"])
    student = D.distill_train(teacher, ds, dcfg, log_path=os.path.join(out, "loss.csv"),
                              config_path=os.path.join(out, "distill_config.json"))
    ckpt.save(student, os.path.join(out, "model.ckpt"))
    print(f"saved {student.config.n_layers}-layer student to {os.path.join(out, 'model.ckpt')}")
    return EXIT_OK


def _staleness_frames(cfg: dict, n_layers: int) -> int:
    s = cfg["staleness"]
    if s != "auto":
        if not isinstance(s, int) or s < 0:
            raise ConfigError("staleness must be a non-negative integer or 'auto'")
        return s
    if cfg.get("latency_ms") is not None:
        return sim.staleness_model(cfg["latency_ms"], cfg["period_ms"])
    return sim.linear_staleness(n_layers)


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "ckpt")
    suite = _suite(cfg)
    params, codebook = _load_policy(cfg)
    frames = _staleness_frames(cfg, params.config.n_layers)
    executor = sim.ExecutorConfig(chunk_len=params.config.chunk_len, actions_per_replan=cfg["actions_per_replan"],
                                  staleness_frames=frames, ensemble_decay=cfg["ensemble_decay"])
    out = _run_dir(cfg)
    res = sim.evaluate(FlowPolicy(params, codebook, cfg["n_steps"]), suite, cfg["episodes"], executor, cfg["seed"])
    res.write_csv(os.path.join(out, "episodes.csv"))
    _write_config({"success_rate": res.success_rate, "staleness_frames": frames, "suite": suite,
                   "episodes": cfg["episodes"]}, os.path.join(out, "result.json"))
    print(f"success_rate {res.success_rate:.4f} ({suite}, staleness {frames}, {cfg['episodes']} episodes)")
    return EXIT_OK


def cmd_similarity(cfg: dict) -> int:
    _require(cfg, "ckpt", "data")
    params, codebook = _load_policy(cfg)
    out = _run_dir(cfg)
    ds = sim.load_dataset(cfg["data"])
    obs, actions = A.eval_set(ds, params.config, codebook, cfg["n"], cfg["seed"])
    mat = A.cosine_similarity_profile(params, obs, actions, cfg["taus"], cfg["seed"])
    mat.write_csv(os.path.join(out, "similarity.csv"))
    for i, row in enumerate(mat.values):
        print(f"layer {i}: " + " ".join(f"{v:.3f}" for v in row))
    return EXIT_OK


def cmd_sensitivity(cfg: dict) -> int:
    _require(cfg, "ckpt")
    suite = _suite(cfg)
    params, codebook = _load_policy(cfg)
    out = _run_dir(cfg)
    table = A.sensitivity_sweep(params, codebook, suite, cfg["episodes"], seed=cfg["seed"], n_steps=cfg["n_steps"])
    table.write_csv(os.path.join(out, "sensitivity.csv"))
    print(f"baseline {table.baseline:.4f}; drops " + " ".join(f"{d:+.3f}" for d in table.drop))
    return EXIT_OK


def _read_sensitivity(path) -> A.SensitivityTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path} has no rows")
    rows.sort(key=lambda r: int(r["layer"]))
    return A.SensitivityTable(float(rows[0]["baseline"]), [float(r["skipped"]) for r in rows])


def cmd_progressive(cfg: dict) -> int:
    _require(cfg, "ckpt")
    suite = _suite(cfg)
    if not (cfg.get("order") or cfg.get("sensitivity")):
        raise ConfigError("need --sensitivity or --order")
    params, codebook = _load_policy(cfg)
    n = params.config.n_layers
    if cfg.get("order"):
        order = list(cfg["order"])
    else:
        order = _read_sensitivity(cfg["sensitivity"]).ascending_order()
    max_removed = cfg["max_removed"] if cfg["max_removed"] is not None else n - 1
    if not 0 <= max_removed < n:
        raise ConfigError(f"max_removed must be in [0, {n})")
    out = _run_dir(cfg)
    rates = A.progressive_skip_eval(params, codebook, order, max_removed, suite, cfg["episodes"],
                                    seed=cfg["seed"], n_steps=cfg["n_steps"])
    A.write_progressive_csv(rates, os.path.join(out, "progressive.csv"))
    print("success by layers removed: " + " ".join(f"{r}:{s:.3f}" for r, s in enumerate(rates)))
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    base = PolicyConfig.from_dict(_pick(cfg, PolicyConfig))
    out = _run_dir(cfg)
    report = bench_sweep(base, cfg["depths"], cfg["tokens"], cfg["n_steps"], cfg["trials"], cfg["warmup"],
                         cfg["seed"], cfg["threads"],
                         progress=lambda r: print(f"depth {r.n_layers:3d} tokens {r.n_vis_tokens:3d} "
                                                  f"median {r.median_ms:8.2f} ms", flush=True))
    report.write_csv(os.path.join(out, "bench.csv"))
    summary = speedup_summary(report, base)
    slope, intercept, r2 = depth_fit(report, base.n_vis_tokens)
    if cfg["json"]:
        doc = report.to_dict()
        doc["summary"] = summary
        doc["depth_fit"] = {"slope_ms": slope, "intercept_ms": intercept, "r_squared": r2}
        _write_config(doc, os.path.join(out, "bench.json"))
    print(f"depth fit: {slope:.3f} ms/layer + {intercept:.3f} ms, R^2 = {r2:.4f}")
    for s in summary:
        print(f"{s['axis']}: {s['numerator']} / {s['denominator']} latency x{s['latency_ratio']:.2f} "
              f"(flops x{s['flop_ratio']:.2f})")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "analyze-similarity": cmd_similarity,
    "analyze-sensitivity": cmd_sensitivity,
    "analyze-progressive": cmd_progressive,
    "bench-latency": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_CONFIG
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except (ConfigError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ckpt.FormatError, TrainingError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
