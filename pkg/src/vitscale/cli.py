"""Command-line entry point: ``vitscale {evaluate,search,scale,schedule,correlate}``.

Options come from built-in defaults, then ``--config`` (an INI file with
``[global]`` and per-command sections, or a previous run's manifest), then
explicit flags. Exit codes: 0 success, 2 configuration/schema error,
3 numerical or evaluation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import io as vio
from .complexity import METRICS, Protocol
from .estimators import AutoScaler, TopologySearch
from .nn import build_network
from .retokenize import PUBLISHED_SCHEDULES, TokenSchedule, flops_ratio, schedule_savings
from .scoring import ArchitectureScorer
from .search import Policy, RewardHistory
from .topology import ScaleSpec, SchemaError, SearchSpace, decode_document, encode, spec_hash
from .training import MIN_STUDY_SIZE, STUDY_COLUMNS, TrainConfig, correlation_study, make_dataset

logger = logging.getLogger("vitscale")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "evaluate": dict(seeds=5, samples=10, step=None, ntk_batch=8, input_res=32,
                     length_form="sqrt"),
    "search": dict(steps=500, lr=0.05, baseline_decay=0.9, input_res=32, width=32, samples=10,
                   ntk_batch=8, rescore_top=5, rescore_seeds=5, resume=None),
    "scale": dict(budget=2_000_000, input_res=32, samples=10, ntk_batch=8,
                  random_scaling=False, runs=1),
    "schedule": dict(phases="medium", epochs=300, input_res=64, num_classes=1000),
    "correlate": dict(n=16, epochs=10, classes=8, samples_total=4096, input_res=32, width=16,
                      batch_size=64, lr=1e-3, samples=10, seeds=5, dataset="synthetic-shapes",
                      data_dir=None, resume=False),
}
COMMON = dict(seed=0, jobs=1, out_dir=None)


class EvaluationError(RuntimeError):
    pass


def _add_common(p):
    p.add_argument("--config", help="INI config file or a previous manifest.json")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")
    p.add_argument("--out-dir", help=f"output directory (default ${vio.OUT_DIR_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitscale", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="complexity metrics of one architecture")
    p.add_argument("arch", help="architecture document (JSON)")
    p.add_argument("--seeds", type=int)
    p.add_argument("--samples", type=int, help="theta samples on the circle")
    p.add_argument("--step", type=float, help="finite-difference step in radians")
    p.add_argument("--ntk-batch", type=int)
    p.add_argument("--input-res", type=int)
    p.add_argument("--length-form", choices=("sqrt", "conventional"))
    _add_common(p)

    p = sub.add_parser("search", help="training-free topology search")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--baseline-decay", type=float)
    p.add_argument("--input-res", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--ntk-batch", type=int)
    p.add_argument("--rescore-top", type=int)
    p.add_argument("--rescore-seeds", type=int)
    p.add_argument("--resume", help="policy checkpoint to continue from")
    _add_common(p)

    p = sub.add_parser("scale", help="greedy auto-scaling to a parameter budget")
    p.add_argument("arch", help="seed architecture document (JSON)")
    p.add_argument("--budget", type=int)
    p.add_argument("--input-res", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--ntk-batch", type=int)
    p.add_argument("--random-scaling", action="store_true", default=None)
    p.add_argument("--runs", type=int, help="independent runs (seed, seed+1, ...)")
    _add_common(p)

    p = sub.add_parser("schedule", help="re-tokenization schedule and FLOPs savings")
    p.add_argument("arch", help="architecture document (JSON)")
    p.add_argument("--phases",
                   help="'short'|'medium'|'long' or 'factor:start-end,...' e.g. 4:1-40,2:41-70,1:71-300")
    p.add_argument("--epochs", type=int)
    p.add_argument("--input-res", type=int)
    p.add_argument("--num-classes", type=int)
    _add_common(p)

    p = sub.add_parser("correlate", help="metric vs trained-accuracy Kendall tau study")
    p.add_argument("--n", type=int, help="number of random topologies")
    p.add_argument("--epochs", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-total", type=int, help="dataset size")
    p.add_argument("--input-res", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--samples", type=int, help="theta samples on the circle")
    p.add_argument("--seeds", type=int)
    p.add_argument("--dataset", choices=("synthetic-shapes", "ingest-directory"))
    p.add_argument("--data-dir")
    p.add_argument("--resume", action="store_true", default=None,
                   help="skip topologies already present in study.csv")
    _add_common(p)
    return parser


def resolve_config(args) -> dict:
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[args.command])
    if args.config:
        file_cfg = vio.load_config(args.config, args.command)
        unknown = set(file_cfg) - set(cfg) - {"arch", "command"}
        if unknown:
            raise vio.ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in file_cfg.items() if k in cfg})
    for key in list(cfg):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "arch", None):
        cfg["arch"] = args.arch
    if cfg["out_dir"] is None:
        cfg["out_dir"] = str(vio.default_out_dir() / args.command)
    return cfg


def _snapshot(cfg) -> dict:
    """Config fields that determine outputs (paths and parallelism excluded)."""
    return {k: v for k, v in cfg.items() if k not in ("out_dir", "jobs", "config")}


def _read_arch(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise vio.ConfigError(f"cannot read {path}: {exc}") from None
    return decode_document(text)


def cmd_evaluate(cfg) -> list[Path]:
    topology, scale, _ = _read_arch(cfg["arch"])
    out = Path(cfg["out_dir"])
    protocol = Protocol(cfg["samples"], cfg["seeds"], cfg["step"], cfg["ntk_batch"],
                        cfg["length_form"])
    scorer = ArchitectureScorer(cfg["input_res"], random_state=cfg["seed"])
    try:
        build_network(topology, scale, 0, cfg["input_res"])
    except ValueError as exc:
        raise vio.ConfigError(str(exc)) from None
    report = scorer.report(topology, scale, protocol=protocol)
    rows = report.rows(spec_hash(topology, scale))
    columns = ("spec_hash", "seed", *METRICS, "wall_ms")
    path = vio.write_csv(out / "complexity.csv", rows, columns, _snapshot(cfg))
    print(json.dumps({m: getattr(report, m) for m in METRICS}, sort_keys=True))
    return [path]


def cmd_search(cfg) -> list[Path]:
    out = Path(cfg["out_dir"])
    space = SearchSpace()
    policy = history = None
    if cfg["resume"]:
        try:
            doc = json.loads(Path(cfg["resume"]).read_text())
            policy = Policy.from_dict(doc)
            history = RewardHistory(list(doc["history"]["LE"]),
                                    list(doc["history"]["kappa_theta"]))
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise vio.ConfigError(f"cannot load policy checkpoint: {exc}") from None
    est = TopologySearch(
        steps=cfg["steps"], lr=cfg["lr"], baseline_decay=cfg["baseline_decay"],
        input_res=cfg["input_res"], width=cfg["width"], samples=cfg["samples"],
        ntk_batch=cfg["ntk_batch"], rescore_top=cfg["rescore_top"],
        rescore_seeds=cfg["rescore_seeds"], random_state=cfg["seed"],
    )
    try:
        est.fit(policy=policy, history=history)
    except RuntimeError as exc:
        raise EvaluationError(str(exc)) from None
    snap = _snapshot(cfg)
    rows = [
        {"t": r.t, "spec_hash": spec_hash(r.spec), "LE": r.LE, "kappa_theta": r.kappa_theta,
         "reward": r.reward, "entropy": r.entropy, "failed": int(r.failed)}
        for r in est.trajectory_
    ]
    scale = ScaleSpec((1, 1, 1, 1), cfg["width"])
    files = [
        vio.write_csv(out / "trajectory.csv", rows,
                      ("t", "spec_hash", "LE", "kappa_theta", "reward", "entropy", "failed"),
                      snap),
        vio.write_json(out / "policy.json", {
            "config": snap, **est.policy_.to_dict(space),
            "history": {"LE": est.result_.history.LE,
                        "kappa_theta": est.result_.history.kappa_theta},
        }),
    ]
    best = out / "best_arch.json"
    best.write_text(encode(est.best_topology_, scale, cfg["seed"]), encoding="utf-8")
    files.append(best)
    if est.rescored_:
        rows = [{"spec_hash": spec_hash(spec), "LE": rep.LE, "kappa_theta": rep.kappa_theta,
                 **spec.as_dict()} for spec, rep in est.rescored_]
        cols = ("spec_hash", "LE", "kappa_theta", *est.best_topology_.as_dict())
        files.append(vio.write_csv(out / "rescored.csv", rows, cols, snap))
    print(f"best topology {est.best_topology_}; entropy "
          f"{est.initial_entropy_:.3f} -> {est.final_entropy_:.3f} nats")
    return files


def cmd_scale(cfg) -> list[Path]:
    topology, scale, _ = _read_arch(cfg["arch"])
    out = Path(cfg["out_dir"])
    snap = _snapshot(cfg)
    rows, files = [], []
    for run in range(cfg["runs"]):
        est = AutoScaler(topology, cfg["budget"], scale.depths, scale.width, cfg["input_res"],
                         cfg["samples"], cfg["ntk_batch"], bool(cfg["random_scaling"]),
                         n_jobs=cfg["jobs"], random_state=cfg["seed"] + run)
        try:
            est.fit()
        except ValueError as exc:
            raise vio.ConfigError(str(exc)) from None
        for s in est.trajectory_:
            rows.append({
                "run": run, "step": s.step, "L1": s.scale.depths[0], "L2": s.scale.depths[1],
                "L3": s.scale.depths[2], "L4": s.scale.depths[3], "C": s.scale.width,
                "params": s.params, "ratio": s.choice.ratio if s.choice else None,
                "stage": s.choice.stage + 1 if s.choice else None,
                "LE": s.LE, "kappa_theta": s.kappa_theta,
            })
            arch = out / f"arch_run{run:02d}_step{s.step:03d}.json"
            arch.write_text(encode(topology, s.scale, cfg["seed"] + run), encoding="utf-8")
            files.append(arch)
        print(f"run {run}: {len(est.trajectory_) - 1} steps -> {est.final_scale_}")
    cols = ("run", "step", "L1", "L2", "L3", "L4", "C", "params", "ratio", "stage", "LE",
            "kappa_theta")
    files.insert(0, vio.write_csv(out / "scaling_trajectory.csv", rows, cols, snap))
    return files


def parse_phases(text: str):
    if text in PUBLISHED_SCHEDULES:
        return PUBLISHED_SCHEDULES[text]
    spans = []
    try:
        for part in text.split(","):
            factor, epochs = part.split(":")
            start, end = epochs.split("-")
            spans.append((int(factor.rstrip("x")), int(start), int(end)))
    except ValueError:
        raise vio.ConfigError(f"cannot parse phases {text!r}") from None
    return spans


def cmd_schedule(cfg) -> list[Path]:
    topology, scale, _ = _read_arch(cfg["arch"])
    out = Path(cfg["out_dir"])
    try:
        schedule = TokenSchedule.from_factors(parse_phases(str(cfg["phases"])), topology.K1)
        net = build_network(topology, scale, 0, cfg["input_res"], cfg["num_classes"])
        saving = schedule_savings(schedule, cfg["epochs"], net)
    except ValueError as exc:
        raise vio.ConfigError(str(exc)) from None
    snap = _snapshot(cfg)
    doc = {"config": snap, "phases": schedule.as_list()}
    sched_path = vio.write_json(out / "schedule.json", doc)
    ratios = {f"ratio_{p.factor()}x": flops_ratio(net, p.factor()) for p in schedule.phases}
    digest = hashlib.sha256(json.dumps(schedule.as_list(), sort_keys=True).encode()).hexdigest()
    row = {"schedule_hash": digest[:12], "saving_pct": saving, **ratios}
    csv_path = vio.write_csv(out / "savings.csv", [row], tuple(row), snap)
    print(f"FLOPs saving {saving:.2f}%")
    return [sched_path, csv_path]


def cmd_correlate(cfg) -> list[Path]:
    out = Path(cfg["out_dir"])
    snap = _snapshot(cfg)
    if cfg["n"] < MIN_STUDY_SIZE:
        raise vio.ConfigError(f"correlate needs --n >= {MIN_STUDY_SIZE}, got {cfg['n']}")
    try:
        data = make_dataset(cfg["dataset"], cfg["seed"], cfg["input_res"], cfg["classes"],
                            cfg["samples_total"], directory=cfg["data_dir"])
    except ValueError as exc:
        raise vio.ConfigError(str(exc)) from None
    raw = out / "study.csv"
    completed = {}
    if cfg["resume"] and raw.exists():
        completed = {r["spec_hash"]: r for r in vio.read_csv(raw)}
    done = dict(completed)

    def on_row(row):
        done[row["spec_hash"]] = row
        vio.write_csv(raw, list(done.values()), STUDY_COLUMNS, snap)

    protocol = Protocol(cfg["samples"], cfg["seeds"])
    config = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], seed=cfg["seed"])
    kwargs = dict(protocol=protocol, config=config, scale=ScaleSpec((1, 1, 1, 1), cfg["width"]),
                  seed=cfg["seed"], completed=completed, on_row=on_row)
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(cfg["jobs"]) as pool:
            result = correlation_study(None, cfg["n"], data, map_fn=pool.map, **kwargs)
    else:
        result = correlation_study(None, cfg["n"], data, **kwargs)
    if len(result.rows) < 2:
        raise EvaluationError(f"only {len(result.rows)} topologies succeeded")
    files = [vio.write_csv(raw, result.rows, STUDY_COLUMNS, snap)]
    files.append(vio.write_json(out / "tau.json", {
        "config": snap, "tau": result.tau, "n": len(result.rows), "failures": result.failures,
    }))
    print(json.dumps({"tau": result.tau, "failures": result.failures}, sort_keys=True))
    return files


COMMANDS = {
    "evaluate": cmd_evaluate,
    "search": cmd_search,
    "scale": cmd_scale,
    "schedule": cmd_schedule,
    "correlate": cmd_correlate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        started = vio.now()
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg)
        vio.write_manifest(cfg["out_dir"], _snapshot(cfg), files, started, args.command)
    except (SchemaError, vio.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, EvaluationError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
