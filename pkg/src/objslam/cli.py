"""Command-line driver: simulate, run, assoc-sweep, loop-eval, bench.

Every command takes ``--config PATH`` (JSON, see ``objslam.config``),
``--out DIR``, ``--seeds "0,1,2"`` and ``--threads N``; flags override the
file.  Seeds run in a process pool and results are collected in seed order,
so CSV bodies do not depend on the thread count.  Failures print one JSON
object on stderr and exit nonzero (2 for usage and config errors, 1 for
everything else).
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import formats
from .config import ConfigError, RunConfig, load_config, parse_config, parse_seeds, writable_dir
from .eval import BENCH_COLUMNS, TrialReport, bench_matcher
from .experiments import METHODS, assoc_sweep, run_stream, score_run
from .posegraph import write_trajectory
from .sim import generate_loop_labels, generate_scene, simulate_frame

LOOP_COLUMNS = ["seed", "method", "detections", "true_positives", "false_positives", "verified",
                "verified_false_positives", "recall", "verified_recall", "applied",
                "ate_rmse_odometry", "ate_rmse_optimized"]
SWEEP_COLUMNS = ["method", "noise", "level", "seed", "accuracy"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="objslam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"simulate": "write simulated frame streams (JSON-lines plus depth side files)",
             "run": "full pipeline per seed: reports, trajectories and map snapshots",
             "assoc-sweep": "association accuracy against pose noise, proposed vs nearest neighbour",
             "loop-eval": "loop detection counts and trajectory error, spectral vs random walk",
             "bench": "graph-matcher timing against graph size"}
    for name, text in helps.items():
        c = sub.add_parser(name, help=text, description=text)
        c.add_argument("--config", metavar="PATH", help="JSON run configuration")
        c.add_argument("--out", metavar="DIR", help="output directory")
        c.add_argument("--seeds", metavar="LIST", help='comma-separated seeds or ranges, e.g. "0,1,5-9"')
        c.add_argument("--threads", metavar="N", type=int, help="worker processes")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.command) if args.config else parse_config("", args.command)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.seeds is not None:
        cfg = replace(cfg, seeds=parse_seeds(args.seeds))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1", "--threads")
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _map(fn, cfg: RunConfig, seeds) -> list:
    jobs = [(cfg, int(s)) for s in seeds]
    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# per-seed jobs (top level so they pickle)


def _simulate_job(job) -> list[str]:
    cfg, seed = job
    out = Path(cfg.out)
    scene = replace(cfg.scene, seed=seed)
    gt = generate_scene(scene)
    stream = out / f"frames_{seed}.jsonl"
    formats.write_frames(stream, (simulate_frame(gt, k) for k in range(scene.frames)))
    meta = {"seed": seed, "config": cfg.echo(),
            "objects": [{"id": o.id, "class": int(o.cls), "centroid": o.center} for o in gt.objects],
            "poses": [p.to_list() for p in gt.poses],
            "loop_labels": sorted(generate_loop_labels(gt))}
    (out / f"scene_{seed}.json").write_text(formats.dumps(meta))
    return [str(stream), str(stream.with_suffix(".depth.f64")), str(out / f"scene_{seed}.json")]


def _trial(cfg: RunConfig, seed: int):
    scene = replace(cfg.scene, seed=seed)
    params = cfg.pipeline_for(scene)
    if cfg.frames_file:
        path = Path(cfg.frames_file.format(seed=seed))
        frames = list(formats.read_frames(path))
        if any(fr.true_pose is None for fr in frames):
            raise formats.FormatError(f"{path}: evaluation needs true_pose on every frame")
        pl = run_stream(frames, scene, seed, params)
        poses = [fr.true_pose for fr in frames]
        labels = formats.loop_labels_from_visibility([fr.visible for fr in frames], scene.gap)
    else:
        gt = generate_scene(scene)
        pl = run_stream((simulate_frame(gt, k) for k in range(scene.frames)), scene, seed, params)
        poses, labels = gt.poses, generate_loop_labels(gt)
    report = score_run(pl, poses, labels, seed, cfg.tolerance_frames)
    report.config = cfg.echo()
    return report, pl


def _run_job(job) -> dict:
    cfg, seed = job
    out = Path(cfg.out)
    report, pl = _trial(cfg, seed)
    (out / f"report_{seed}.json").write_text(formats.dumps(report.to_dict()))
    write_trajectory(out / f"trajectory_{seed}.txt", pl.trajectory())
    formats.write_map(out / f"map_{seed}.json", pl.map, out / f"map_{seed}.points.f32")
    return report.to_dict()


def _loop_job(job) -> list[dict]:
    cfg, seed = job
    if not cfg.pipeline.loop_closure:
        raise ConfigError("pipeline.loop_closure must be true for loop-eval", "pipeline.loop_closure")
    report, _ = _trial(cfg, seed)
    rows = []
    for method in METHODS:
        row = {"seed": seed, "method": method, **report.loops[method],
               "ate_rmse_odometry": report.ate_rmse_odometry, "ate_rmse_optimized": report.ate_rmse_optimized}
        rows.append(row)
    return rows


def _sweep_job(job) -> list[dict]:
    cfg, seed = job
    return assoc_sweep(cfg.scene, [seed], cfg.sweep.sigma_t_grid, cfg.sweep.sigma_r_grid_deg,
                       cfg.pipeline_for(cfg.scene))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> dict:
    paths = [p for ps in _map(_simulate_job, cfg, cfg.seeds) for p in ps]
    return {"outputs": paths}


def cmd_run(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    reports = _map(_run_job, cfg, cfg.seeds)
    rows = [TrialReport(**r).csv_row() for r in reports]
    formats.write_csv(out / "reports.csv", TrialReport.CSV_COLUMNS, rows)
    flat = [dict(zip(TrialReport.CSV_COLUMNS, r)) for r in rows]
    values = [c for c in TrialReport.CSV_COLUMNS if c != "seed"]
    formats.write_csv(out / "reports_summary.csv", formats.aggregate_columns([], values),
                      formats.aggregate(flat, [], values))
    return {"outputs": [str(out / "reports.csv"), str(out / "reports_summary.csv")]
            + [str(out / f"report_{s}.json") for s in cfg.seeds]}


def cmd_assoc_sweep(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    rows = [r for rs in _map(_sweep_job, cfg, cfg.seeds) for r in rs]
    formats.write_csv(out / "assoc_sweep.csv", SWEEP_COLUMNS, rows)
    keys = ["method", "noise", "level"]
    formats.write_csv(out / "assoc_sweep_summary.csv", formats.aggregate_columns(keys, ["accuracy"]),
                      formats.aggregate(rows, keys, ["accuracy"]))
    return {"outputs": [str(out / "assoc_sweep.csv"), str(out / "assoc_sweep_summary.csv")]}


def cmd_loop_eval(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    rows = [r for rs in _map(_loop_job, cfg, cfg.seeds) for r in rs]
    formats.write_csv(out / "loop_eval.csv", LOOP_COLUMNS, rows)
    values = LOOP_COLUMNS[2:]
    formats.write_csv(out / "loop_eval_summary.csv", formats.aggregate_columns(["method"], values),
                      formats.aggregate(rows, ["method"], values))
    return {"outputs": [str(out / "loop_eval.csv"), str(out / "loop_eval_summary.csv")]}


def cmd_bench(cfg: RunConfig) -> dict:
    """Timing rows; unlike the other commands these are measurements and vary run to run."""
    out = Path(cfg.out)
    rows = bench_matcher(cfg.bench.sizes, cfg.bench.classes, cfg.bench.repeats, int(cfg.seeds[0]),
                         cfg.pipeline.match.mu, cfg.pipeline.match.n_walks, cfg.pipeline.match.walk_depth)
    formats.write_csv(out / "bench.csv", BENCH_COLUMNS, rows)
    return {"outputs": [str(out / "bench.csv")]}


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "assoc-sweep": cmd_assoc_sweep,
            "loop-eval": cmd_loop_eval, "bench": cmd_bench}


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        writable_dir(cfg.out)
        result = COMMANDS[args.command](cfg)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except ConfigError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except formats.FormatError as e:
        return _fail("format", str(e), 1)
    except Exception as e:  # surfaced as JSON rather than a traceback
        return _fail(type(e).__name__, str(e), 1)
    print(json.dumps({"command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
