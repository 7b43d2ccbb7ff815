"""Run configuration: JSON ingestion with field and line diagnostics.

A config file is one JSON object.  Every section is optional and overrides
the defaults of the command being run::

    {
      "experiment": "loop-eval",
      "scene": {"n_objects": 20, "frames": 300, "revisit": true, "laps": 3,
                "noise": {"sigma_t": 0.01, "sigma_r": 0.001}},
      "assoc": {"lam": 0.5, "gate": 0.7},
      "match": {"mu": 2.0, "min_pair_score": 0.05, "edge_frac": 0.5, "dist_tol": 0.25},
      "align": {"icp_radius": 0.3},
      "posegraph": {"lm_iters": 50, "lm_tol": 1e-10},
      "pipeline": {"window": 10},
      "sweep": {"sigma_t_grid": [0, 0.05, 0.1], "sigma_r_grid_deg": [0, 5, 10]},
      "bench": {"sizes": [10, 20], "classes": [5], "repeats": 5},
      "frames_file": null,
      "tolerance_frames": 10,
      "out": "out",
      "seeds": [0, 1, 2],
      "threads": 1
    }

Unknown keys and values of the wrong type are errors that name the field
path and the line it appears on.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import re
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .align import AlignParams
from .assoc import AssociationParams
from .experiments import SIGMA_R_GRID_DEG, SIGMA_T_GRID, loop_scene
from .pipeline import MatchParams, PipelineParams
from .sim import SceneConfig

EXPERIMENTS = ("simulate", "run", "assoc-sweep", "loop-eval", "bench")

POSEGRAPH_FIELDS = ("lm_iters", "lm_tol", "odom_sigma_t", "odom_sigma_r", "oc_sigma_t", "oc_sigma_r")
PIPELINE_FIELDS = ("method", "loop_closure", "baseline_matcher", "window", "stale_gap", "deadband_t",
                   "deadband_r", "max_drift_t", "max_drift_r", "voxel", "min_query_vertices")
# fields whose default depends on the scene unless set explicitly
SCENE_DERIVED = ("stale_gap", "odom_sigma_t", "odom_sigma_r")


class ConfigError(ValueError):
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def to_dict(self) -> dict:
        return {"error": "config", "message": str(self), "field": self.field, "line": self.line}


@dataclass
class SweepConfig:
    sigma_t_grid: tuple = SIGMA_T_GRID
    sigma_r_grid_deg: tuple = SIGMA_R_GRID_DEG


@dataclass
class BenchConfig:
    sizes: tuple = (10, 20, 30, 40, 50)
    classes: tuple = (5,)
    repeats: int = 5


@dataclass
class RunConfig:
    experiment: str = "run"
    scene: SceneConfig = field(default_factory=SceneConfig)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    frames_file: Optional[str] = None
    tolerance_frames: int = 10
    out: str = "out"
    seeds: tuple = (0,)
    threads: int = 1
    explicit: frozenset = frozenset()      # pipeline fields set by the file

    def pipeline_for(self, scene: SceneConfig) -> PipelineParams:
        """Pipeline parameters with scene-derived defaults filled in where not set."""
        p = self.pipeline
        derived = {"stale_gap": scene.gap, "odom_sigma_t": scene.noise.sigma_t,
                   "odom_sigma_r": scene.noise.sigma_r}
        return replace(p, **{k: v for k, v in derived.items() if k not in self.explicit})

    def echo(self) -> dict:
        """Plain-data copy of the whole configuration for reports."""
        d = _plain(self)
        d.pop("explicit", None)
        return d


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if not f.name.startswith("_")}
    if isinstance(obj, (tuple, list, frozenset, set)):
        return [_plain(v) for v in obj]
    return obj


def default_scene(experiment: str) -> SceneConfig:
    """Scene preset per command.

    ``simulate``, ``run`` and ``loop-eval`` share the revisiting circle so a
    simulated stream replays exactly under ``run``; the association sweep and
    the benchmark start from the plain scene.
    """
    if experiment in ("simulate", "run", "loop-eval"):
        return loop_scene()
    return SceneConfig()


# ---------------------------------------------------------------------------
# parsing


class _Locator:
    """Best-effort line numbers for key paths in the raw JSON text."""

    def __init__(self, text: str):
        self.text = text

    def line(self, path: tuple) -> Optional[int]:
        pos = 0
        for key in path:
            if isinstance(key, int):
                continue
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(self.text, pos)
            if m is None:
                return None
            pos = m.start()
        return self.text.count("\n", 0, pos) + 1 if path else 1


def _name(path: tuple) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else p)
    return out


def _expected(cls, name):
    """(base type, optional) from the dataclass annotation of ``name``."""
    hint = typing.get_type_hints(cls)[name]
    optional = False
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        optional = len(args) < len(typing.get_args(hint))
        hint = args[0]
    return typing.get_origin(hint) or hint, optional


def _coerce(value, kind, default, path, loc: _Locator, optional: bool = False):
    def fail(expected):
        raise ConfigError(f"{_name(path)}: expected {expected}, got {json.dumps(value)}",
                          _name(path), loc.line(path))

    if value is None:
        if optional:
            return None
        fail(kind.__name__)
    if kind is bool:
        if not isinstance(value, bool):
            fail("true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            fail("a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            fail("a string")
        return value
    if kind in (tuple, list):
        if not isinstance(value, list):
            fail("a list")
        inner = type(default[0]) if default else float
        return tuple(_coerce(v, inner, None, path + (i,), loc) for i, v in enumerate(value))
    fail(kind.__name__)


def _build(cls, data, path: tuple, loc: _Locator, base=None, allowed=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{_name(path) or 'config'}: expected an object", _name(path), loc.line(path))
    base = base if base is not None else cls()
    names = allowed if allowed is not None else [f.name for f in dataclasses.fields(cls)
                                                 if not f.name.startswith("_")]
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{_name(path + (key,))}: unknown key; expected one of {sorted(names)}",
                              _name(path + (key,)), loc.line(path + (key,)))
        default = getattr(base, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path + (key,), loc, default)
        else:
            kind, optional = _expected(cls, key)
            kwargs[key] = _coerce(value, kind, default, path + (key,), loc, optional)
    try:
        return replace(base, **kwargs)
    except ValueError as e:
        raise ConfigError(f"{_name(path)}: {e}", _name(path), loc.line(path)) from e


def parse_config(text: str, experiment: Optional[str] = None) -> RunConfig:
    """Parse config text; ``experiment`` (the CLI command) overrides the file's selector."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", None, e.lineno) from e
    loc = _Locator(text)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", None, 1)
    known = {"experiment", "scene", "assoc", "match", "align", "posegraph", "pipeline", "sweep",
             "bench", "frames_file", "tolerance_frames", "out", "seeds", "threads"}
    for key in data:
        if key not in known:
            raise ConfigError(f"{key}: unknown key; expected one of {sorted(known)}", key, loc.line((key,)))

    exp = data.get("experiment", experiment or "run")
    if not isinstance(exp, str) or exp not in EXPERIMENTS:
        raise ConfigError(f"experiment: expected one of {list(EXPERIMENTS)}", "experiment",
                          loc.line(("experiment",)))
    exp = experiment or exp

    scene = _build(SceneConfig, data.get("scene", {}), ("scene",), loc, default_scene(exp),
                   [f.name for f in dataclasses.fields(SceneConfig) if f.name != "seed"])
    try:
        scene.validate()
    except ValueError as e:
        name = str(e).split(" ")[0]
        raise ConfigError(str(e), name, loc.line(tuple(name.split(".")))) from e

    p = PipelineParams()
    explicit = set()
    p = replace(p, assoc=_build(AssociationParams, data.get("assoc", {}), ("assoc",), loc),
                match=_build(MatchParams, data.get("match", {}), ("match",), loc),
                align=_build(AlignParams, data.get("align", {}), ("align",), loc, p.align))
    for section, names in (("posegraph", POSEGRAPH_FIELDS), ("pipeline", PIPELINE_FIELDS)):
        sec = data.get(section, {})
        p = _build(PipelineParams, sec, (section,), loc, p, list(names))
        explicit |= set(sec) & set(SCENE_DERIVED)
    if p.method not in ("proposed", "nn"):
        raise ConfigError("pipeline.method: expected 'proposed' or 'nn'", "pipeline.method",
                          loc.line(("pipeline", "method")))

    cfg = RunConfig(experiment=exp, scene=scene, pipeline=p,
                    sweep=_build(SweepConfig, data.get("sweep", {}), ("sweep",), loc),
                    bench=_build(BenchConfig, data.get("bench", {}), ("bench",), loc),
                    explicit=frozenset(explicit))
    top = {k: data[k] for k in ("frames_file", "tolerance_frames", "out", "seeds", "threads") if k in data}
    cfg = _build(RunConfig, top, (), loc, cfg, list(top))
    check(cfg, loc)
    return cfg


def check(cfg: RunConfig, loc: Optional[_Locator] = None) -> None:
    loc = loc or _Locator("")
    if not cfg.seeds:
        raise ConfigError("seeds: must be non-empty", "seeds", loc.line(("seeds",)))
    if cfg.threads < 1:
        raise ConfigError("threads: must be >= 1", "threads", loc.line(("threads",)))
    if cfg.bench.repeats < 1:
        raise ConfigError("bench.repeats: must be >= 1", "bench.repeats", loc.line(("bench", "repeats")))
    if any(n < 1 for n in cfg.bench.sizes):
        raise ConfigError("bench.sizes: sizes must be >= 1", "bench.sizes", loc.line(("bench", "sizes")))
    if any(s < 0 for s in cfg.sweep.sigma_t_grid + cfg.sweep.sigma_r_grid_deg):
        raise ConfigError("sweep: noise levels must be >= 0", "sweep", loc.line(("sweep",)))


def load_config(path, experiment: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", "--config", None)
    return parse_config(path.read_text(), experiment)


def parse_seeds(text: str) -> tuple:
    """``"1,2,5"`` or ranges like ``"0-9"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)-(\d+)", part)
        try:
            if m:
                lo, hi = int(m.group(1)), int(m.group(2))
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"--seeds: cannot parse {part!r}", "--seeds", None) from None
    if not seeds:
        raise ConfigError("--seeds: must be non-empty", "--seeds", None)
    return tuple(seeds)


def writable_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"out: cannot create {p}: {e.strerror}", "out", None) from e
    if not os.access(p, os.W_OK):
        raise ConfigError(f"out: {p} is not writable", "out", None)
    return p
