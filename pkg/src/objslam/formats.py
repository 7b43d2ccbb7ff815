"""File formats: frame streams, graphs, map snapshots and reports.

Frame streams are JSON-lines, one frame per line, with masks run-length
encoded and depth maps appended to a little-endian float64 side file.  CSV
outputs carry a single ``#`` comment line with the generation time; the rest
of the file is a pure function of the inputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .assoc import Detection
from .geom import Pose
from .objmap import ObjectMap
from .semgraph import SemanticGraph
from .sim import FrameData

FLOAT32_LE = np.dtype("<f4")
DEPTH_DTYPE = np.dtype("<f8")       # exact replay of simulated depth


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# ---------------------------------------------------------------------------
# masks


def rle_encode(mask) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"shape": list(np.shape(mask)), "runs": runs}


def rle_decode(rle: dict) -> np.ndarray:
    shape = tuple(int(s) for s in rle["shape"])
    runs = np.asarray(rle["runs"], dtype=np.int64)
    size = int(np.prod(shape))
    if runs.sum() != size or np.any(runs < 0):
        raise FormatError(f"mask runs sum to {int(runs.sum())}, expected {size}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


# ---------------------------------------------------------------------------
# frame streams


def _frame_record(fr: FrameData, depth_offset: int) -> dict:
    dets = []
    for d in fr.detections:
        dets.append({"label": int(d.label), "confidence": float(d.confidence),
                     "embedding": [float(x) for x in d.embedding],
                     "gt_id": None if d.gt_id is None else int(d.gt_id),
                     "mask": rle_encode(d.mask)})
    return {"frame": int(fr.index), "odometry": fr.odometry.to_list(),
            "true_pose": None if fr.true_pose is None else fr.true_pose.to_list(),
            "visible": [int(v) for v in fr.visible],
            "depth": {"offset": depth_offset, "shape": list(fr.depth.shape)},
            "detections": dets}


def write_frames(path, frames: Iterable[FrameData], depth_path=None) -> int:
    """Write a frame stream; returns the number of frames written."""
    path = Path(path)
    depth_path = Path(depth_path) if depth_path else path.with_suffix(".depth.f64")
    n = 0
    with open(path, "w") as out, open(depth_path, "wb") as dout:
        offset = 0
        for fr in frames:
            blob = np.ascontiguousarray(fr.depth, dtype=DEPTH_DTYPE).tobytes()
            rec = _frame_record(fr, offset)
            rec["depth"]["file"] = depth_path.name
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")
            dout.write(blob)
            offset += len(blob)
            n += 1
    return n


def read_frames(path) -> Iterator[FrameData]:
    """Stream frames back from ``write_frames`` output.

    Frames without ``true_pose`` (real data) get ``None`` there; ``visible``
    and detection ``gt_id`` are optional for the same reason.
    """
    path = Path(path)
    depth_cache: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dinfo = rec["depth"]
                dfile = path.parent / dinfo.get("file", path.with_suffix(".depth.f64").name)
                if dfile not in depth_cache:
                    depth_cache[dfile] = np.memmap(dfile, dtype=DEPTH_DTYPE, mode="r")
                shape = tuple(dinfo["shape"])
                start = int(dinfo["offset"]) // DEPTH_DTYPE.itemsize
                depth = np.array(depth_cache[dfile][start:start + int(np.prod(shape))],
                                 dtype=float).reshape(shape)
                dets = [Detection(rle_decode(d["mask"]), int(d["label"]), float(d["confidence"]),
                                  np.asarray(d["embedding"], dtype=float), d.get("gt_id"))
                        for d in rec["detections"]]
                true_pose = Pose.from_list(rec["true_pose"]) if rec.get("true_pose") else None
                yield FrameData(int(rec["frame"]), dets, depth, Pose.from_list(rec["odometry"]),
                                true_pose, list(rec.get("visible", [])))
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e


def loop_labels_from_visibility(visible: Sequence[Sequence[int]], gap: int) -> set:
    """Frame pairs more than ``gap`` apart sharing more than two visible objects."""
    ids = sorted({i for v in visible for i in v})
    col = {i: c for c, i in enumerate(ids)}
    v = np.zeros((len(visible), len(ids)), dtype=np.int32)
    for r, vis in enumerate(visible):
        v[r, [col[i] for i in vis]] = 1
    common = v @ v.T
    i, j = np.nonzero(np.triu(common > 2, k=gap + 1))
    return {(int(a), int(b)) for a, b in zip(i, j)}


# ---------------------------------------------------------------------------
# graphs and maps


def write_graph(path, g: SemanticGraph) -> None:
    with open(path, "w") as f:
        json.dump(g.to_dict(), f, indent=1)


def read_graph(path) -> SemanticGraph:
    with open(path) as f:
        return SemanticGraph.from_dict(json.load(f))


def write_map(path, m: ObjectMap, points_path=None) -> dict:
    """Map snapshot JSON; with ``points_path`` the object points go to a float32 side file."""
    objs, offset = [], 0
    pf = open(points_path, "wb") if points_path else None
    try:
        for o in sorted(m, key=lambda o: o.id):
            rec = {"id": int(o.id), "centroid": [float(x) for x in o.centroid],
                   "label_dist": [float(x) for x in o.label_dist], "points": int(len(o.points))}
            if pf is not None:
                blob = np.ascontiguousarray(o.points, dtype=FLOAT32_LE).tobytes()
                pf.write(blob)
                rec["points_offset"] = offset
                offset += len(blob)
            objs.append(rec)
    finally:
        if pf is not None:
            pf.close()
    snap = {"n_classes": m.n_classes, "voxel": m.voxel, "objects": objs}
    if points_path:
        snap["points_file"] = Path(points_path).name
    with open(path, "w") as f:
        json.dump(snap, f, indent=1)
    return snap


def read_map_points(path) -> dict:
    """Object id -> (P, 3) points from a snapshot written with a side file."""
    path = Path(path)
    with open(path) as f:
        snap = json.load(f)
    if "points_file" not in snap:
        raise FormatError(f"{path}: snapshot has no points side file")
    raw = np.fromfile(path.parent / snap["points_file"], dtype=FLOAT32_LE)
    out = {}
    for o in snap["objects"]:
        start = o["points_offset"] // FLOAT32_LE.itemsize
        out[o["id"]] = raw[start:start + 3 * o["points"]].reshape(-1, 3).astype(float)
    return out


# ---------------------------------------------------------------------------
# reports and tables


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Pose):
        return o.to_list()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj, indent: Optional[int] = 1) -> str:
    return json.dumps(obj, indent=indent, default=_json_default, sort_keys=True)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable) -> str:
    """CSV body: header plus rows given as dicts or sequences."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        values = [r.get(c) for c in columns] if isinstance(r, dict) else list(r)
        w.writerow([_cell(v) for v in values])
    return buf.getvalue()


def write_csv(path, columns: Sequence[str], rows: Iterable, stamp: Optional[str] = None) -> None:
    """CSV with one leading ``#`` line carrying the generation time."""
    stamp = stamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(path, "w", newline="") as f:
        f.write(f"# generated {stamp}\n")
        f.write(csv_text(columns, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def csv_body(path) -> str:
    """Everything after the timestamp line."""
    with open(path) as f:
        return "".join(ln for ln in f if not ln.startswith("#"))


def aggregate(rows: Sequence[dict], keys: Sequence[str], values: Sequence[str]) -> list[dict]:
    """Mean and standard deviation of ``values`` over rows grouped by ``keys``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r.get(k) for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple((v is None, str(type(v)), v) for v in k)):
        rs = groups[key]
        row = dict(zip(keys, key))
        row["n"] = len(rs)
        for v in values:
            xs = np.array([r[v] for r in rs if r.get(v) is not None], dtype=float)
            xs = xs[~np.isnan(xs)]
            row[f"{v}_mean"] = float(xs.mean()) if len(xs) else float("nan")
            row[f"{v}_std"] = float(xs.std()) if len(xs) else float("nan")
        out.append(row)
    return out


def aggregate_columns(keys: Sequence[str], values: Sequence[str]) -> list[str]:
    return list(keys) + ["n"] + [f"{v}_{s}" for v in values for s in ("mean", "std")]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
