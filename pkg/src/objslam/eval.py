"""Metrics: association accuracy, loop precision/recall, trajectory error, matcher timing."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assign import solve_lap
from .geom import DegenerateInputError, Pose, fit_rigid, transform_point
from .semgraph import (SemanticGraph, build_reward_matrix, discretize, match_random_walk,
                       principal_eigenvector, random_walk_descriptors)


class EmptyInputError(ValueError):
    pass


def association_accuracy(track_detections: dict, gt_detections: dict) -> float:
    """Share of ground-truth detections carried by the best one-to-one track/object pairing.

    The reward between an algorithm id and a ground-truth id is the number
    of detection instances they share; the pairing maximises total reward.
    """
    total = sum(len(v) for v in gt_detections.values())
    if total == 0:
        raise EmptyInputError("no ground-truth detections")
    if not track_detections:
        return 0.0
    gt_ids = sorted(gt_detections)
    alg_ids = sorted(track_detections)
    gt_index = {g: i for i, g in enumerate(gt_ids)}
    ref_gt = {}
    for g, refs in gt_detections.items():
        for r in refs:
            ref_gt[r] = gt_index[g]
    reward = np.zeros((len(alg_ids), len(gt_ids)))
    for a, aid in enumerate(alg_ids):
        for r in set(track_detections[aid]):
            g = ref_gt.get(r)
            if g is not None:
                reward[a, g] += 1
    sol = solve_lap(reward.max() - reward)
    got = sum(reward[a, g] for a, g in sol.pairs)
    return float(got / total)


@dataclass
class LoopPR:
    precision: float
    recall: float
    detections: int
    true_positives: int
    false_positives: int
    labels: int


def loop_pr(detected, labels, tolerance_frames: int = 10) -> LoopPR:
    """Precision and recall of detected loop frame pairs against labelled pairs.

    A detection is correct when both frames lie within ``tolerance_frames``
    of some labelled pair; a label is recalled when some detection lies
    within tolerance of it.  With no detections precision is reported as 1.
    """
    det = np.array(sorted(tuple(sorted(p)) for p in detected), dtype=int).reshape(-1, 2)
    lab = np.array(sorted(tuple(sorted(p)) for p in labels), dtype=int).reshape(-1, 2)
    if len(det) and len(lab):
        close = (np.abs(det[:, None, 0] - lab[None, :, 0]) <= tolerance_frames) & \
                (np.abs(det[:, None, 1] - lab[None, :, 1]) <= tolerance_frames)
        tp = int(close.any(axis=1).sum())
        recalled = int(close.any(axis=0).sum())
    else:
        tp, recalled = 0, 0
    precision = tp / len(det) if len(det) else 1.0
    recall = recalled / len(lab) if len(lab) else 0.0
    return LoopPR(precision, recall, len(det), tp, len(det) - tp, len(lab))


def _positions(traj) -> np.ndarray:
    if len(traj) and isinstance(traj[0], Pose):
        return np.array([p.t for p in traj])
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def ate_rmse(est, gt) -> float:
    """Translational RMSE after rigidly aligning ``est`` onto ``gt``.

    When the positions are too degenerate for a rotation fit (fewer than
    three, or collinear) only the centroids are aligned.
    """
    a, b = _positions(est), _positions(gt)
    if len(a) != len(b):
        raise ValueError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise EmptyInputError("empty trajectory")
    try:
        aligned = transform_point(fit_rigid(a, b), a)
    except DegenerateInputError:
        aligned = a - a.mean(axis=0) + b.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((aligned - b) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# matcher benchmark


def synthetic_graph(n: int, n_classes: int, rng, extent: float = 6.0, covis_radius: float = 2.5) -> SemanticGraph:
    """Objects scattered in a square room; objects closer than ``covis_radius`` are co-visible."""
    c = np.column_stack([rng.uniform(0, extent, (n, 2)), rng.uniform(0.3, 1.5, n)])
    labels = rng.integers(0, n_classes, n)
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    i, j = np.nonzero(np.triu(d < covis_radius, 1))
    return SemanticGraph.from_edges(c, labels, zip(i, j))


def time_spectral(gq, gt, mu=2.0, min_pair_score=0.05) -> dict:
    t0 = time.perf_counter()
    rm = build_reward_matrix(gq, gt, mu)
    t1 = time.perf_counter()
    v = principal_eigenvector(rm)
    t2 = time.perf_counter()
    discretize(v, gq, gt, min_pair_score)
    t3 = time.perf_counter()
    return {"sparsity": rm.sparsity, "build_ms": (t1 - t0) * 1e3, "eig_ms": (t2 - t1) * 1e3,
            "lap_ms": (t3 - t2) * 1e3, "total_ms": (t3 - t0) * 1e3}


def time_random_walk(gq, gt, n_walks=200, depth=4, seed=0) -> float:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    dq = random_walk_descriptors(gq, n_walks, depth, rng)
    dt = random_walk_descriptors(gt, n_walks, depth, rng)
    match_random_walk(dq, dt)
    return (time.perf_counter() - t0) * 1e3


BENCH_COLUMNS = ["n", "m", "sparsity", "build_ms", "eig_ms", "lap_ms", "total_ms", "rw_ms", "classes"]


def bench_matcher(sizes: Sequence[int], classes: Sequence[int] = (5,), repeats: int = 5, seed: int = 0,
                  mu: float = 2.0, n_walks: int = 200, depth: int = 4) -> list[dict]:
    """Median timings of the spectral matcher and the random-walk baseline on self-matches."""
    rows = []
    for c in classes:
        for n in sizes:
            rng = np.random.default_rng([seed, n, c])
            g = synthetic_graph(n, c, rng)
            runs = [time_spectral(g, g, mu) for _ in range(repeats)]
            rw = [time_random_walk(g, g, n_walks, depth, seed + r) for r in range(repeats)]
            row = {"n": n, "m": n, "sparsity": runs[0]["sparsity"]}
            for key in ("build_ms", "eig_ms", "lap_ms", "total_ms"):
                row[key] = float(np.median([r[key] for r in runs]))
            row["rw_ms"] = float(np.median(rw))
            row["classes"] = c
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# reports


@dataclass
class TrialReport:
    config: dict
    seed: int
    association_accuracy: Optional[float] = None
    loops: dict = field(default_factory=dict)
    ate_rmse_odometry: Optional[float] = None
    ate_rmse_optimized: Optional[float] = None
    matcher_ms: Optional[float] = None
    sparsity: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    CSV_COLUMNS = ("seed", "association_accuracy", "ate_rmse_odometry", "ate_rmse_optimized",
                   "spectral_detections", "spectral_tp", "spectral_fp", "spectral_verified",
                   "spectral_verified_fp", "random_walk_detections", "random_walk_tp",
                   "random_walk_fp", "random_walk_verified", "random_walk_verified_fp")

    def csv_row(self) -> list:
        flat = {"seed": self.seed, "association_accuracy": self.association_accuracy,
                "ate_rmse_odometry": self.ate_rmse_odometry, "ate_rmse_optimized": self.ate_rmse_optimized}
        for method, counts in self.loops.items():
            flat[f"{method}_detections"] = counts.get("detections")
            flat[f"{method}_tp"] = counts.get("true_positives")
            flat[f"{method}_fp"] = counts.get("false_positives")
            flat[f"{method}_verified"] = counts.get("verified")
            flat[f"{method}_verified_fp"] = counts.get("verified_false_positives")
        return [flat.get(c) for c in self.CSV_COLUMNS]


def mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None and not (isinstance(x, float) and math.isnan(x))],
                   dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())
