"""Experiment recipes shared by the CLI and the acceptance tests.

Each function runs one protocol end to end and returns plain rows or
reports; nothing here writes files.
"""
from __future__ import annotations

import math
import time
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .align import AlignParams, estimate_drift
from .assign import brute_force_lap, solve_lap
from .assoc import confusion_matrix
from .eval import (TrialReport, ate_rmse, association_accuracy, bench_matcher, loop_pr,
                         synthetic_graph)
from .geom import Pose, compose, se3_exp, transform_point
from .objmap import voxel_downsample
from .pipeline import Pipeline, PipelineParams
from .semgraph import (GraphMatch, NoFeasibleMatchError, SemanticGraph, brute_force_qap,
                       build_reward_matrix, match_graphs, match_random_walk, match_score,
                       random_walk_descriptors, verify_loop)
from .sim import NoiseConfig, SceneConfig, generate_loop_labels, generate_scene, simulate_frame, visible_objects

METHODS = ("spectral", "random_walk")


# ---------------------------------------------------------------------------
# assignment and graph-matching oracles


def lap_oracle_trials(n_trials: int = 500, max_dim: int = 7, seed: int = 0) -> dict:
    """Compare solve_lap with brute-force enumeration on random U[0,1] matrices."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    t0 = time.perf_counter()
    for _ in range(n_trials):
        n, m = rng.integers(1, max_dim + 1, size=2)
        c = rng.random((n, m))
        if solve_lap(c).total_cost != brute_force_lap(c).total_cost:
            mismatches += 1
    return {"trials": n_trials, "mismatches": mismatches, "seconds": time.perf_counter() - t0}


def random_graph_pair(rng, max_vertices: int = 4, n_classes: int = 2) -> tuple[SemanticGraph, SemanticGraph]:
    """Target graph plus a jittered, permuted partial copy, sometimes with a distractor vertex."""
    n = int(rng.integers(2, max_vertices + 1))
    c = rng.uniform(0, 2.0, (n, 3))
    labels = rng.integers(0, n_classes, n)
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < 0.8]
    gt = SemanticGraph.from_edges(c, labels, edges)
    keep = rng.permutation(n)[: int(rng.integers(2, n + 1))]
    qc = c[keep] + rng.normal(0, 0.1, (len(keep), 3))
    ql = labels[keep]
    if len(keep) < max_vertices and rng.random() < 0.5:
        qc = np.vstack([qc, rng.uniform(0, 2.0, (1, 3))])
        ql = np.append(ql, rng.integers(0, n_classes))
    m = len(ql)
    qedges = [(a, b) for a in range(m) for b in range(a + 1, m) if rng.random() < 0.8]
    return SemanticGraph.from_edges(qc, ql, qedges), gt


def qap_trials(n_trials: int = 100, max_vertices: int = 4, seed: int = 0, mu: float = 2.0) -> list[dict]:
    """Spectral match score against the brute-force QAP optimum on small random pairs."""
    rng = np.random.default_rng(seed)
    rows = []
    for t in range(n_trials):
        gq, gt = random_graph_pair(rng, max_vertices)
        rm = build_reward_matrix(gq, gt, mu)
        best = brute_force_qap(gq, gt, mu)
        try:
            pairs = match_graphs(gq, gt, mu, 0.0).pairs
        except NoFeasibleMatchError:
            pairs = []
        rows.append({"trial": t, "spectral": match_score(rm, pairs), "optimum": best.score})
    return rows


def planted_trial(seed: int, n: Optional[int] = None, n_classes: int = 6, jitter: float = 0.05,
                  mu: float = 2.0) -> float:
    """Fraction of vertices matched to their planted counterpart.

    The query is the target with vertices permuted, centroids rigidly moved
    and jittered by ``jitter`` per axis.
    """
    rng = np.random.default_rng([seed, 7])
    n = int(rng.integers(10, 31)) if n is None else n
    gt = synthetic_graph(n, n_classes, rng)
    perm = rng.permutation(n)
    motion = se3_exp(np.concatenate([rng.normal(0, 1.0, 3), rng.normal(0, 1.0, 3)]))
    qc = transform_point(motion, gt.centroids[perm]) + rng.normal(0, jitter, (n, 3))
    inv = np.argsort(perm)
    qedges = [(inv[a], inv[b]) for a, b in gt.edges]
    gq = SemanticGraph.from_edges(qc, gt.labels[perm], qedges)
    pairs = match_graphs(gq, gt, mu).pairs
    return sum(1 for j, k in pairs if perm[k] == j) / n


def twin_subgraph_graphs(seed: int, stretch: float = 1.5, jitter: float = 0.02):
    """Query plus a target holding a true cluster and a stretched twin with identical labels.

    The query is a fully co-visible cluster of four distinctly labelled
    objects.  The target contains that cluster (with one extra co-visible
    neighbour, as a map would) and a twin with the same labels and topology
    whose edge lengths are scaled by ``stretch``.  Label-only descriptors
    prefer the twin, whose isolated topology mirrors the query exactly.
    Returns (query, target, true pairs as (target, query)).
    """
    rng = np.random.default_rng([seed, 11])
    base = rng.uniform(0, 1.5, (4, 3))
    labels = np.arange(4)
    extra = base.mean(axis=0) + rng.normal(0, 0.8, 3)
    twin = (base - base.mean(axis=0)) * stretch + np.array([8.0, 0.0, 0.0])
    cents = np.vstack([base, [extra], twin])
    tlabels = np.concatenate([labels, [4], labels])
    full = [(a, b) for a in range(4) for b in range(a + 1, 4)]
    edges = full + [(a, 4) for a in range(4)] + [(a + 5, b + 5) for a, b in full]
    gt = SemanticGraph.from_edges(cents, tlabels, edges)
    perm = rng.permutation(4)
    qc = base[perm] + rng.normal(0, jitter, (4, 3))
    gq = SemanticGraph.from_edges(qc, labels[perm], full)
    truth = sorted((int(perm[k]), k) for k in range(4))
    return gq, gt, truth


def twin_subgraph_trial(seed: int, mu: float = 2.0, dist_tol: float = 0.25, n_walks: int = 200,
                        depth: int = 4) -> dict:
    gq, gt, truth = twin_subgraph_graphs(seed)
    truth = set(truth)
    out = {}
    sm = match_graphs(gq, gt, mu)
    rng = np.random.default_rng([seed, 12])
    rw = match_random_walk(random_walk_descriptors(gq, n_walks, depth, rng),
                           random_walk_descriptors(gt, n_walks, depth, rng))
    for name, m in (("spectral", sm), ("random_walk", rw)):
        wrong = [p for p in m.pairs if p not in truth]
        out[f"{name}_false_raw"] = len(wrong)
        passed = verify_loop(m, gq, gt, 0.5, dist_tol)
        out[f"{name}_verified"] = bool(passed)
        out[f"{name}_false_verified"] = len(wrong) if passed else 0
    return out


# ---------------------------------------------------------------------------
# drift recovery


def _object_clouds(gt, frames, pose_fn, voxel: float = 0.02) -> dict:
    pts: dict = {}
    cam = gt.cfg.camera
    for f in frames:
        depth, ids = gt.render(f)
        t_wc = pose_fn(f)
        for i in visible_objects(gt, f):
            p = cam.backproject(depth, ids == i)
            if len(p):
                pts.setdefault(i, []).append(transform_point(t_wc, p))
    return {i: voxel_downsample(np.concatenate(v), voxel)[0] for i, v in pts.items()}


def random_drift(rng, max_t: float = 0.5, max_r_deg: float = 10.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return se3_exp(np.concatenate([direction * rng.uniform(0, max_t),
                                   axis * math.radians(rng.uniform(0, max_r_deg))]))


def drift_trial(seed: int, max_t: float = 0.5, max_r_deg: float = 10.0,
                params: Optional[AlignParams] = None, drift: Optional[Pose] = None) -> Optional[dict]:
    """Inject a random drift into a revisit window and recover it with estimate_drift.

    The global map is built from true poses around a first-lap frame, the
    local map from a 10-frame window one lap later with every camera pose
    premultiplied by the drift.  Matched objects are given by ground truth
    so the measurement isolates the alignment.  ``drift`` fixes the injected
    transform instead of drawing it.  The revisit frame is redrawn until the
    windows share three objects; None if that never happens.
    """
    cfg = SceneConfig(frames=300, revisit=True, laps=2, seed=seed)
    gt = generate_scene(cfg)
    rng = np.random.default_rng([seed, 13])
    drawn = random_drift(rng, max_t, max_r_deg)
    drift = drawn if drift is None else drift
    lap = cfg.frames // 2
    # redraw until the two windows share the three objects a loop needs
    for _ in range(100):
        k0 = int(rng.integers(150, 280))
        seen = {i for f in range(k0, min(k0 + 10, cfg.frames)) for i in visible_objects(gt, f)}
        before = {i for f in range(k0 - lap - 10, k0 - lap + 20) for i in visible_objects(gt, f)}
        if len(seen & before) >= 3:
            break
    global_map = _object_clouds(gt, range(k0 - lap - 10, k0 - lap + 20), lambda f: gt.poses[f])
    local_map = _object_clouds(gt, range(k0, min(k0 + 10, cfg.frames)), lambda f: compose(drift, gt.poses[f]))
    ids = sorted(i for i in local_map if i in global_map)
    if len(ids) < 3:
        return None
    labels = [gt.objects[i].cls for i in ids]
    gq = SemanticGraph.from_edges([local_map[i].mean(axis=0) for i in ids], labels, [])
    gg = SemanticGraph.from_edges([global_map[i].mean(axis=0) for i in ids], labels, [])
    match = GraphMatch([(j, j) for j in range(len(ids))], 0.0)
    res = estimate_drift(match, gq, gg, [local_map[i] for i in ids], [global_map[i] for i in ids],
                         params or AlignParams(icp_min_radius=0.05), rng)
    err = compose(res.t_rel, drift)
    return {"seed": seed, "objects": len(ids), "drift_t": float(np.linalg.norm(drift.t)),
            "drift_r_deg": math.degrees(drift.angle), "err_t": float(np.linalg.norm(err.t)),
            "err_r_deg": math.degrees(err.angle), "converged": res.converged}


# ---------------------------------------------------------------------------
# association sweep


SIGMA_T_GRID = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
SIGMA_R_GRID_DEG = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)


def assoc_sweep(scene: SceneConfig, seeds: Sequence[int], sigma_t_grid=SIGMA_T_GRID,
                sigma_r_grid_deg=SIGMA_R_GRID_DEG, params: Optional[PipelineParams] = None) -> list[dict]:
    """Association accuracy of the proposed method and the nearest-neighbour baseline.

    Absolute camera poses are perturbed independently per frame, translation
    and rotation swept separately.  One row per method, noise type, level and
    seed.
    """
    base = params or PipelineParams()
    rows = []
    for seed in seeds:
        cfg = replace(scene, seed=int(seed))
        gt = generate_scene(cfg)
        levels = [("sigma_t", s, s, 0.0) for s in sigma_t_grid]
        levels += [("sigma_r", s, 0.0, math.radians(s)) for s in sigma_r_grid_deg]
        cache: dict = {}
        for kind, level, st, sr in levels:
            noise = replace(cfg.noise, sigma_t=st, sigma_r=sr, mode="absolute")
            key = (st, sr)
            if key not in cache:
                frames = [simulate_frame(gt, k, noise=noise) for k in range(cfg.frames)]
                cache[key] = {}
                for method in ("proposed", "nn"):
                    p = replace(base, method=method, loop_closure=False)
                    pl = run_stream(frames, cfg, seed, p)
                    cache[key][method] = association_accuracy(pl.track_detections(), pl.gt_detections())
            for method in ("proposed", "nn"):
                rows.append({"method": method, "noise": kind, "level": level, "seed": int(seed),
                             "accuracy": cache[key][method]})
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation over seeds per (method, noise, level)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], r["noise"], r["level"]), []).append(r["accuracy"])
    out = []
    for (method, noise, level), acc in sorted(groups.items()):
        out.append({"method": method, "noise": noise, "level": level, "mean": float(np.mean(acc)),
                    "std": float(np.std(acc)), "n": len(acc)})
    return out


# ---------------------------------------------------------------------------
# full trials with loop closure


def loop_scene(seed: int = 0, sigma_t: float = 0.01, frames: int = 300, laps: float = 3.0) -> SceneConfig:
    """Revisiting circle used for the loop-detection and trajectory experiments."""
    return SceneConfig(frames=frames, revisit=True, laps=laps, seed=seed,
                       noise=NoiseConfig(sigma_t=sigma_t, sigma_r=sigma_t / 10.0, sigma_e=0.1, p_miss=0.05))


def default_pipeline_params(cfg: SceneConfig, params: Optional[PipelineParams] = None) -> PipelineParams:
    """Fill the scene-dependent defaults: loop gap and odometry information."""
    p = params or PipelineParams()
    return replace(p, stale_gap=cfg.gap, odom_sigma_t=cfg.noise.sigma_t, odom_sigma_r=cfg.noise.sigma_r)


def loop_counts(events, method: str, labels, tolerance: int = 10) -> dict:
    ev = [e for e in events if e.method == method]
    detected = {(e.match_frame, e.frame) for e in ev}
    verified = {(e.match_frame, e.frame) for e in ev if e.verified}
    raw, ver = loop_pr(detected, labels, tolerance), loop_pr(verified, labels, tolerance)
    return {"detections": raw.detections, "true_positives": raw.true_positives,
            "false_positives": raw.false_positives, "recall": raw.recall,
            "verified": ver.detections, "verified_false_positives": ver.false_positives,
            "verified_recall": ver.recall, "applied": sum(e.applied for e in ev)}


def run_stream(frames, scene: SceneConfig, seed: int, params: PipelineParams) -> Pipeline:
    """Feed a frame stream (live or read from disk) through a fresh pipeline."""
    pl = Pipeline(scene.camera, confusion_matrix(scene.n_classes, scene.noise.eps), params, seed)
    for fr in frames:
        pl.step(fr)
    pl.finish()
    return pl


def score_run(pl: Pipeline, true_poses, labels, seed: int, tolerance: int = 10) -> TrialReport:
    report = TrialReport(config={}, seed=int(seed))
    report.association_accuracy = association_accuracy(pl.track_detections(), pl.gt_detections())
    report.ate_rmse_odometry = ate_rmse(pl.odometry_only, true_poses)
    report.ate_rmse_optimized = ate_rmse(pl.trajectory(), true_poses)
    if pl.p.loop_closure:
        for method in METHODS:
            report.loops[method] = loop_counts(pl.loop_events, method, labels, tolerance)
        spectral = [e for e in pl.loop_events if e.method == "spectral"]
        report.matcher_ms = float(np.median([e.ms for e in spectral])) if spectral else None
    return report


def run_trial(scene: SceneConfig, seed: int, params: Optional[PipelineParams] = None,
              tolerance: int = 10) -> tuple[TrialReport, Pipeline]:
    """Simulate, run the full pipeline and score it."""
    cfg = replace(scene, seed=int(seed))
    gt = generate_scene(cfg)
    p = default_pipeline_params(cfg, params) if params is None else params
    pl = run_stream((simulate_frame(gt, k) for k in range(cfg.frames)), cfg, seed, p)
    return score_run(pl, gt.poses, generate_loop_labels(gt), seed, tolerance), pl


def lm_monotone(pl: Pipeline) -> bool:
    """Every accepted LM step in the run lowered the cost."""
    return all(b < a for h in pl.lm_histories for a, b in zip(h, h[1:]))


def bench(sizes=(10, 20, 30, 40, 50), classes=(5,), repeats: int = 5, seed: int = 0) -> list[dict]:
    return bench_matcher(sizes, classes, repeats, seed)
