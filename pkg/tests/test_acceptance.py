"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import itertools
import subprocess
import sys
import time
import timeit
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from objslam.eval import synthetic_graph, time_random_walk, time_spectral
from objslam.experiments import (assoc_sweep, default_pipeline_params, drift_trial, lap_oracle_trials,
                                 lm_monotone, loop_scene, planted_trial, qap_trials, run_trial,
                                 twin_subgraph_trial)
from objslam.semgraph import build_reward_matrix, extract_graph
from objslam.sim import SceneConfig, generate_scene

LOOP_SEEDS = range(20)
SWEEP_SEEDS = range(20)


@pytest.fixture
def verdict(capsys):
    def report(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def loop_runs():
    out = []
    for s in LOOP_SEEDS:
        report, pl = run_trial(loop_scene(seed=s), s)
        out.append((report, lm_monotone(pl)))
    return out


def test_c1_assignment_oracle(verdict):
    # best of three complete runs for the time; every run must match exactly
    runs = [lap_oracle_trials(500, 7, seed=0) for _ in range(3)]
    mismatches = max(r["mismatches"] for r in runs)
    secs = min(r["seconds"] for r in runs)
    verdict("c1 assignment oracle", mismatches == 0 and secs < 1.0,
            f"{mismatches} mismatches in 500 trials, {secs:.3f} s (best of 3)")


def test_c2_qap_quality(verdict):
    t0 = time.perf_counter()
    rows = qap_trials(100, 4, seed=0)
    secs = time.perf_counter() - t0
    ratio = np.array([r["spectral"] / r["optimum"] if r["optimum"] > 0 else 1.0 for r in rows])
    exact = np.mean([abs(r["spectral"] - r["optimum"]) <= 1e-9 * max(1.0, r["optimum"]) for r in rows])
    verdict("c2 QAP quality", ratio.mean() >= 0.95 and exact >= 0.80 and secs < 10,
            f"mean {ratio.mean():.4f} of optimum, optimal in {exact:.0%}, {secs:.2f} s")


def test_c3_planted_recovery(verdict):
    acc = np.array([planted_trial(s) for s in range(50)])
    verdict("c3 planted recovery", acc.mean() >= 0.95,
            f"mean {acc.mean():.4f}, min {acc.min():.3f} over 50 seeds")


def test_c4_association_sweep(verdict):
    scene = SceneConfig(n_objects=20, n_classes=5, frames=200)
    rows = assoc_sweep(scene, list(SWEEP_SEEDS), params=default_pipeline_params(scene))
    mean = {}
    for key in {(r["method"], r["noise"], r["level"]) for r in rows}:
        mean[key] = np.mean([r["accuracy"] for r in rows if (r["method"], r["noise"], r["level"]) == key])
    levels = sorted({(n, lv) for _, n, lv in mean})
    every = all(mean[("proposed", n, lv)] >= mean[("nn", n, lv)] for n, lv in levels)
    top = [("sigma_t", 0.08), ("sigma_t", 0.10), ("sigma_r", 8.0), ("sigma_r", 10.0)]
    margin = np.mean([mean[("proposed",) + k] - mean[("nn",) + k] for k in top])
    zero = min(mean[("proposed", n, 0.0)] for n in ("sigma_t", "sigma_r"))
    worst = min(mean[("proposed", n, lv)] - mean[("nn", n, lv)] for n, lv in levels)
    verdict("c4 association sweep", every and margin >= 0.05 and zero == 1.0,
            f"worst per-level margin {worst:+.4f}, top-level margin {margin:+.4f}, "
            f"zero-noise accuracy {zero:.4f}, {len(SWEEP_SEEDS)} seeds")


def test_c5_loop_detection(verdict, loop_runs):
    loops = [r.loops for r, _ in loop_runs]
    false_verified = sum(lp["spectral"]["verified_false_positives"] for lp in loops)
    rec_sp = np.mean([lp["spectral"]["verified_recall"] for lp in loops])
    rec_rw = np.mean([lp["random_walk"]["verified_recall"] for lp in loops])
    twins = [twin_subgraph_trial(s) for s in range(5)]
    twin_ok = all(t["random_walk_false_raw"] >= 1 and t["spectral_false_verified"] == 0
                  and t["spectral_false_raw"] == 0 for t in twins)
    verdict("c5 loop detection", false_verified == 0 and rec_sp >= rec_rw and twin_ok,
            f"spectral verified false positives {false_verified}, recall {rec_sp:.3f} vs "
            f"random walk {rec_rw:.3f}, twin scene ok {twin_ok}")


def test_c6_drift_recovery(verdict):
    trials = [drift_trial(s) for s in range(50)]
    ok = [t is not None and t["err_t"] <= 0.05 and t["err_r_deg"] <= 1.0 for t in trials]
    verdict("c6 drift recovery", np.mean(ok) >= 0.90, f"{sum(ok)}/50 within 5 cm and 1 deg")


def test_c7_trajectory_error(verdict, loop_runs):
    ratios = np.array([r.ate_rmse_optimized / r.ate_rmse_odometry for r, _ in loop_runs])
    monotone = all(m for _, m in loop_runs)
    verdict("c7 trajectory error", ratios.mean() <= 0.5 and monotone,
            f"mean ATE ratio {ratios.mean():.4f} (max {ratios.max():.3f}), LM monotone {monotone}")


def _scene_graph(n_objects: int, seed: int):
    gt = generate_scene(SceneConfig(n_objects=n_objects, n_classes=5, seed=seed))
    covis = {(a, b) for row in gt.visibility() for a, b in itertools.combinations(np.flatnonzero(row), 2)}
    objs = [SimpleNamespace(id=o.id, centroid=o.center, label=o.cls, embeddings=[o.embedding])
            for o in gt.objects]
    return extract_graph(objs, covis)


def _best_ms(g) -> float:
    # best of repeated runs: the quantity is the cost of the computation,
    # not of scheduler interruptions on a shared machine
    return min(timeit.repeat(lambda: time_spectral(g, g), number=1, repeat=30)) * 1e3


def test_c8_sparsity_and_runtime(verdict):
    sparsity = [build_reward_matrix(g, g).sparsity
                for g in (_scene_graph(n, s) for n in (10, 20) for s in range(3))]
    # self-match on the co-visibility graphs of simulated 50-object scenes
    scene_ms = max(_best_ms(_scene_graph(50, s)) for s in range(3))
    # the benchmark graph is denser (about twice the edges); reported only
    dense_ms = _best_ms(synthetic_graph(50, 5, np.random.default_rng([0, 50, 5])))
    medians = {}
    for n in (20, 30, 40, 50):
        g = synthetic_graph(n, 5, np.random.default_rng([0, n, 5]))
        sp = np.median([time_spectral(g, g)["total_ms"] for _ in range(15)])
        rw = np.median([time_random_walk(g, g, 200, 4, r) for r in range(15)])
        medians[n] = (sp, rw)
    faster = all(sp < rw for sp, rw in medians.values())
    verdict("c8 sparsity and runtime", min(sparsity) >= 0.9 and scene_ms < 5.0 and faster,
            f"min sparsity {min(sparsity):.3f}, 50-object scene self-match {scene_ms:.2f} ms "
            f"(dense benchmark graph {dense_ms:.2f} ms), medians spectral vs random walk "
            + ", ".join(f"n={n}: {sp:.2f} vs {rw:.2f} ms" for n, (sp, rw) in medians.items()))


INVARIANTS = [
    "tests/test_geom.py::test_log_exp_round_trip",
    "tests/test_geom.py::test_round_trip_small_angles",
    "tests/test_semgraph.py::test_eigenvector_non_negative",
    "tests/test_posegraph.py::test_jacobians_match_central_differences",
    "tests/test_objmap.py::test_label_dist_stays_probability",
    "tests/test_cli.py::test_assoc_sweep_rows_and_determinism",
    "tests/test_cli.py::test_loop_eval_is_deterministic",
]


def test_c9_invariant_suite(verdict):
    root = Path(__file__).resolve().parent.parent
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *INVARIANTS],
                          cwd=root, capture_output=True, text=True)
    secs = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict("c9 invariant suite", proc.returncode == 0 and secs < 60, f"{tail} ({secs:.1f} s)")
