import json

import pytest

from objslam import formats
from objslam.cli import main

SMALL = {"scene": {"frames": 40, "n_objects": 10}}
SMALL_LOOP = {"scene": {"frames": 60}}
ZERO = {"scene": {"noise": {"sigma_t": 0.0, "sigma_r": 0.0, "sigma_e": 0.0, "p_miss": 0.0,
                                           "p_false": 0.0, "eps": 0.0}}}


def _config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_missing_config_is_usage_error(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)])
    assert code != 0
    err = _error(capsys)
    assert err["field"] == "--config"


@pytest.mark.parametrize("argv", [["run", "--bogus"], ["frobnicate"], [], ["bench", "--threads", "x"]])
def test_bad_arguments(argv, capsys):
    assert main(argv) == 2
    assert _error(capsys)["error"] == "usage"


def test_config_error_reports_field_and_line(tmp_path, capsys):
    cfg = _config(tmp_path, {"scene": {"frames": -3}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = _error(capsys)
    assert err["error"] == "config" and err["field"].startswith("scene") and err["line"] == 1


def test_bad_seeds_and_threads(tmp_path, capsys):
    assert main(["bench", "--seeds", "1-", "--out", str(tmp_path)]) == 2
    assert _error(capsys)["error"] == "config"
    assert main(["bench", "--threads", "0", "--out", str(tmp_path)]) == 2
    assert _error(capsys)["field"] == "--threads"


def test_assoc_sweep_rows_and_determinism(tmp_path):
    cfg = _config(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["assoc-sweep", "--config", cfg, "--out", str(a), "--seeds", "0,1", "--threads", "1"]) == 0
    assert main(["assoc-sweep", "--config", cfg, "--out", str(b), "--seeds", "0,1", "--threads", "2"]) == 0
    rows = formats.read_csv(a / "assoc_sweep.csv")
    assert len(rows) == 2 * 6 * 2 * 2
    assert {r["method"] for r in rows} == {"proposed", "nn"}
    for name in ("assoc_sweep.csv", "assoc_sweep_summary.csv"):
        assert formats.csv_body(a / name) == formats.csv_body(b / name)
    assert (a / "assoc_sweep.csv").read_text().startswith("# generated ")


def test_simulate_then_run_matches_live_run(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL_LOOP)
    sim, live, replay = tmp_path / "sim", tmp_path / "live", tmp_path / "replay"
    assert main(["simulate", "--config", cfg, "--out", str(sim), "--seeds", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["command"] == "simulate"
    assert main(["run", "--config", cfg, "--out", str(live), "--seeds", "3"]) == 0
    data = dict(SMALL_LOOP, frames_file=str(sim / "frames_{seed}.jsonl"))
    assert main(["run", "--config", _config(tmp_path, data, "replay.json"), "--out", str(replay),
                 "--seeds", "3"]) == 0
    assert formats.csv_body(live / "reports.csv") == formats.csv_body(replay / "reports.csv")
    assert (live / "trajectory_3.txt").read_text() == (replay / "trajectory_3.txt").read_text()
    for name in ("map_3.json", "report_3.json", "reports_summary.csv"):
        assert (live / name).exists()


def test_zero_noise_run(tmp_path):
    cfg = _config(tmp_path, ZERO)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--seeds", "0"]) == 0
    rep = json.loads((tmp_path / "o" / "report_0.json").read_text())
    assert rep["association_accuracy"] == 1.0
    assert rep["ate_rmse_optimized"] < 1e-6


def test_loop_eval_is_deterministic(tmp_path):
    cfg = _config(tmp_path, SMALL_LOOP)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["loop-eval", "--config", cfg, "--out", str(a), "--seeds", "0,1"]) == 0
    assert main(["loop-eval", "--config", cfg, "--out", str(b), "--seeds", "0,1", "--threads", "2"]) == 0
    rows = formats.read_csv(a / "loop_eval.csv")
    assert [(r["seed"], r["method"]) for r in rows] == [("0", "spectral"), ("0", "random_walk"),
                                                       ("1", "spectral"), ("1", "random_walk")]
    assert formats.csv_body(a / "loop_eval.csv") == formats.csv_body(b / "loop_eval.csv")


def test_loop_eval_needs_loop_closure(tmp_path, capsys):
    cfg = _config(tmp_path, dict(SMALL_LOOP, pipeline={"loop_closure": False}))
    assert main(["loop-eval", "--config", cfg, "--out", str(tmp_path / "o"), "--seeds", "0"]) == 2
    assert _error(capsys)["field"] == "pipeline.loop_closure"


def test_bench(tmp_path):
    cfg = _config(tmp_path, {"bench": {"sizes": [5, 10], "classes": [3], "repeats": 2}})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = formats.read_csv(tmp_path / "o" / "bench.csv")
    assert sorted({int(r["n"]) for r in rows}) == [5, 10]
