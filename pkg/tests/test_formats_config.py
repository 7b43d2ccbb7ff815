import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objslam import formats
from objslam.config import ConfigError, load_config, parse_config, parse_seeds
from objslam.objmap import ObjectMap
from objslam.semgraph import SemanticGraph
from objslam.sim import SceneConfig, generate_scene, simulate_frame, NoiseConfig


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31), st.floats(0, 1))
def test_rle_round_trip(h, w, seed, p):
    m = np.random.default_rng(seed).random((h, w)) < p
    rle = formats.rle_encode(m)
    assert sum(rle["runs"]) == h * w
    assert np.array_equal(formats.rle_decode(rle), m)


def test_rle_starts_with_false_run():
    assert formats.rle_encode(np.array([[True, True, False]]))["runs"] == [0, 2, 1]
    with pytest.raises(formats.FormatError):
        formats.rle_decode({"shape": [2, 2], "runs": [1, 1]})


def test_frame_stream_round_trip(tmp_path):
    cfg = SceneConfig(frames=6, seed=1, noise=NoiseConfig(sigma_t=0.01, sigma_e=0.1, p_false=0.5))
    gt = generate_scene(cfg)
    frames = [simulate_frame(gt, k) for k in range(cfg.frames)]
    assert formats.write_frames(tmp_path / "f.jsonl", frames) == 6
    back = list(formats.read_frames(tmp_path / "f.jsonl"))
    for a, b in zip(frames, back):
        assert a.index == b.index and a.visible == b.visible
        assert np.array_equal(a.depth, b.depth)
        assert a.odometry.to_list() == b.odometry.to_list()
        assert len(a.detections) == len(b.detections)
        for da, db in zip(a.detections, b.detections):
            assert np.array_equal(da.mask, db.mask) and da.label == db.label
            assert np.array_equal(da.embedding, db.embedding) and da.gt_id == db.gt_id


def test_frame_stream_reports_bad_line(tmp_path):
    path = tmp_path / "f.jsonl"
    gt = generate_scene(SceneConfig(frames=2, seed=0))
    formats.write_frames(path, [simulate_frame(gt, 0)])
    with open(path, "a") as f:
        f.write('{"frame": 1}\n')
    with pytest.raises(formats.FormatError, match=":2:"):
        list(formats.read_frames(path))


def test_loop_labels_from_visibility():
    vis = [[0, 1, 2], [0, 1, 2], [5], [0, 1, 2, 3]]
    assert formats.loop_labels_from_visibility(vis, 1) == {(0, 3), (1, 3)}


def test_graph_and_map_files(tmp_path):
    g = SemanticGraph.from_edges(np.eye(3), [0, 1, 2], [(0, 1), (1, 2)])
    formats.write_graph(tmp_path / "g.json", g)
    back = formats.read_graph(tmp_path / "g.json")
    assert np.array_equal(back.edges, g.edges) and np.allclose(back.lengths, g.lengths)

    gt = generate_scene(SceneConfig(frames=2, seed=0))
    fr = simulate_frame(gt, 0)
    m = ObjectMap(5)
    for d in fr.detections:
        m.create(d, fr.depth, gt.cfg.camera, fr.true_pose)
    snap = formats.write_map(tmp_path / "m.json", m, tmp_path / "m.f32")
    assert len(snap["objects"]) == len(m)
    pts = formats.read_map_points(tmp_path / "m.json")
    for o in m:
        assert np.allclose(pts[o.id], o.points, atol=1e-6)
        assert abs(sum(snap["objects"][o.id]["label_dist"]) - 1) < 1e-9


def test_csv_body_is_deterministic(tmp_path):
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": float("nan")}]
    formats.write_csv(tmp_path / "x.csv", ["a", "b"], rows, stamp="one")
    formats.write_csv(tmp_path / "y.csv", ["a", "b"], rows)
    assert formats.csv_body(tmp_path / "x.csv") == formats.csv_body(tmp_path / "y.csv")
    assert (tmp_path / "x.csv").read_text().startswith("# generated one\n")
    assert formats.read_csv(tmp_path / "x.csv")[0] == {"a": "1", "b": "0.1"}


def test_aggregate():
    rows = [{"k": "a", "v": 1.0}, {"k": "a", "v": 3.0}, {"k": "b", "v": 2.0}]
    out = formats.aggregate(rows, ["k"], ["v"])
    assert out[0] == {"k": "a", "n": 2, "v_mean": 2.0, "v_std": 1.0}
    assert formats.aggregate_columns(["k"], ["v"]) == ["k", "n", "v_mean", "v_std"]


def test_config_defaults_and_overrides():
    cfg = parse_config('{"scene": {"frames": 40, "noise": {"sigma_t": 0.02}}, "seeds": [3, 4]}', "run")
    assert cfg.scene.frames == 40 and cfg.scene.noise.sigma_t == 0.02 and cfg.seeds == (3, 4)
    p = cfg.pipeline_for(cfg.scene)
    assert p.odom_sigma_t == 0.02 and p.stale_gap == cfg.scene.gap
    echo = cfg.echo()
    assert json.dumps(echo) and echo["scene"]["frames"] == 40


@pytest.mark.parametrize("text, field, line", [
    ('{\n "scene": {\n  "frames": "many"\n }\n}', "scene.frames", 3),
    ('{\n "bogus": 1\n}', "bogus", 2),
    ('{\n "assoc": {"lam": 2.0}\n}', None, None),
    ('{\n "seeds": []\n}', "seeds", 2),
    ('{"scene": ', None, 1),
])
def test_config_errors_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as e:
        parse_config(text, "run")
    d = e.value.to_dict()
    assert d["error"] == "config"
    if field is not None:
        assert d["field"] == field
    if line is not None:
        assert d["line"] == line


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_parse_seeds():
    assert parse_seeds("1,2,5-7") == (1, 2, 5, 6, 7)
    with pytest.raises(ConfigError):
        parse_seeds("a")
    with pytest.raises(ConfigError):
        parse_seeds("")
