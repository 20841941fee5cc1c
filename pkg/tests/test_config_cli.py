import csv
import json

import numpy as np
import pytest

from conftest import SMALL_SYNTH
from openvox.cli import main
from openvox.config import RunConfig, apply_overrides, load_config
from openvox.errors import ValidationError
from openvox.tensor_io import load_map, write_tensor


def test_defaults_and_echo():
    cfg = RunConfig()
    assert cfg.resolution == 0.05 and cfg.association.tau_geo == 0.3 and cfg.masks.min_area == 400
    echo = cfg.echo()
    assert echo["format_version"] == 1 and len(echo["config_hash"]) == 64
    assert RunConfig().digest() == cfg.digest()


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("resolution: 0.1\nassociation:\n  tau_geo: 0.4\n")
    cfg = load_config(p, ["association.tau_geo=0.5", "eval.ks=[1, 3]"])
    assert cfg.resolution == 0.1 and cfg.association.tau_geo == 0.5 and cfg.eval.ks == [1, 3]
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"seed": 9}))
    assert load_config(j).seed == 9


@pytest.mark.parametrize("bad", [["nope=1"], ["association.unknown=1"], ["resolution=-1"], ["seedless"],
                                 ["ingest.d_min=20"]])
def test_invalid_configs(bad):
    with pytest.raises(ValidationError):
        load_config(None, bad)


def test_apply_overrides_does_not_mutate():
    base = {"a": {"b": 1}}
    out = apply_overrides(base, ["a.b=2"])
    assert base == {"a": {"b": 1}} and out == {"a": {"b": 2}}


def test_exit_codes(tmp_path):
    assert main(["map", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    assert main(["trajgen", "--out", str(tmp_path / "o"), "--set", "bogus.key=1"]) == 2
    assert main(["trajgen", "--out", str(tmp_path / "o")]) == 2


def test_synth_layout(small_trajectory):
    index = json.loads((small_trajectory / "trajectory.json").read_text())
    assert len(index["frames"]) == 8
    for name in ("scene.json", "gt", "table", "config.json"):
        assert (small_trajectory / name).exists()


@pytest.fixture(scope="module")
def mapped(small_trajectory, tmp_path_factory):
    out = tmp_path_factory.mktemp("map")
    assert main(["map", str(small_trajectory), "--out", str(out), *SMALL_SYNTH]) == 0
    return out


def test_map_outputs_and_log(mapped):
    lines = [json.loads(line) for line in (mapped / "run_log.jsonl").read_text().splitlines()]
    assert lines[0]["event"] == "start" and "config_hash" in lines[0]
    frames = [e for e in lines if e["event"] == "frame"]
    assert len(frames) == 8
    for key in ("frame_id", "detections", "matched", "merged", "instances", "wall_ms", "memory_bytes"):
        assert key in frames[0]
    assert lines[-1]["event"] == "finalize"
    report = json.loads((mapped / "map_report.json").read_text())
    assert report["format_version"] == 1 and report["config"]["seed"] == 4
    assert 1 <= report["instance_count"] <= 6


def test_map_rerun_bit_identical(small_trajectory, mapped, tmp_path):
    assert main(["map", str(small_trajectory), "--out", str(tmp_path), *SMALL_SYNTH]) == 0
    for f in sorted((mapped / "map").iterdir()):
        assert f.read_bytes() == (tmp_path / "map" / f.name).read_bytes()


def test_query_with_table_and_embedding(small_trajectory, mapped, tmp_path):
    assert main(["query", str(mapped / "map"), "--table", str(small_trajectory / "table"), "-k", "2",
                 "--out", str(tmp_path / "q")]) == 0
    body = json.loads((tmp_path / "q" / "query.json").read_text())
    assert len(body["queries"]) == 10 and all(len(q["results"]) <= 2 for q in body["queries"])
    m = load_map(mapped / "map")
    first = min(m.instances)
    write_tensor(m.instances[first].semantic.vector, tmp_path / "e.dten")
    assert main(["query", str(mapped / "map"), "--embedding", str(tmp_path / "e.dten"), "-k", "100",
                 "--out", str(tmp_path / "e")]) == 0
    res = json.loads((tmp_path / "e" / "query.json").read_text())["queries"][0]["results"]
    assert res[0]["instance"] == first and len(res) == len(m)
    rows = list(csv.reader((tmp_path / "e" / "query.csv").read_text().splitlines()))
    assert rows[0] == ["query", "rank", "instance", "cosine", "x", "y", "z"]


def test_eval_outputs(small_trajectory, mapped, tmp_path):
    assert main(["eval", str(mapped / "map"), "--gt", str(small_trajectory / "gt"), "--table",
                 str(small_trajectory / "table"), "--strict", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["retrieval_mode"] == "iou_gt_0.5" and metrics["config"]["eval"]["strict"]
    assert set(metrics["retrieval"]) == {"all_pairs", "iou_gt_0.5"}
    assert metrics["headline"]["mAcc"] >= 0.9
    assert (tmp_path / "per_class.csv").read_text().startswith("class,name,support,acc,iou")


def test_trajgen_and_coverage(small_trajectory, tmp_path):
    assert main(["trajgen", "--scene", str(small_trajectory / "scene.json"), "--out", str(tmp_path / "t")]) == 0
    traj = json.loads((tmp_path / "t" / "trajectory.json").read_text())
    assert traj["actions"] and traj["tour"]["walk"][0] == traj["tour"]["walk"][-1]
    assert (tmp_path / "t" / "grid.dten").exists()
    assert main(["coverage", "--scene", str(small_trajectory / "scene.json"), "--trajectory",
                 str(tmp_path / "t" / "trajectory.json"), "--out", str(tmp_path / "c")]) == 0
    text = (tmp_path / "c" / "coverage.csv").read_text().splitlines()
    assert text[0] == "ID,Category,Region,Model Voxels,Covered Voxels,Coverage (%)"
    assert len(text) == 4
    summary = json.loads((tmp_path / "c" / "coverage.json").read_text())
    assert 0 <= summary["surface_coverage"] <= 1 and "config_hash" in summary


def test_trajgen_from_grid_file(tmp_path):
    occ = np.ones((14, 30), np.uint8)
    occ[2:12, 2:12] = 0
    occ[4:8, 20:28] = 0
    occ[6, 12:20] = 0
    write_tensor(occ, tmp_path / "g.dten")
    (tmp_path / "g.json").write_text(json.dumps({"cell": 0.1, "origin": [0, 0]}))
    assert main(["trajgen", "--grid", str(tmp_path / "g"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "g.json").write_text(json.dumps({"cell_size": 0.1, "origin": [0, 0]}))
    assert main(["trajgen", "--grid", str(tmp_path / "g"), "--out", str(tmp_path / "o")]) == 0
