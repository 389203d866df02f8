import json

import numpy as np
import pytest

from doubles import BicycleModel
from kinodyn import harness
from kinodyn import io as kio
from kinodyn.cli import main
from kinodyn.terrain import generate_terrain

SHORT_FLAT = {"name": "rally-track", "straight": 30.0, "radius": 10.0, "amplitude": 0.0,
              "roughness": 0.0, "chains": [], "sectors": []}
CTRL = {"K": 128, "T": 15, "sigma": [0.05, 0.5],
        "costs": {"v_ref": 3.0, "lam": 3.0, "w_progress": 2.0}}


@pytest.fixture(scope="module")
def flat_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("flat")
    grid = generate_terrain(SHORT_FLAT, 0)
    kio.save_terrain(d / "terrain.json", grid)
    return d


def _cfg(d, **kw):
    base = dict(name="flat", terrain="terrain.json", base_dir=str(d), max_steps=60,
                controller=CTRL, start_offset=0.5)
    base.update(kw)
    return harness.ExperimentConfig(**base)


def test_flat_lap_completed_without_violations(flat_dir):
    cfg = _cfg(flat_dir, max_steps=700)
    res = harness.load_resources(cfg, model=BicycleModel())
    m, recs = harness.run_episode(cfg, 0, res)
    assert m.lap_completed and m.reason == "lap"
    assert m.boundary_violations == 0 and m.rollovers == 0
    assert m.progress >= res.track.length
    assert m.mean_speed == pytest.approx(3.0, rel=0.3)


def test_constant_full_steer_exits(flat_dir):
    cfg = _cfg(flat_dir, max_steps=200)
    res = harness.load_resources(cfg, model=BicycleModel())
    m, _ = harness.run_episode(cfg, 0, res, policy=lambda x, h: (0.5, 5.0))
    assert m.reason == "boundary_exit"
    assert m.boundary_violations >= 1


def test_episode_determinism_and_log(flat_dir, tmp_path):
    cfg = _cfg(flat_dir)
    res = harness.load_resources(cfg, model=BicycleModel())
    m1, _ = harness.run_episode(cfg, 3, res, log_path=tmp_path / "a.jsonl")
    m2, _ = harness.run_episode(cfg, 3, res, log_path=tmp_path / "b.jsonl")
    assert m1.deterministic_dict() == m2.deterministic_dict()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    recs = kio.read_jsonl(tmp_path / "a.jsonl")
    assert recs[0]["kind"] == "trajectory" and recs[-1]["kind"] == "end"
    assert len(recs) == m1.steps + 2
    assert "compute_ms" not in json.dumps(recs)
    # a crashed episode leaves a parseable prefix
    raw = (tmp_path / "a.jsonl").read_bytes()
    (tmp_path / "c.jsonl").write_bytes(raw[: len(raw) // 2])
    part = kio.read_jsonl(tmp_path / "c.jsonl")
    assert 1 <= len(part) < len(recs) and part == recs[:len(part)]


def test_refuses_mismatched_inputs(flat_dir):
    cfg = _cfg(flat_dir, hashes={"terrain": "0" * 64})
    with pytest.raises(kio.ManifestMismatch):
        harness.load_resources(cfg, model=BicycleModel())


def test_report_self_comparison_and_regeneration(flat_dir, tmp_path):
    model = BicycleModel()
    a = _cfg(flat_dir, name="full")
    b = _cfg(flat_dir, name="full-again")
    res = harness.load_resources(a, model=model)
    summ = harness.compare_experiments([a, b], [0, 1], tmp_path / "r1", {"full": res, "full-again": res})
    assert all(v == 0.0 for k, v in summ["paired"]["full-again"].items() if k.startswith("diff_"))
    logs = sorted((tmp_path / "r1").glob("*.jsonl"))
    harness.write_report(harness.episode_rows_from_logs(logs), tmp_path / "r2", ["full", "full-again"])
    for f in ("episodes.csv", "summary.csv", "paired.csv", "report.md", "plot_summary.gp"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_report_has_both_cost_modes(flat_dir, tmp_path):
    model = BicycleModel()
    full = _cfg(flat_dir, name="full", max_steps=30)
    flat2d = _cfg(flat_dir, name="2d", max_steps=30,
                  controller=dict(CTRL, costs=dict(CTRL["costs"], mode="2d")))
    res = harness.load_resources(full, model=model)
    harness.compare_experiments([flat2d, full], [0], tmp_path, {"full": res, "2d": res})
    text = (tmp_path / "summary.csv").read_text().splitlines()
    assert text[1].startswith("2d,") and text[2].startswith("full,")
    assert all(cell != "" for line in text[1:] for cell in line.split(","))
    v = harness.closed_loop_verdict(harness.summarize(
        harness.episode_rows_from_logs(sorted(tmp_path.glob("*.jsonl"))), ["2d", "full"]), "2d", "full")
    assert v["baseline_rollovers"] == 0 and not v["pass"]


def test_cli_pipeline(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["--out-dir", out, "--seed", "1", "gen-terrain", "--recipe", "rally-track",
                 "--set", "straight=30.0", "--set", "radius=10.0", "--set", "chains=[]"]) == 0
    assert main(["--out-dir", out, "gen-costmap", "--terrain", f"{out}/terrain.json"]) == 0
    assert main(["--out-dir", out, "collect", "--terrain", f"{out}/terrain.json",
                 "--policy", "random-walk", "--steps", "400", "--name", "d.jsonl"]) == 0
    mcfg = tmp_path / "model.json"
    mcfg.write_text(json.dumps({"train": {"B": 2, "H": 2, "epochs": 1, "batch": 64,
                                          "conv_channels": [2, 2, 2], "fc_hidden": 8, "D_h": 4,
                                          "member_hidden": [16, 16]}}))
    assert main(["--out-dir", out, "--config", str(mcfg), "train", "--data", f"{out}/d.jsonl"]) == 0
    assert main(["--out-dir", out, "eval-model", "--checkpoint", f"{out}/checkpoint.json",
                 "--terrain", f"{out}/terrain.json", "--data", f"{out}/d.jsonl",
                 "--starts", "20", "--horizon", "3"]) == 0
    table = (tmp_path / "multistep.csv").read_text().splitlines()
    assert len(table) == 4 and table[0].startswith("step,vx_mean")
    exp = {"name": "cli", "terrain": "terrain.json", "costmap": "costmap.json",
           "checkpoint": "checkpoint.json", "max_steps": 4,
           "controller": {"K": 8, "T": 3, "costs": {"v_ref": 3.0}}}
    (tmp_path / "exp.json").write_text(json.dumps(exp))
    args = ["--out-dir", out, "--config", f"{out}/exp.json", "drive", "--seeds", "0-1"]
    assert main(args) == 0
    first = (tmp_path / "cli_seed0.jsonl").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "cli_seed0.jsonl").read_bytes() == first
    assert main(args + ["--costs", "2d"]) == 0
    assert main(["--out-dir", f"{out}/rep", "report", "--order", "cli-2d,cli", "--logs",
                 *map(str, sorted(tmp_path.glob("cli*_seed*.jsonl")))]) == 0
    assert (tmp_path / "rep" / "report.md").exists()
    # tampering with an input makes drive refuse to run
    blob = tmp_path / "terrain.bin"
    b = bytearray(blob.read_bytes())
    b[100] ^= 1
    blob.write_bytes(bytes(b))
    assert main(args) == 1
