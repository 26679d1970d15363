import json
import os
import shutil

import numpy as np
import pytest

from evrecon import cli
from evrecon import pipeline as pl
from evrecon.errors import ConfigError, StageFailure
from evrecon.fileio import read_ply

FAST_MVS = "\n[mvs]\nradius = 3\niterations = 1\nrefine_steps = 1\n"


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--scene", "orbit", "--views", "4", "--binary", "--out", str(d)]) == 0
    with open(d / "config.toml", "a") as fh:
        fh.write(FAST_MVS)
    return d


@pytest.fixture(scope="module")
def run_a(sim_dir):
    out = sim_dir / "a"
    assert cli.main(["pipeline", "--config", str(sim_dir / "config.toml"), "--out", str(out)]) == 0
    return out


def test_all_stage_outputs_written(run_a):
    records = json.loads((run_a / "manifest.json").read_text())
    assert [r["stage"] for r in records] == list(pl.STAGES)
    assert not any(r["skipped"] for r in records)
    for r in records:
        assert all((run_a / p).exists() for p in r["outputs"])
    sparse = read_ply(run_a / "sparse" / "sparse.ply")
    dense = read_ply(run_a / "dense" / "dense.ply")
    assert len(sparse) > 20 and len(dense) > 1000


def test_rerun_is_byte_identical(sim_dir, run_a):
    out = sim_dir / "b"
    assert cli.main(["pipeline", "--config", str(sim_dir / "config.toml"), "--out", str(out)]) == 0
    for rel in ("sparse/sparse.ply", "dense/dense.ply", "sparse/images.txt", "sparse/points3D.txt",
                "matches/geometry.json"):
        assert read_bytes(run_a / rel) == read_bytes(out / rel), rel


def test_resume_skips_finished_stages(sim_dir, run_a):
    before = {p: os.stat(p).st_mtime_ns for p in run_a.rglob("*.ply")}
    cfg = pl.load_config(str(sim_dir / "config.toml"), overrides={"output": str(run_a)})
    arts = pl.run_pipeline(cfg)
    assert all(a.skipped for a in arts)
    assert {p: os.stat(p).st_mtime_ns for p in run_a.rglob("*.ply")} == before


def test_config_change_reruns_downstream_only(sim_dir, run_a):
    out = sim_dir / "c"
    shutil.copytree(run_a, out)
    cfg = pl.load_config(str(sim_dir / "config.toml"), overrides={"output": str(out)})
    cfg.data["mvs"]["cost_threshold"] = 0.5
    arts = pl.run_pipeline(cfg)
    assert [a.skipped for a in arts] == [True, True, True, True, False]


def test_failing_stage_reported_and_upstream_kept(sim_dir, run_a, capsys):
    out = sim_dir / "d"
    shutil.copytree(run_a, out)
    cfg_path = sim_dir / "bad_sfm.toml"
    text = (sim_dir / "config.toml").read_text().replace("[reconstruction]", "[sfm]\nmin_init_angle = 89.0\n\n[reconstruction]")
    cfg_path.write_text(text)
    cfg = pl.load_config(str(cfg_path), overrides={"output": str(out)})
    with pytest.raises(StageFailure) as exc:
        pl.run_pipeline(cfg)
    assert exc.value.stage == "sfm"
    assert (out / "matches" / "geometry.json").exists()
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out", str(out)]) == 3
    assert "sfm" in capsys.readouterr().err


def test_missing_event_file_is_config_error(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('output = "o"\n[input]\nevents = "nope.txt"\n')
    with pytest.raises(ConfigError):
        pl.load_config(str(cfg))
    assert cli.main(["pipeline", "--config", str(cfg)]) == 2
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("text", [
    'bogus = 1\n',
    '[input]\nevents = "e.txt"\nwidth = 0\n',
    '[input]\nevents = "e.txt"\n[windows]\npolicy = "sometimes"\n',
    '[input]\nevents = "e.txt"\n[mvs]\nradius = 0\n',
])
def test_invalid_config_rejected(tmp_path, text):
    (tmp_path / "e.txt").write_text("0.0 1 1 1\n")
    (tmp_path / "c.toml").write_text(text)
    with pytest.raises(ConfigError):
        pl.load_config(str(tmp_path / "c.toml"))


def test_unreadable_events_give_stage_failure(tmp_path):
    (tmp_path / "e.txt").write_text("0.1 1 1 1\nnot an event\n")
    (tmp_path / "c.toml").write_text('output = "o"\n[input]\nevents = "e.txt"\n')
    assert cli.main(["pipeline", "--config", str(tmp_path / "c.toml")]) == 3


def test_event_conversion_commands(sim_dir, tmp_path):
    ev_file = str(sim_dir / "events.bin")
    assert cli.main(["events-to-voxel", "--events", ev_file, "--window-count", "400000", "--bins", "3",
                     "--out", str(tmp_path / "vox")]) == 0
    vox = sorted((tmp_path / "vox").glob("voxel_*.npy"))
    assert len(vox) >= 2 and np.load(vox[0]).shape == (3, 260, 346)
    assert cli.main(["events-to-frames", "--events", ev_file, "--window-count", "400000",
                     "--out", str(tmp_path / "fr")]) == 0
    assert len(list((tmp_path / "fr").glob("events_*.pfm"))) == len(vox)
    assert cli.main(["events-to-voxel", "--events", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 2


def test_sfm_command_on_frame_manifest(run_a, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sfm", "--frames", str(run_a / "frames" / "manifest.txt"), "--out", str(out)]) == 0
    assert (out / "sparse" / "images.txt").exists()
    assert cli.main(["mvs", "--out", str(tmp_path / "empty")]) == 2


def test_report_command(sim_dir, run_a, tmp_path):
    rd = tmp_path / "rep"
    assert cli.main(["report", "--out", str(run_a), "--gt", str(sim_dir / "groundtruth.txt"),
                     "--report-dir", str(rd)]) == 0
    for name in ("frames.png", "sparse_topview.png", "reprojection_errors.png", "depth_maps.png",
                 "images.csv", "stages.tsv", "summary.tsv"):
        assert (rd / name).stat().st_size > 0, name
    rows = (rd / "images.csv").read_text().splitlines()
    assert rows[0].startswith("image,name,observations")
    assert len(rows) == 1 + len((run_a / "sparse" / "images.txt").read_text().splitlines()[2::2])


def test_thread_cap_validation(monkeypatch, tmp_path):
    monkeypatch.setenv("EVRECON_THREADS", "zero")
    assert cli.main(["report", "--out", str(tmp_path)]) == 2
