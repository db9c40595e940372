"""The command-line front end: artifacts on disk, exit codes, output lines."""

import json

import numpy as np
import pytest

from fieldsim import fileio, simloop as sl
from fieldsim.cli import main
from fieldsim.geometry import Pose
from fieldsim.render import LidarModel


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """A tiny dataset and a 1-iteration model the CLI tests share."""
    root = tmp_path_factory.mktemp("cli")
    ds_dir = root / "dataset"
    model_dir = root / "model"
    assert main(["oracle-gen", "--out", str(ds_dir), "--frames", "4"]) == 0
    cfg = {"rays_per_batch": 64, "n_patches": 1, "patch_size": 16}
    cfg_path = root / "train.json"
    fileio.save_json(cfg_path, cfg)
    assert main(["fit", "--dataset", str(ds_dir), "--out", str(model_dir),
                 "--iterations", "1", "--config", str(cfg_path)]) == 0
    return root


def small_scenario_doc(edits=False):
    sc = sl.Scenario(
        horizon=2,
        sdv_start=Pose(np.eye(3), np.zeros(3)),
        sdv_speed=3.0,
        lidar=LidarModel(np.deg2rad([-25.0, -12.0]), np.deg2rad(15.0), 25.0),
        lidar_extrinsic=Pose(np.eye(3), np.array([0.0, 0.0, 2.0])),
        edits=sl.SceneEdits(remove=["vehicle"]) if edits else None)
    return sc


class TestUsage:
    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_runtime_failure_exits_one(self, tmp_path, capsys):
        rc = main(["render", "--model", str(tmp_path / "nope"),
                   "--dataset", str(tmp_path / "nope")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestGradcheck:
    def test_all_ops_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "worst" in out
        assert "FAIL" not in out

    def test_seed_flag_accepted(self, capsys):
        assert main(["gradcheck", "--seed", "7"]) == 0


class TestOracleGen:
    def test_dataset_files_on_disk(self, workspace):
        ds_dir = workspace / "dataset"
        assert (ds_dir / "meta.json").exists()
        assert (ds_dir / "manifest.json").exists()
        for f in range(4):
            assert (ds_dir / "images" / f"frame_{f:04d}.png").exists()
            assert (ds_dir / "sweeps" / f"frame_{f:04d}.rays").exists()
            assert (ds_dir / "sweeps" / f"frame_{f:04d}.dyn").exists()

    def test_dataset_loads_back(self, workspace):
        ds = fileio.load_dataset(workspace / "dataset")
        assert ds.n_frames == 4
        assert list(ds.train_frames) == [0, 2]


class TestFit:
    def test_model_artifacts(self, workspace):
        model = workspace / "model"
        assert (model / "scene.json").exists()
        assert (model / "weights.bin").exists()
        assert (model / "weights.json").exists()
        assert (model / "occupancy.bin").exists()
        assert (model / "loss_curve.csv").exists()
        assert (model / "loss_curve.png").exists()       # rendered figure
        assert (model / "manifest.json").exists()
        assert (model / "checkpoints" / "checkpoint_000001.weights.bin").exists()

    def test_manifest_references_config(self, workspace):
        doc = fileio.load_json(workspace / "model" / "manifest.json")
        assert doc["command"] == "fit"
        assert doc["iterations"] == 1
        assert np.isfinite(doc["final_loss"])

    def test_loss_csv_parses(self, workspace):
        rows = fileio.read_loss_csv(workspace / "model" / "loss_curve.csv")
        assert len(rows) == 1 and rows[0]["iteration"] == 0


class TestRender:
    def test_frame_render_with_metrics(self, workspace, capsys):
        out = workspace / "render.png"
        rc = main(["render", "--model", str(workspace / "model"),
                   "--dataset", str(workspace / "dataset"),
                   "--frame", "1", "--out", str(out)])
        assert rc == 0
        assert out.exists()
        assert (workspace / "render.compare.png").exists()
        text = capsys.readouterr().out
        assert "psnr" in text and "ssim" in text

    def test_lane_shift_reports_coverage_only(self, workspace, capsys):
        out = workspace / "shifted.png"
        rc = main(["render", "--model", str(workspace / "model"),
                   "--dataset", str(workspace / "dataset"),
                   "--frame", "0", "--out", str(out), "--lane-shift", "2.0"])
        assert rc == 0
        assert out.exists()
        text = capsys.readouterr().out
        assert "weight-sum" in text
        assert "psnr" not in text


class TestLidar:
    def test_sweep_artifacts(self, workspace, capsys):
        out = workspace / "sweep"
        rc = main(["lidar", "--model", str(workspace / "model"),
                   "--dataset", str(workspace / "dataset"),
                   "--frame", "1", "--out", str(out)])
        assert rc == 0
        assert (workspace / "sweep.ply").exists()
        assert (workspace / "sweep.rays").exists()
        assert "hit rate" in capsys.readouterr().out


class TestReplay:
    def test_metrics_table_and_figure(self, workspace, capsys):
        out = workspace / "replay"
        rc = main(["replay", "--model", str(workspace / "model"),
                   "--dataset", str(workspace / "dataset"),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "lidar_metrics.csv").exists()
        assert (out / "lidar_metrics.png").exists()
        doc = fileio.load_json(out / "manifest.json")
        assert doc["frames"] == [1, 3]
        assert "hit_rate" in doc["pooled"]


class TestEdit:
    def test_edited_render(self, workspace, capsys):
        sc_path = workspace / "edit_scenario.json"
        fileio.save_scenario(sc_path, small_scenario_doc(edits=True))
        out = workspace / "edited"
        rc = main(["edit", "--model", str(workspace / "model"),
                   "--dataset", str(workspace / "dataset"),
                   "--scenario", str(sc_path), "--frame", "0",
                   "--out", str(out)])
        assert rc == 0
        assert (out / "frame_0000.png").exists()
        assert (out / "frame_0000.ply").exists()


class TestLoop:
    def test_closed_loop_artifacts(self, workspace, capsys):
        sc_path = workspace / "loop_scenario.json"
        fileio.save_scenario(sc_path, small_scenario_doc())
        out = workspace / "run"
        rc = main(["loop", "--model", str(workspace / "model"),
                   "--scenario", str(sc_path), "--out", str(out)])
        assert rc == 0
        assert (out / "clearance.png").exists()
        records = fileio.read_jsonl(out / "records.jsonl")
        assert [r["step"] for r in records] == [0, 1]
        assert "min forward clearance" in capsys.readouterr().out

    def test_open_loop_flag(self, workspace):
        sc_path = workspace / "loop_scenario2.json"
        fileio.save_scenario(sc_path, small_scenario_doc())
        out = workspace / "run_open"
        rc = main(["loop", "--model", str(workspace / "model"),
                   "--scenario", str(sc_path), "--out", str(out),
                   "--no-autonomy", "--save-frames"])
        assert rc == 0
        records = fileio.read_jsonl(out / "records.jsonl")
        assert all(r["accel"] == 0.0 and r["steer"] == 0.0 for r in records)
        assert (out / "steps" / "step_0000.ply").exists()
        doc = fileio.load_json(out / "manifest.json")
        assert doc["autonomy"] is False
