import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from scenemix.cli import main
from scenemix.manifests import load_dataset, load_split
from scenemix.scene_model import load_scene_kitti, default_synthetic_schema


def run_cli(*argv, cwd):
    return subprocess.run(
        [sys.executable, "-m", "scenemix.cli", *argv],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small synthetic dataset with split, pools, and one training run."""
    root = tmp_path_factory.mktemp("cliws")
    steps = [
        ["gen-synth", "--out", "data", "--num-scenes", "25", "--ground-points", "250",
         "--points-per-instance", "12:28", "--seed", "5"],
        ["split", "--dataset", "data/dataset.yaml", "--ratio", "0.2", "--out", "data/split.yaml", "--seed", "1"],
        ["pools", "--dataset", "data/dataset.yaml", "--split", "data/split.yaml",
         "--out", "pools/pools.json", "--set", "grid_n=8"],
        ["train-ssl", "--dataset", "data/dataset.yaml", "--split", "data/split.yaml",
         "--out", "run", "--set", "iterations=30", "--set", "grid_n=8", "--seed", "3"],
    ]
    for argv in steps:
        proc = run_cli(*argv, cwd=root)
        assert proc.returncode == 0, f"{argv}: {proc.stderr}"
    return root


class TestGenSynthAndSplit:
    def test_dataset_manifest_loads(self, workspace):
        dataset, files = load_dataset(workspace / "data" / "dataset.yaml")
        assert len(dataset) == 25
        assert all(s.has_labels for s in dataset.scenes)
        assert dataset.schema == default_synthetic_schema()

    def test_split_counts(self, workspace):
        doc = load_split(workspace / "data" / "split.yaml")
        assert len(doc["labeled_ids"]) == 5  # ceil(0.2 * 25)
        assert len(doc["unlabeled_ids"]) == 20
        assert not set(doc["labeled_ids"]) & set(doc["unlabeled_ids"])

    def test_gen_synth_deterministic(self, tmp_path):
        for out in ("a", "b"):
            proc = run_cli(
                "gen-synth", "--out", out, "--num-scenes", "4", "--ground-points", "100",
                "--points-per-instance", "8:12", "--seed", "9", cwd=tmp_path,
            )
            assert proc.returncode == 0, proc.stderr
        for k in range(4):
            fa = (tmp_path / "a" / "scenes" / f"{k:06d}.bin").read_bytes()
            fb = (tmp_path / "b" / "scenes" / f"{k:06d}.bin").read_bytes()
            assert fa == fb


class TestPoolsAndAugment:
    def test_pool_manifest_structure(self, workspace):
        doc = json.loads((workspace / "pools" / "pools.json").read_text())
        assert doc["kind"] == "scenemix-pool-manifest"
        assert doc["grid"]["n"] == 8
        assert doc["tau_min"] == 5
        assert len(doc["patches"]) > 0

    def test_augment_outputs_and_idempotence(self, workspace):
        for out in ("aug1", "aug2"):
            proc = run_cli(
                "augment", "--dataset", "data/dataset.yaml", "--pools", "pools/pools.json",
                "--out", out, "--seed", "4", "--set", "p_fill=0.3", cwd=workspace,
            )
            assert proc.returncode == 0, proc.stderr
        for k in (0, 7, 24):
            sid = f"{k:06d}"
            a = (workspace / "aug1" / "scenes" / f"{sid}.bin").read_bytes()
            b = (workspace / "aug2" / "scenes" / f"{sid}.bin").read_bytes()
            assert a == b
            prov = np.fromfile(workspace / "aug1" / "scenes" / f"{sid}.prov", dtype="<i4")
            scene = load_scene_kitti(
                workspace / "aug1" / "scenes" / f"{sid}.bin",
                workspace / "aug1" / "scenes" / f"{sid}.label",
                default_synthetic_schema(),
            )
            assert prov.size == 2 * scene.num_points
            branches = set(prov.reshape(-1, 2)[:, 0].tolist())
            assert branches <= {0, 1, 2}

    def test_augmented_scenes_stay_labeled(self, workspace):
        dataset, _ = load_dataset(workspace / "aug1" / "dataset.yaml")
        schema = dataset.schema
        for scene in dataset.scenes:
            assert scene.has_labels
            assert (scene.labels != schema.ignore_class_id).all()


class TestTrainAndReports:
    def test_run_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.bin").exists()
        lines = (run / "log.jsonl").read_text().splitlines()
        assert len(lines) == 30
        first = json.loads(lines[0])
        assert {"step", "loss_s", "loss_l", "loss_u", "loss_total", "erase_fraction", "pool_sizes"} <= set(first)
        cfg = yaml.safe_load((run / "config.yaml").read_text())
        assert cfg["iterations"] == 30 and cfg["grid_n"] == 8

    def test_eval_writes_csv_and_figure(self, workspace):
        proc = run_cli(
            "eval", "--checkpoint", "run/checkpoint.bin", "--dataset", "data/dataset.yaml",
            "--split", "data/split.yaml", "--out", "run/eval", cwd=workspace,
        )
        assert proc.returncode == 0, proc.stderr
        assert "mIoU" in proc.stdout
        assert (workspace / "run" / "eval" / "iou.csv").exists()
        assert (workspace / "run" / "eval" / "iou.png").exists()
        rows = (workspace / "run" / "eval" / "iou.csv").read_text().splitlines()
        assert rows[0] == "class_id,name,iou"
        assert rows[-1].startswith(",mIoU,")

    def test_stats_writes_series_and_figures(self, workspace):
        proc = run_cli("stats", "--log", "run/log.jsonl", "--out", "run/stats", cwd=workspace)
        assert proc.returncode == 0, proc.stderr
        stats = (workspace / "run" / "stats" / "stats.csv").read_text().splitlines()
        assert len(stats) == 31  # header + 30 iterations
        assert stats[0].startswith("step,loss_s,loss_l,loss_u,loss_total,erase_fraction")
        assert (workspace / "run" / "stats" / "erase_fraction.png").exists()
        assert (workspace / "run" / "stats" / "losses.png").exists()

    def test_train_sup_has_no_unlabeled_loss(self, workspace):
        proc = run_cli(
            "train-sup", "--dataset", "data/dataset.yaml", "--split", "data/split.yaml",
            "--out", "runsup", "--set", "iterations=5", "--set", "grid_n=8", cwd=workspace,
        )
        assert proc.returncode == 0, proc.stderr
        for line in (workspace / "runsup" / "log.jsonl").read_text().splitlines():
            log = json.loads(line)
            assert log["loss_u"] == 0.0 and log["loss_l"] == 0.0

    def test_export_ply(self, workspace):
        proc = run_cli(
            "export-ply", "--dataset", "data/dataset.yaml", "--scene-id", "000002",
            "--out", "viz/s2.ply", cwd=workspace,
        )
        assert proc.returncode == 0, proc.stderr
        text = (workspace / "viz" / "s2.ply").read_text().splitlines()
        assert text[0] == "ply"
        n = int(next(l for l in text if l.startswith("element vertex")).split()[-1])
        header_end = text.index("end_header")
        assert len(text) - header_end - 1 == n


class TestExitCodes:
    def test_usage_error_is_1(self, tmp_path):
        proc = run_cli("no-such-command", cwd=tmp_path)
        assert proc.returncode == 1
        proc = run_cli("pools", "--out", "x.json", cwd=tmp_path)  # missing dataset
        assert proc.returncode == 1

    def test_data_error_is_2(self, tmp_path):
        (tmp_path / "junk.yaml").write_text("kind: wrong\n")
        proc = run_cli("split", "--dataset", "junk.yaml", "--ratio", "0.5", "--out", "s.yaml", cwd=tmp_path)
        assert proc.returncode == 2

    def test_bad_override_key_is_usage(self, tmp_path):
        proc = run_cli(
            "gen-synth", "--out", "d", "--num-scenes", "2", "--set", "bogus_key=1", cwd=tmp_path
        )
        assert proc.returncode == 1

    def test_help_lists_config_keys(self):
        from scenemix.cli import build_parser

        parser = build_parser()
        # train-ssl help must document every Settings key it reads
        sub = None
        for action in parser._subparsers._group_actions:
            sub = action.choices["train-ssl"]
        text = sub.format_help()
        from dataclasses import fields
        from scenemix.config import Settings

        for f in fields(Settings):
            assert f.name in text
