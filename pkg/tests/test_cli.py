"""CLI harness: config validation, subcommand pipeline, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from ttt_recon.cli import main, write_pgm
from ttt_recon.config import load_config, validate_config
from ttt_recon.errors import ConfigError


def tiny_config(tmp_path, **overrides):
    cfg = {
        "seed": 11,
        "output_dir": str(tmp_path / "run"),
        "shift": "anatomy_analog",
        "data": {
            "P": {"family": "ellipses", "resolution": 32, "n_coils": 2},
            "Q": {"family": "rectangles", "resolution": 32, "n_coils": 2},
            "n_train": 4,
            "n_test": 2,
        },
        "model": {"n_pools": 2, "base_channels": 4},
        "train": {
            "mode": "joint",
            "epochs": 2,
            "lr": 1e-3,
            "batch_size": 2,
            "acceleration": 2.0,
            "center_fraction": 0.16,
        },
        "ttt": {"max_iters": 3, "val_fraction": 0.2, "patience": 5},
    }
    for key, value in overrides.items():
        cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_defaults_applied(self, tmp_path):
        cfg = load_config(tiny_config(tmp_path))
        assert cfg["ttt"]["final_input"] == "full"
        assert cfg["train"]["mask_policy"] == "fixed_per_sample"

    def test_unknown_key_rejected_with_pointer(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 0, "output_dir": "x", "data": {"P": {"family": "ellipses"}, "Q": {"family": "rectangles"}}, "trian": {}}))
        with pytest.raises(ConfigError, match="trian"):
            load_config(path)

    def test_nested_violation_has_pointer(self):
        with pytest.raises(ConfigError, match="/data/P/family"):
            validate_config(
                {
                    "seed": 0,
                    "output_dir": "x",
                    "data": {"P": {"family": "hexagons"}, "Q": {"family": "rectangles"}},
                }
            )

    def test_missing_file_exit_code(self, tmp_path, capsys):
        rc = main(["gen-data", "--config", str(tmp_path / "absent.json")])
        assert rc == 3
        assert "error" in capsys.readouterr().err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"seed": "zero", "output_dir": "x", "data": {"P": {"family": "ellipses"}, "Q": {"family": "rectangles"}}}))
        rc = main(["gen-data", "--config", str(p)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "/seed" in err


class TestPGM:
    def test_header_and_mapping(self, tmp_path):
        img = np.array([[0.0, 0.5], [1.0, 2.0]])
        p = tmp_path / "x.pgm"
        write_pgm(p, img, data_range=1.0)
        blob = p.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert list(blob[-4:]) == [0, 128, 255, 255]  # clipped above data_range

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8))
        a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
        write_pgm(a, img, 1.0)
        write_pgm(b, img, 1.0)
        assert a.read_bytes() == b.read_bytes()


class TestGapReportCommand:
    def write_eval(self, path, scores):
        lines = ["id,ssim,ttt,chosen_iteration"]
        lines += [f"s{i:03d},{s:.6f},off," for i, s in enumerate(scores)]
        Path(path).write_text("\n".join(lines) + "\n")

    def test_paper_anatomy_numbers(self, tmp_path, capsys):
        files = {}
        for name, mean in (("qq", 0.9187), ("pq", 0.8521), ("qq_ttt", 0.9234), ("pq_ttt", 0.9225)):
            p = tmp_path / f"{name}.csv"
            self.write_eval(p, [mean - 0.01, mean + 0.01])  # mean preserved
            files[name] = str(p)
        rc = main(
            [
                "gap-report",
                "--qq", files["qq"], "--pq", files["pq"],
                "--qq-ttt", files["qq_ttt"], "--pq-ttt", files["pq_ttt"],
                "--out-json", str(tmp_path / "gap.json"),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "98.6%" in out
        report = json.loads((tmp_path / "gap.json").read_text())
        assert report["gap_before"] == pytest.approx(0.0666, abs=1e-9)
        assert report["gap_after"] == pytest.approx(0.0009, abs=1e-9)
        assert report["fraction_closed"] == pytest.approx(0.986486, abs=1e-4)

    def test_undefined_fraction_printed(self, tmp_path, capsys):
        files = {}
        for name, mean in (("qq", 0.6865), ("pq", 0.6861), ("qq_ttt", 0.6827), ("pq_ttt", 0.6806)):
            p = tmp_path / f"{name}.csv"
            self.write_eval(p, [mean])
            files[name] = str(p)
        rc = main(
            [
                "gap-report",
                "--qq", files["qq"], "--pq", files["pq"],
                "--qq-ttt", files["qq_ttt"], "--pq-ttt", files["pq_ttt"],
            ]
        )
        assert rc == 0
        assert "--" in capsys.readouterr().out


class TestTheoryCommand:
    def test_reports_alphas(self, tmp_path, capsys):
        out = tmp_path / "curves.csv"
        rc = main(
            [
                "theory", "--n", "100", "--d", "10", "--sigma2", "1", "--varsigma2", "0.5",
                "--samples", "5000", "--seeds", "1", "--out", str(out),
            ]
        )
        assert rc == 0
        text = capsys.readouterr().out
        sup = float(text.split("supervised_alpha=")[1].split(" ")[0])
        ttt = float(text.split("mean_ttt_alpha=")[1].split(" ")[0])
        assert sup == pytest.approx(0.5, abs=0.05)
        assert ttt == pytest.approx(2 / 3, abs=0.05)
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "alpha,expected_lss,monte_carlo_lss,risk_P,risk_Q"
        assert len(lines) == 26  # alpha grid 0..1.2 step 0.05


class TestPipeline:
    def test_end_to_end_and_reproducibility(self, tmp_path, capsys):
        cfg_path = tiny_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg_path)]) == 0
        run = tmp_path / "run"
        manifest = json.loads((run / "data" / "P" / "train" / "manifest.json").read_text())
        assert len(manifest["samples"]) == 4
        # train/test ids are disjoint
        test_manifest = json.loads((run / "data" / "P" / "test" / "manifest.json").read_text())
        train_ids = {e["id"] for e in manifest["samples"]}
        assert train_ids.isdisjoint({e["id"] for e in test_manifest["samples"]})

        assert main(["train", "--config", str(cfg_path), "--mode", "joint", "--dist", "P"]) == 0
        ckpt = run / "models" / "joint_P.ksp"
        assert ckpt.exists()
        assert (run / "models" / "joint_P_history.csv").exists()

        # evaluation without TTT, twice: byte-identical CSVs
        out1 = run / "evals" / "a.csv"
        out2 = run / "evals" / "b.csv"
        for out in (out1, out2):
            assert main(
                [
                    "ttt-eval", "--config", str(cfg_path), "--model", str(ckpt),
                    "--dist", "Q", "--ttt", "off", "--out", str(out),
                ]
            ) == 0
        assert out1.read_bytes() == out2.read_bytes()
        rows = out1.read_text().strip().split("\n")
        assert rows[0] == "id,ssim,ttt,chosen_iteration"
        assert len(rows) == 3

        # TTT evaluation runs and records chosen iterations
        out3 = run / "evals" / "ttt.csv"
        assert main(
            [
                "ttt-eval", "--config", str(cfg_path), "--model", str(ckpt),
                "--dist", "Q", "--ttt", "on", "--out", str(out3),
            ]
        ) == 0
        body = out3.read_text().strip().split("\n")[1:]
        assert all(line.split(",")[2] == "on" for line in body)

        # image export: deterministic PGM bytes
        img_dir1 = run / "img1"
        img_dir2 = run / "img2"
        for img_dir in (img_dir1, img_dir2):
            assert main(
                [
                    "export-png-like", "--config", str(cfg_path), "--model", str(ckpt),
                    "--dist", "Q", "--ttt", "off", "--out-dir", str(img_dir),
                ]
            ) == 0
        files1 = sorted(img_dir1.iterdir())
        assert len(files1) == 2
        for f1 in files1:
            assert f1.read_bytes() == (img_dir2 / f1.name).read_bytes()
            assert f1.read_bytes().startswith(b"P5\n32 32\n255\n")

    def test_checkpoint_reproducibility(self, tmp_path):
        cfg_path = tiny_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg_path)]) == 0
        run = tmp_path / "run"
        ckpt = run / "models" / "supervised_P.ksp"
        assert main(["train", "--config", str(cfg_path), "--mode", "supervised", "--dist", "P"]) == 0
        first = ckpt.read_bytes()
        assert main(["train", "--config", str(cfg_path), "--mode", "supervised", "--dist", "P"]) == 0
        assert ckpt.read_bytes() == first

    def test_mixture_sweep_small(self, tmp_path, capsys):
        cfg_path = tiny_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg_path)]) == 0
        out = tmp_path / "run" / "reports" / "sweep.csv"
        rc = main(
            [
                "mixture-sweep", "--config", str(cfg_path), "--coeffs", "0,1",
                "--mode", "supervised", "--out", str(out),
            ]
        )
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "coefficient,ssim_P,ssim_Q"
        assert len(lines) == 3
