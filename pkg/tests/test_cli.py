import json
from pathlib import Path

import numpy as np
import pytest

from sparseattn.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from sparseattn.masks import load_mask


def run_cli(*argv):
    return main(list(argv))


class TestGenMask:
    def test_star_reference(self, tmp_path, capsys):
        out = tmp_path / "star.json"
        assert run_cli("gen-mask", "--kind", "star", "--n", "128",
                       "--out", str(out)) == EXIT_OK
        mask = load_mask(out)
        assert abs(100 * mask.sparsity() - 96.1) <= 0.3
        assert "0.961" in capsys.readouterr().out

    def test_flags_echoed_in_header(self, tmp_path):
        out = tmp_path / "m.json"
        run_cli("gen-mask", "--kind", "full", "--n", "8", "--out", str(out))
        doc = json.loads(out.read_text())
        assert doc["args"]["kind"] == "full"
        assert doc["args"]["n"] == 8

    def test_pgm_sidecar(self, tmp_path):
        out, pgm = tmp_path / "m.json", tmp_path / "m.pgm"
        run_cli("gen-mask", "--kind", "star", "--n", "16",
                "--out", str(out), "--pgm", str(pgm))
        assert pgm.read_bytes().startswith(b"P5\n16 16\n255\n")

    def test_invalid_parameters_exit_one(self, tmp_path):
        assert run_cli("gen-mask", "--kind", "strided", "--n", "8",
                       "--stride", "9", "--out", str(tmp_path / "x.json")) == EXIT_USAGE


class TestRenderMask:
    def test_ascii_round_trip(self, tmp_path, capsys):
        out = tmp_path / "m.json"
        run_cli("gen-mask", "--kind", "full", "--n", "2", "--out", str(out))
        capsys.readouterr()
        assert run_cli("render-mask", "--mask", str(out)) == EXIT_OK
        assert capsys.readouterr().out == "██\n██\n"

    def test_missing_file_exit_one(self):
        assert run_cli("render-mask", "--mask", "/nonexistent.json") == EXIT_USAGE


class TestSweepBaselines:
    def test_writes_all_masks_and_table(self, tmp_path, capsys):
        outdir = tmp_path / "base"
        assert run_cli("sweep-baselines", "--n", "128",
                       "--out-dir", str(outdir)) == EXIT_OK
        for name in ("star", "logsparse", "strided", "fixed", "longformer", "bigbird"):
            assert (outdir / f"{name}.json").exists()
        table = (outdir / "sparsity_table.csv").read_text()
        assert table.startswith("#")
        assert "star" in table
        assert "96.13" in capsys.readouterr().out


class TestTrain:
    def test_writes_run_files(self, tmp_path, capsys):
        outdir = tmp_path / "run"
        assert run_cli("train", "--steps", "12", "--out-dir", str(outdir),
                       "--checkpoint") == EXIT_OK
        run_doc = json.loads((outdir / "run.json").read_text())
        assert len(run_doc["metrics"]) == 12
        assert (outdir / "metrics.csv").read_text().startswith("# {")
        assert (outdir / "checkpoint.json").exists()

    def test_file_mask_source(self, tmp_path):
        mask_path = tmp_path / "mask.json"
        run_cli("gen-mask", "--kind", "full", "--n", "16", "--out", str(mask_path))
        outdir = tmp_path / "run"
        assert run_cli("train", "--steps", "5", "--mask-source",
                       f"file:{mask_path}", "--out-dir", str(outdir)) == EXIT_OK


class TestDamTrainAndPrune:
    def test_dam_then_prune_pipeline(self, tmp_path, capsys):
        outdir = tmp_path / "dam"
        assert run_cli("dam-train", "--steps", "20", "--lam", "1e-3",
                       "--out-dir", str(outdir)) == EXIT_OK
        assert (outdir / "mask_head0.json").exists()
        assert (outdir / "mask_head1.json").exists()
        assert (outdir / "log.csv").exists()
        scores = outdir / "soft_scores.npy"
        assert scores.exists()
        assert np.load(scores).shape == (2, 16, 16)

        sweep = tmp_path / "sweep.csv"
        assert run_cli("prune", "--scores", str(scores), "--steps", "10",
                       "--fractions", "0.0,0.5", "--out", str(sweep)) == EXIT_OK
        lines = sweep.read_text().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 4  # comment + header + 2 fractions

    def test_wrong_score_shape_exit_one(self, tmp_path):
        bad = tmp_path / "scores.npy"
        np.save(bad, np.ones((1, 4, 4)))
        assert run_cli("prune", "--scores", str(bad),
                       "--out", str(tmp_path / "s.csv")) == EXIT_USAGE


class TestGradcheckCommand:
    def test_small_preset_passes(self, capsys):
        assert run_cli("gradcheck", "--preset", "small", "--sample", "60") == EXIT_OK
        assert "PASS" in capsys.readouterr().out


class TestApproxVerifyCommand:
    def test_quarter_grid_report(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert run_cli("approx-verify", "--n", "3", "--d", "1",
                       "--inv-delta", "4", "--out", str(out)) == EXIT_OK
        assert "24 inputs, 0 collisions" in capsys.readouterr().out
        doc = json.loads(out.read_text())
        assert doc["inputs"] == 24
        assert doc["collisions"] == 0
        assert doc["args"]["inv_delta"] == 4

    def test_invalid_size_exit_one(self):
        assert run_cli("approx-verify", "--n", "2") == EXIT_USAGE

    def test_budget_exceeded_exit_one(self):
        assert run_cli("approx-verify", "--inv-delta", "4", "--budget", "5") == EXIT_USAGE


class TestUsage:
    def test_unknown_subcommand(self):
        assert run_cli("frobnicate") == EXIT_USAGE

    def test_seed_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPARSEATTN_SEED", "123")
        out = tmp_path / "m.json"
        run_cli("gen-mask", "--kind", "longformer", "--n", "32", "--out", str(out))
        doc = json.loads(out.read_text())
        assert doc["args"]["seed"] == 123
