import json
import os

import pytest

from speechqe.cli import main

ROOT = os.path.join(os.path.dirname(__file__), "..")
FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
GOLDEN = os.path.join(FIXTURES, "golden")
GOLDEN_FILES = ["corpus.jsonl", "statistics.json",
                os.path.join("reports", "report.txt"),
                os.path.join("reports", "report.json"),
                os.path.join("reports", "esd_report.json")]


def run_pipeline(out_dir, monkeypatch, seed=0):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1722470400")
    monkeypatch.chdir(ROOT)  # run config uses repo-relative fixture paths
    base = ["--config", os.path.join(FIXTURES, "run_config.json"),
            "--seed", str(seed), "--out", str(out_dir)]
    for cmd in (["build-corpus"], ["score"],
                ["evaluate", "--labels", "xcomet_like,metricx_like", "--esd"],
                ["report"]):
        assert main(base + cmd) == 0


class TestGoldenPipeline:
    def test_matches_committed_golden_bytes(self, tmp_path, monkeypatch):
        run_pipeline(tmp_path / "run", monkeypatch)
        for rel in GOLDEN_FILES:
            produced = (tmp_path / "run" / rel).read_bytes()
            expected = open(os.path.join(GOLDEN, rel), "rb").read()
            assert produced == expected, rel

    def test_two_runs_byte_identical(self, tmp_path, monkeypatch):
        run_pipeline(tmp_path / "a", monkeypatch)
        run_pipeline(tmp_path / "b", monkeypatch)
        for rel in GOLDEN_FILES:
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes(), rel

    def test_rerun_into_same_dir_is_stable(self, tmp_path, monkeypatch):
        out = tmp_path / "run"
        run_pipeline(out, monkeypatch)
        first = {rel: (out / rel).read_bytes() for rel in GOLDEN_FILES}
        run_pipeline(out, monkeypatch)
        for rel in GOLDEN_FILES:
            assert (out / rel).read_bytes() == first[rel], rel

    def test_seed_recorded_in_report(self, tmp_path, monkeypatch):
        run_pipeline(tmp_path / "run", monkeypatch, seed=0)
        doc = json.loads((tmp_path / "run" / "reports" / "report.json").read_text())
        assert doc["seed"] == 0

    def test_scatter_plots_written(self, tmp_path, monkeypatch):
        run_pipeline(tmp_path / "run", monkeypatch)
        pngs = sorted(p.name for p in (tmp_path / "run" / "reports").glob("*.png"))
        assert pngs  # one scatter per system with scoreable predictions


class TestErrorCategories:
    def test_missing_config_file(self, capsys):
        rc = main(["--config", "/nonexistent/config.json", "build-corpus"])
        assert rc == 2
        assert capsys.readouterr().err.startswith("error: config-error:")

    def test_malformed_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["--config", str(bad), "build-corpus"])
        assert rc == 2
        assert "config-error" in capsys.readouterr().err

    def test_build_corpus_without_raw_segments(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{}")
        rc = main(["--config", str(cfg), "--out", str(tmp_path / "out"), "build-corpus"])
        assert rc == 2
        assert "config-error" in capsys.readouterr().err

    def test_evaluate_with_no_prediction_files(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1722470400")
        monkeypatch.chdir(ROOT)
        base = ["--config", os.path.join(FIXTURES, "run_config.json"),
                "--seed", "0", "--out", str(tmp_path / "out")]
        assert main(base + ["build-corpus"]) == 0
        os.makedirs(tmp_path / "out" / "predictions")
        rc = main(base + ["evaluate"])
        assert rc == 4
        assert capsys.readouterr().err.startswith("error: insufficient-data:")

    def test_evaluate_with_empty_prediction_file(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1722470400")
        monkeypatch.chdir(ROOT)
        base = ["--config", os.path.join(FIXTURES, "run_config.json"),
                "--seed", "0", "--out", str(tmp_path / "out")]
        assert main(base + ["build-corpus"]) == 0
        os.makedirs(tmp_path / "out" / "predictions")
        (tmp_path / "out" / "predictions" / "empty-system.jsonl").write_text("")
        rc = main(base + ["evaluate"])
        assert rc == 4
        assert "insufficient-data" in capsys.readouterr().err

    def test_score_on_malformed_corpus(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        corpus = tmp_path / "corpus.jsonl"
        corpus.write_text("{broken\n")
        cfg.write_text(json.dumps({"corpus": str(corpus),
                                   "systems": [{"type": "gold-cascade"}]}))
        rc = main(["--config", str(cfg), "--out", str(tmp_path), "score"])
        assert rc == 3
        assert "corpus-format-error" in capsys.readouterr().err

    def test_score_without_systems(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1722470400")
        monkeypatch.chdir(ROOT)
        cfg_doc = json.loads(open(os.path.join(FIXTURES, "run_config.json")).read())
        del cfg_doc["systems"]
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(cfg_doc))
        base = ["--config", str(cfg), "--out", str(tmp_path / "out")]
        assert main(base + ["build-corpus"]) == 0
        rc = main(base + ["score"])
        assert rc == 2

    def test_unknown_metric_kind(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "raw_segments": os.path.join(FIXTURES, "raw_segments.jsonl"),
            "metrics": ["bleu"],
        }))
        rc = main(["--config", str(cfg), "--out", str(tmp_path / "out"), "build-corpus"])
        assert rc == 2


class TestTrainCommand:
    def test_single_strategy_writes_checkpoint(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1722470400")
        monkeypatch.chdir(ROOT)
        cfg_doc = json.loads(open(os.path.join(FIXTURES, "run_config.json")).read())
        cfg_doc["n_subsample"] = 4
        cfg_doc["train"] = {"total_steps": 4, "batch_size": 2, "learning_rate": 1e-3,
                            "train_lm_full": True}
        cfg_doc["model"] = {"d_model": 32, "n_layers": 1, "n_heads": 2, "d_ff": 64,
                            "adapter_channels": 8, "bottleneck_dim": 4}
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(cfg_doc))
        base = ["--config", str(cfg), "--seed", "0", "--out", str(tmp_path / "out")]
        assert main(base + ["build-corpus"]) == 0
        assert main(base + ["train", "--strategy", "single"]) == 0
        ckpt = tmp_path / "out" / "checkpoints" / "single"
        assert (ckpt / "model.pt").exists()
        assert json.loads((ckpt / "manifest.json").read_text())["phase"] == "single"
        log_lines = (tmp_path / "out" / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 4
