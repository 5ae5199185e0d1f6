import json

import numpy as np
import pytest

from main import build_parser, main, run_config_from_args
from services.checkpoint import load_checkpoint

SYNTH_FLAGS = ["--visits", "60", "--activities", "30", "--clusters", "3",
               "--diagnoses", "3", "--families", "3", "--mean-los", "4"]
MODEL_FLAGS = ["--epochs", "1", "--dim", "8", "--heads", "2", "--layers", "1",
               "--lstm-hidden", "4", "--batch-size", "16", "--no-progress"]


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cohort = root / "cohort.jsonl"
    checkpoint = root / "model.i2v"
    assert main(["synth", "--out", str(cohort), "--seed", "3", *SYNTH_FLAGS]) == 0
    assert main(["pretrain", str(cohort), "--out", str(checkpoint), "--seed", "3", *MODEL_FLAGS]) == 0
    return root, cohort, checkpoint


class TestParser:
    def test_no_command_prints_help(self, capsys):
        assert main([]) == 0
        assert "pretrain" in capsys.readouterr().out

    def test_flags_override_preset(self):
        args = build_parser().parse_args(["pretrain", "c.jsonl", *MODEL_FLAGS, "--ablation", "pairwise-day"])
        run = run_config_from_args(args)
        assert run.model.embed_dim == 8
        assert run.train.epochs == 1
        assert run.train.pairwise_day_task
        assert not run.train.progress

    def test_unset_flags_keep_preset(self):
        run = run_config_from_args(build_parser().parse_args(["pretrain", "c.jsonl", "--preset", "full"]))
        assert run.model.embed_dim == 384
        assert not run.train.unmasked_day_reps


class TestExitCodes:
    def test_missing_cohort(self, tmp_path):
        assert main(["stats", str(tmp_path / "none.jsonl")]) == 2

    def test_bad_config_key(self, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text("[model]\nwidth = 3\n", encoding="utf-8")
        assert main(["stats", "x.jsonl", "--config", str(config)]) == 2

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "bad.i2v"
        path.write_bytes(b"not a checkpoint at all")
        assert main(["nearest", str(path), "A1"]) == 3

    def test_unknown_code(self, artifacts):
        _, _, checkpoint = artifacts
        assert main(["nearest", str(checkpoint), "NOT-A-CODE"]) == 2

    def test_days_export_needs_cohort(self, artifacts, tmp_path):
        _, _, checkpoint = artifacts
        assert main(["export", str(checkpoint), str(tmp_path / "d.tsv"), "--what", "days"]) == 2


class TestCommands:
    def test_synth_writes_truth(self, artifacts):
        root, cohort, _ = artifacts
        assert cohort.is_file()
        assert (root / "cohort.truth.json").is_file()

    def test_stats(self, artifacts, capsys):
        _, cohort, _ = artifacts
        assert main(["stats", str(cohort), "--filtered"]) == 0
        assert "filtered" in capsys.readouterr().out

    def test_pretrain_outputs(self, artifacts):
        root, _, checkpoint = artifacts
        loaded = load_checkpoint(checkpoint)
        assert loaded.model.config.embed_dim == 8
        assert len(loaded.log) == 2
        assert loaded.metadata["split"]["seed"] == 3
        assert (root / "model.log.csv").is_file()

    def test_nearest(self, artifacts, capsys):
        _, _, checkpoint = artifacts
        code = load_checkpoint(checkpoint).vocabulary.activity_codes[0]
        assert main(["nearest", str(checkpoint), code, "--k", "3"]) == 0
        assert "Nearest activities" in capsys.readouterr().out

    def test_export_activities(self, artifacts, tmp_path):
        _, _, checkpoint = artifacts
        out = tmp_path / "activities.tsv"
        assert main(["export", str(checkpoint), str(out)]) == 0
        vocab = load_checkpoint(checkpoint).vocabulary
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == vocab.n_activities
        assert lines[0].split("\t")[0] == vocab.activity_codes[0]
        assert len(lines[0].split("\t")) == 9

    def test_export_days(self, artifacts, tmp_path):
        _, cohort, checkpoint = artifacts
        out = tmp_path / "days.tsv"
        assert main(["export", str(checkpoint), str(out), "--what", "days", "--cohort", str(cohort)]) == 0
        rows = [line.split("\t") for line in out.read_text(encoding="utf-8").splitlines()]
        assert all(":" in row[0] for row in rows)
        assert np.isfinite(np.array([row[1:] for row in rows], dtype=float)).all()

    def test_eval_without_finetune(self, artifacts, tmp_path):
        _, cohort, checkpoint = artifacts
        code = main([
            "eval", str(checkpoint), "--cohort", str(cohort), "--tasks", "intrusion,recall",
            "--n-sets", "20", "--no-finetune", "--out-dir", str(tmp_path),
        ])
        assert code == 0
        report = json.loads((tmp_path / "eval_report.json").read_text(encoding="utf-8"))
        assert report["intrusion"]["n_sets"] == 20
        assert set(report["recall"]) == {"Inpatient2Vec (pretrained head)", "Frequency baseline"}
        assert (tmp_path / "eval_report.txt").is_file()

    def test_eval_without_truth_writes_worksheet(self, artifacts, tmp_path):
        _, _, checkpoint = artifacts
        assert main(["eval", str(checkpoint), "--tasks", "intrusion", "--n-sets", "10", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "intrusion_worksheet.csv").is_file()
        assert (tmp_path / "intrusion_answers.csv").is_file()

    def test_eval_recall_needs_cohort(self, artifacts, tmp_path):
        _, _, checkpoint = artifacts
        assert main(["eval", str(checkpoint), "--tasks", "recall", "--out-dir", str(tmp_path)]) == 2

    def test_finetune_los(self, artifacts, capsys):
        _, cohort, checkpoint = artifacts
        assert main(["finetune", str(checkpoint), str(cohort), "--task", "los", "--epochs", "1",
                     "--no-control", "--no-progress"]) == 0
        out = capsys.readouterr().out
        assert "report" in out and "baseline" in out

    def test_synth_is_deterministic(self, tmp_path):
        flags = ["--seed", "7", "--visits", "20", "--activities", "15", "--clusters", "3"]
        assert main(["synth", "--out", str(tmp_path / "a.jsonl"), *flags]) == 0
        assert main(["synth", "--out", str(tmp_path / "b.jsonl"), *flags]) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.truth.json").read_bytes() == (tmp_path / "b.truth.json").read_bytes()

    def test_synth_rejects_bad_flags(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path / "c.jsonl"), "--activities", "5", "--clusters", "9"])
        assert code == 2
        assert "n_clusters" in capsys.readouterr().out

    def test_eval_cluster_only(self, artifacts, tmp_path):
        _, cohort, checkpoint = artifacts
        assert main(["eval", str(checkpoint), "--cohort", str(cohort), "--tasks", "cluster",
                     "--out-dir", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "eval_report.json").read_text(encoding="utf-8"))
        assert report["intrusion"] is None
        assert report["recall"] == {} and report["los"] == {}

    def test_nearest_clamps_k(self, artifacts, capsys):
        _, _, checkpoint = artifacts
        vocab = load_checkpoint(checkpoint).vocabulary
        code = vocab.activity_codes[0]
        assert main(["nearest", str(checkpoint), code, "--k", "1000"]) == 0
        out = capsys.readouterr().out
        assert str(vocab.n_activities - 1) in out

    def test_export_round_trip(self, artifacts, tmp_path):
        _, _, checkpoint = artifacts
        out = tmp_path / "activities.tsv"
        assert main(["export", str(checkpoint), str(out)]) == 0
        loaded = load_checkpoint(checkpoint)
        vectors = np.array([line.split("\t")[1:] for line in out.read_text(encoding="utf-8").splitlines()], dtype=float)
        np.testing.assert_array_equal(vectors, loaded.model.tables.activity.data[:loaded.vocabulary.n_activities])
