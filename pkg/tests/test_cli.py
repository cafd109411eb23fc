import json
from pathlib import Path

import numpy as np
import pytest

from rise3d import backbone as bb
from rise3d import datasets as ds
from rise3d.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    rc = main(["generate", "--out", str(out), "--count", "8",
               "--atom-min", "5", "--atom-max", "7", "--seed", "3"])
    assert rc == EXIT_OK
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("model")
    rc = main(["train", "--corpus", str(corpus_dir), "--out", str(out),
               "--epochs", "80", "--lr", "0.005", "--seed", "0"])
    assert rc == EXIT_OK
    return out / "checkpoint.json"


class TestGenerate:
    def test_writes_manifest_and_files(self, corpus_dir):
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        assert len(manifest["molecules"]) == 8
        assert (corpus_dir / "mol_00000.xyz").exists()
        run_manifest = json.loads((corpus_dir / "run_manifest.json").read_text())
        assert run_manifest["subcommand"] == "generate"
        assert run_manifest["config"]["seed"] == 3

    def test_zero_count_is_usage_error(self, tmp_path):
        rc = main(["generate", "--out", str(tmp_path / "x"), "--count", "0"])
        assert rc == EXIT_USAGE

    def test_same_seed_byte_identical_manifest(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["generate", "--out", str(out), "--count", "4",
                         "--seed", "9"]) == EXIT_OK
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_run_manifest_echoes_config(self, corpus_dir):
        doc = json.loads((corpus_dir / "manifest.json").read_text())
        # corpus manifest carries the generation config verbatim
        assert doc["config"]["seed"] == 3
        assert doc["config"]["count"] == 8


class TestTrain:
    def test_checkpoint_and_summary(self, checkpoint):
        params = bb.load_checkpoint(checkpoint)
        assert params.hidden_dim == 32
        summary = json.loads((checkpoint.parent / "training_summary.json").read_text())
        assert summary["val_mae"] >= 0.0

    def test_missing_corpus_is_input_error(self, tmp_path):
        rc = main(["train", "--corpus", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out")])
        assert rc == EXIT_INPUT

    def test_retrain_same_seed_identical(self, tmp_path, corpus_dir):
        outs = []
        for name in ("m1", "m2"):
            out = tmp_path / name
            assert main(["train", "--corpus", str(corpus_dir), "--out", str(out),
                         "--epochs", "30", "--seed", "4"]) == EXIT_OK
            outs.append(json.loads((out / "training_summary.json").read_text()))
        assert outs[0]["val_mae"] == outs[1]["val_mae"]
        assert outs[0]["train_mae"] == outs[1]["train_mae"]

    def test_divergence_is_numeric_error(self, tmp_path, corpus_dir):
        rc = main(["train", "--corpus", str(corpus_dir),
                   "--out", str(tmp_path / "d"), "--epochs", "60",
                   "--lr", "1e9", "--seed", "0"])
        assert rc == EXIT_NUMERIC


class TestExplain:
    def test_rise_results_json(self, tmp_path, corpus_dir, checkpoint):
        out = tmp_path / "ex"
        rc = main(["explain", "--corpus", str(corpus_dir),
                   "--checkpoint", str(checkpoint), "--out", str(out),
                   "--explainer", "rise", "--rho", "0.3",
                   "--epochs", "25", "--seed", "0"])
        assert rc == EXIT_OK
        doc = json.loads((out / "result_rise_00000.json").read_text())
        assert doc["explainer"] == "rise"
        assert doc["radii"] is not None
        assert all(len(e) == 2 for e in doc["kept_edges"])
        assert (out / "records.csv").exists()
        assert (out / "summary.json").exists()

    def test_all_explainers_four_files_per_molecule(self, tmp_path, corpus_dir,
                                                    checkpoint):
        out = tmp_path / "all"
        rc = main(["explain", "--corpus", str(corpus_dir),
                   "--checkpoint", str(checkpoint), "--out", str(out),
                   "--explainer", "all", "--rho", "0.4",
                   "--epochs", "15", "--seed", "0"])
        assert rc == EXIT_OK
        for name in ("rise", "gnnexplainer", "pgexplainer", "lri_bernoulli"):
            assert (out / f"result_{name}_00000.json").exists()
            assert (out / f"result_{name}_00007.json").exists()

    def test_full_budget_keeps_everything(self, tmp_path, corpus_dir, checkpoint):
        out = tmp_path / "full"
        rc = main(["explain", "--corpus", str(corpus_dir),
                   "--checkpoint", str(checkpoint), "--out", str(out),
                   "--explainer", "rise", "--rho", "1.0", "--seed", "0"])
        assert rc == EXIT_OK
        doc = json.loads((out / "result_rise_00000.json").read_text())
        corpus = ds.load_corpus(corpus_dir)
        from rise3d.geometry import build_dpg
        g0 = corpus[0][0]
        edges = build_dpg(g0, g0.construction_radii)
        assert len(doc["kept_edges"]) == edges.n_edges

    def test_rerun_byte_identical_outputs(self, tmp_path, corpus_dir, checkpoint):
        texts = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            rc = main(["explain", "--corpus", str(corpus_dir),
                       "--checkpoint", str(checkpoint), "--out", str(out),
                       "--explainer", "rise", "gnnexplainer", "--rho", "0.35",
                       "--epochs", "20", "--seed", "7"])
            assert rc == EXIT_OK
            texts.append((
                (out / "records.csv").read_bytes(),
                (out / "summary.json").read_bytes(),
                (out / "result_rise_00003.json").read_bytes(),
            ))
        assert texts[0] == texts[1]


class TestAnnulusStudy:
    def test_csv_written(self, tmp_path, corpus_dir, checkpoint):
        out = tmp_path / "ann"
        rc = main(["annulus-study", "--corpus", str(corpus_dir),
                   "--checkpoint", str(checkpoint), "--out", str(out),
                   "--trials", "3", "--seed", "0"])
        assert rc == EXIT_OK
        lines = (out / "annulus_study.csv").read_text().strip().split("\n")
        assert len(lines) == 7

    def test_missing_checkpoint_is_input_error(self, tmp_path, corpus_dir):
        rc = main(["annulus-study", "--corpus", str(corpus_dir),
                   "--checkpoint", str(tmp_path / "missing.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_INPUT

    def test_rerun_identical(self, tmp_path, corpus_dir, checkpoint):
        texts = []
        for name in ("a1", "a2"):
            out = tmp_path / name
            assert main(["annulus-study", "--corpus", str(corpus_dir),
                         "--checkpoint", str(checkpoint), "--out", str(out),
                         "--trials", "2", "--seed", "5"]) == EXIT_OK
            texts.append((out / "annulus_study.csv").read_bytes())
        assert texts[0] == texts[1]


class TestOracleCheck:
    def test_small_run_produces_report(self, tmp_path, checkpoint):
        out = tmp_path / "oc"
        rc = main(["oracle-check", "--checkpoint", str(checkpoint),
                   "--out", str(out), "--instances", "3", "--max-nodes", "5",
                   "--grid-levels", "4", "--epochs", "60", "--seed", "0"])
        assert rc == EXIT_OK
        doc = json.loads((out / "oracle_check.json").read_text())
        assert len(doc["instances"]) == 3
        assert isinstance(doc["passed"], bool)

    def test_grid_level_one_valid(self, tmp_path, checkpoint):
        out = tmp_path / "oc1"
        rc = main(["oracle-check", "--checkpoint", str(checkpoint),
                   "--out", str(out), "--instances", "2", "--max-nodes", "4",
                   "--grid-levels", "1", "--epochs", "30", "--seed", "1"])
        assert rc == EXIT_OK

    def test_too_many_nodes_is_usage_error(self, tmp_path, checkpoint):
        rc = main(["oracle-check", "--checkpoint", str(checkpoint),
                   "--out", str(tmp_path / "oc2"), "--instances", "1",
                   "--max-nodes", "7"])
        assert rc == EXIT_USAGE


class TestLocking:
    def test_second_instance_refused(self, tmp_path, corpus_dir):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").touch()
        rc = main(["generate", "--out", str(out), "--count", "2"])
        assert rc == EXIT_USAGE

    def test_lock_removed_after_success(self, tmp_path):
        out = tmp_path / "clean"
        assert main(["generate", "--out", str(out), "--count", "2"]) == EXIT_OK
        assert not (out / ".lock").exists()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
