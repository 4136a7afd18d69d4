import json
import os

import numpy as np
import pytest

from unismmc import cli, trainer


@pytest.fixture()
def synth_spec_doc():
    return {
        "num_classes": 3,
        "feature_dims": [4, 4],
        "train_samples": 24,
        "valid_samples": 8,
        "test_samples": 8,
        "separation": 1.0,
        "noise_sigma": [0.1, 0.1],
        "corruption_rate": [0.25, 0.25],
        "overlap": "disjoint",
        "seed": 5,
    }


@pytest.fixture()
def experiment_doc(synth_spec_doc):
    return {
        "dataset": "data.umds",
        "synth": synth_spec_doc,
        "model": {"representation_dim": 6, "encoder_hidden": [6], "classifier_hidden": [6, 6]},
        "train": {
            "learning_rate": 0.02,
            "weight_decay": 0.0,
            "micro_batch_size": 8,
            "effective_batch_size": 8,
            "max_epochs": 2,
        },
        "methods": ["mt_mml", "agg_mm"],
        "seeds": [0, 1],
    }


def write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2) + "\n")


def run_gen(tmp_path, synth_spec_doc, capsys):
    spec_path = tmp_path / "spec.json"
    write_json(spec_path, synth_spec_doc)
    out = tmp_path / "data.umds"
    code = cli.main(["gen", "--spec", str(spec_path), "--out", str(out)])
    captured = capsys.readouterr()
    return code, out, captured.out


def test_gen_succeeds_and_prints_checksum(tmp_path, synth_spec_doc, capsys):
    code, out, stdout = run_gen(tmp_path, synth_spec_doc, capsys)
    assert code == 0
    assert out.exists()
    checksum = stdout.split()[0]
    assert len(checksum) == 64 and str(out) in stdout


def test_gen_is_deterministic(tmp_path, synth_spec_doc, capsys):
    _, first, stdout_a = run_gen(tmp_path, synth_spec_doc, capsys)
    blob = first.read_bytes()
    _, second, stdout_b = run_gen(tmp_path, synth_spec_doc, capsys)
    assert second.read_bytes() == blob
    assert stdout_a == stdout_b


def test_gen_accepts_experiment_config_with_synth_section(tmp_path, experiment_doc, capsys):
    spec_path = tmp_path / "experiment.json"
    write_json(spec_path, experiment_doc)
    code = cli.main(["gen", "--spec", str(spec_path), "--out", str(tmp_path / "data.umds")])
    assert code == 0


def test_gen_malformed_spec_fails_with_message(tmp_path, synth_spec_doc, capsys):
    synth_spec_doc["num_classes"] = 1
    spec_path = tmp_path / "spec.json"
    write_json(spec_path, synth_spec_doc)
    code = cli.main(["gen", "--spec", str(spec_path), "--out", str(tmp_path / "data.umds")])
    captured = capsys.readouterr()
    assert code == 1
    assert "error:" in captured.err


def test_gen_missing_spec_file(tmp_path, capsys):
    code = cli.main(["gen", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")])
    assert code == 1
    assert "no such file" in capsys.readouterr().err


@pytest.fixture()
def completed_sweep(tmp_path, synth_spec_doc, experiment_doc, capsys):
    run_gen(tmp_path, synth_spec_doc, capsys)
    config_path = tmp_path / "experiment.json"
    write_json(config_path, experiment_doc)
    out_dir = tmp_path / "runs"
    code = cli.main(["train", "--config", str(config_path), "--out", str(out_dir)])
    assert code == 0
    capsys.readouterr()
    return config_path, out_dir


def test_train_creates_run_dirs_and_summary(completed_sweep):
    config_path, out_dir = completed_sweep
    expected_dirs = [f"{m}-seed{s}" for m in ("mt_mml", "agg_mm") for s in (0, 1)]
    for name in expected_dirs:
        run_dir = out_dir / name
        for artifact in ("metrics.csv", "checkpoint.umck", "embeddings.csv", "config.json", "run.json"):
            assert (run_dir / artifact).exists(), f"{name}/{artifact} missing"
    assert (out_dir / "summary.csv").exists()


def test_train_summary_recomputable_from_run_files(completed_sweep):
    _, out_dir = completed_sweep
    lines = (out_dir / "summary.csv").read_text().splitlines()
    assert lines[0] == "method,runs,mean_accuracy,std_accuracy,min_accuracy,max_accuracy"
    for line in lines[1:]:
        cells = line.split(",")
        method, runs = cells[0], int(cells[1])
        finals = [
            trainer.read_metrics(out_dir / f"{method}-seed{s}" / "metrics.csv").final.accuracy_multimodal
            for s in (0, 1)
        ]
        assert runs == 2
        assert float(cells[2]) == pytest.approx(np.mean(finals), abs=1e-15)
        assert float(cells[3]) == pytest.approx(np.std(finals), abs=1e-15)


def test_train_config_echo_is_verbatim(completed_sweep):
    config_path, out_dir = completed_sweep
    original = config_path.read_text()
    assert (out_dir / "mt_mml-seed0" / "config.json").read_text() == original


def test_train_rerun_is_idempotent(completed_sweep):
    config_path, out_dir = completed_sweep
    before = {}
    for root, _, files in os.walk(out_dir):
        for name in files:
            path = os.path.join(root, name)
            before[path] = open(path, "rb").read()
    assert cli.main(["train", "--config", str(config_path), "--out", str(out_dir)]) == 0
    for path, blob in before.items():
        assert open(path, "rb").read() == blob, f"{path} changed on rerun"


def test_train_parallel_matches_serial(tmp_path, synth_spec_doc, experiment_doc, capsys):
    run_gen(tmp_path, synth_spec_doc, capsys)
    experiment_doc["seeds"] = [0]
    config_path = tmp_path / "experiment.json"
    write_json(config_path, experiment_doc)
    serial_dir = tmp_path / "serial"
    parallel_dir = tmp_path / "parallel"
    assert cli.main(["train", "--config", str(config_path), "--out", str(serial_dir)]) == 0
    assert cli.main(
        ["train", "--config", str(config_path), "--out", str(parallel_dir), "--parallel", "2"]
    ) == 0
    for method in ("mt_mml", "agg_mm"):
        a = (serial_dir / f"{method}-seed0" / "metrics.csv").read_bytes()
        b = (parallel_dir / f"{method}-seed0" / "metrics.csv").read_bytes()
        assert a == b


def test_train_supports_ablation_variant_entries(tmp_path, synth_spec_doc, experiment_doc, capsys):
    run_gen(tmp_path, synth_spec_doc, capsys)
    experiment_doc["methods"] = [
        "unis_mmc",
        {"name": "unis_mmc_plain", "method": "unis_mmc", "use_semi": False, "use_neg": False},
    ]
    experiment_doc["seeds"] = [0]
    config_path = tmp_path / "experiment.json"
    write_json(config_path, experiment_doc)
    out_dir = tmp_path / "runs"
    assert cli.main(["train", "--config", str(config_path), "--out", str(out_dir)]) == 0
    run_doc = json.loads((out_dir / "unis_mmc_plain-seed0" / "run.json").read_text())
    assert run_doc["train_config"]["use_semi"] is False
    assert run_doc["train_config"]["use_neg"] is False
    assert run_doc["method"] == "unis_mmc"


def test_train_requires_existing_dataset(tmp_path, experiment_doc, capsys):
    config_path = tmp_path / "experiment.json"
    write_json(config_path, experiment_doc)
    code = cli.main(["train", "--config", str(config_path), "--out", str(tmp_path / "runs")])
    assert code == 1
    assert "does not exist" in capsys.readouterr().err


def test_train_rejects_mismatched_embedded_spec(tmp_path, synth_spec_doc, experiment_doc, capsys):
    run_gen(tmp_path, synth_spec_doc, capsys)
    experiment_doc["synth"] = dict(synth_spec_doc, seed=99)
    config_path = tmp_path / "experiment.json"
    write_json(config_path, experiment_doc)
    code = cli.main(["train", "--config", str(config_path), "--out", str(tmp_path / "runs")])
    assert code == 1
    assert "does not match" in capsys.readouterr().err


def test_train_rejects_unknown_config_keys(tmp_path, synth_spec_doc, experiment_doc, capsys):
    run_gen(tmp_path, synth_spec_doc, capsys)
    experiment_doc["verbosity"] = 3
    config_path = tmp_path / "experiment.json"
    write_json(config_path, experiment_doc)
    code = cli.main(["train", "--config", str(config_path), "--out", str(tmp_path / "runs")])
    assert code == 1
    assert "unknown keys" in capsys.readouterr().err


def test_consistency_table(completed_sweep, capsys):
    _, out_dir = completed_sweep
    dirs = [str(out_dir / "agg_mm-seed0"), str(out_dir / "mt_mml-seed0")]
    assert cli.main(["consistency", *dirs]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "run,method,both_correct,both_wrong,exclusive"
    assert len(lines) == 3
    # rows follow input order and reproduce each run's final metrics record
    for line, run_dir in zip(lines[1:], dirs):
        cells = line.split(",")
        assert cells[0] == run_dir
        final = trainer.read_metrics(os.path.join(run_dir, "metrics.csv")).final
        assert float(cells[2]) == final.both_correct
        assert float(cells[3]) == final.both_wrong
        assert float(cells[4]) == final.exclusive
        assert float(cells[2]) + float(cells[3]) + float(cells[4]) == pytest.approx(1.0, abs=1e-9)
    assert lines[1].split(",")[1] == "agg_mm"
    assert lines[2].split(",")[1] == "mt_mml"


def test_consistency_requires_two_runs(completed_sweep, capsys):
    _, out_dir = completed_sweep
    code = cli.main(["consistency", str(out_dir / "mt_mml-seed0")])
    assert code == 1
    assert "at least two" in capsys.readouterr().err


def test_consistency_missing_metrics_is_named_error(tmp_path, capsys):
    empty_a = tmp_path / "a"
    empty_b = tmp_path / "b"
    empty_a.mkdir()
    empty_b.mkdir()
    code = cli.main(["consistency", str(empty_a), str(empty_b)])
    assert code == 1
    assert "missing metrics file" in capsys.readouterr().err
