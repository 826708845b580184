import json
from pathlib import Path

import numpy as np
import pytest

from slpd_toolkit import cli
from slpd_toolkit.config import ModelConfig
from slpd_toolkit.errors import NumericError
from slpd_toolkit.io.checkpoint import read_checkpoint
from slpd_toolkit.io.embedding_store import dataset_from_arrays, load_dataset, write_dataset
from slpd_toolkit.io.reports import read_metrics_log
from slpd_toolkit.training.distill import init_state
from slpd_toolkit.training.trainer import TrainingStreams

_SMALL_MODEL = {"hidden": [8, 8], "embed_dim": 4, "head_hidden": 6, "out_dim": 6}


@pytest.fixture(autouse=True)
def _isolated_settings(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("SLPD_TOOLKIT_CONFIG", raising=False)
    monkeypatch.chdir(tmp_path)


def _write_config(tmp_path: Path, **train_overrides) -> Path:
    train = {"epochs": 1, "batch_size": 16, "kmeans_restarts": 2, "model": _SMALL_MODEL}
    train.update(train_overrides)
    path = tmp_path / "small.json"
    path.write_text(json.dumps({"workers": 1, "train": train, "eval": {"folds": 2, "k_eval": 1}}), encoding="utf-8")
    return path


def _synth(tmp_path: Path, name: str = "data", seed: int = 0) -> Path:
    out = tmp_path / name
    code = cli.main(
        [
            "synth", "--out", str(out), "--num-slides", "8", "--regions-per-slide", "6", "--d-in", "4",
            "--class-separation", "4.0", "--seed", str(seed),
        ]
    )
    assert code == 0
    return out


def _tree_bytes(root: Path) -> dict:
    return {path.relative_to(root).as_posix(): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


def test_help_lists_every_default(capsys: pytest.CaptureFixture[str], monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("COLUMNS", "400")

    with pytest.raises(SystemExit) as excinfo:
        cli.main(["train", "--help"])

    assert excinfo.value.code == 0
    out = capsys.readouterr().out
    assert "Training epochs (default: 30)" in out
    assert "SGD learning rate (default: 0.01)" in out
    assert "Prototypes per slide (default: 2)" in out
    assert "Inter-slide distillation target (default: prototype)" in out
    assert "Teacher softmax temperature (default: 0.04)" in out


def test_synth_is_byte_identical_for_the_same_seed(tmp_path: Path) -> None:
    first = _synth(tmp_path, "first")
    second = _synth(tmp_path, "second")
    other = _synth(tmp_path, "other", seed=1)

    assert _tree_bytes(first) == _tree_bytes(second)
    assert _tree_bytes(first) != _tree_bytes(other)
    dataset = load_dataset(first)
    assert len(dataset.slides) == 8
    assert dataset.d_in == 4


def test_usage_errors_exit_with_code_one(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _synth(tmp_path)

    with pytest.raises(SystemExit) as missing_flag:
        cli.main(["train", "--input", str(data)])
    with pytest.raises(SystemExit) as bad_choice:
        cli.main(["train", "--input", str(data), "--out", str(tmp_path / "run"), "--inter-mode", "sideways"])

    assert missing_flag.value.code == 1
    assert bad_choice.value.code == 1
    assert cli.main(["cluster", "--input", str(data), "--out", str(tmp_path / "p"), "--M", "0"]) == 1
    assert "M must be >= 1" in capsys.readouterr().err
    assert cli.main(["--config", str(tmp_path / "absent.json"), "synth", "--out", str(tmp_path / "x")]) == 1


def test_missing_inputs_exit_with_code_two(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _synth(tmp_path)

    assert cli.main(["cluster", "--input", str(tmp_path / "absent"), "--out", str(tmp_path / "p")]) == 2
    assert cli.main(
        ["eval", "--input", str(data), "--checkpoint", str(tmp_path / "none.slpc"), "--out", str(tmp_path / "r.json")]
    ) == 2
    assert "error:" in capsys.readouterr().err


def test_malformed_manifest_exits_with_code_two(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _synth(tmp_path)
    manifest_path = data / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    del manifest["slides"][0]["path"]
    manifest_path.write_text(json.dumps(manifest), encoding="utf-8")

    assert cli.main(["cluster", "--input", str(data), "--out", str(tmp_path / "p")]) == 2
    assert "error:" in capsys.readouterr().err


def test_filesystem_errors_exit_with_code_two(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory", encoding="utf-8")

    assert cli.main(["synth", "--out", str(blocker / "sub"), "--num-slides", "8", "--seed", "0"]) == 2
    assert "error:" in capsys.readouterr().err


def test_global_cluster_counts_only_slides_with_enough_regions(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    dataset = dataset_from_arrays(
        {"a": rng.normal(size=(5, 3)), "tiny": rng.normal(size=(1, 3)), "b": rng.normal(size=(5, 3))}
    )
    write_dataset(dataset, tmp_path / "data")

    code = cli.main(
        ["cluster", "--input", str(tmp_path / "data"), "--mode", "global", "--M", "2", "--out", str(tmp_path / "p")]
    )

    assert code == 0
    assert load_dataset(tmp_path / "p").slides[0].features.shape == (4, 3)
    skip_list = json.loads((tmp_path / "p" / "skip_list.json").read_text(encoding="utf-8"))
    assert skip_list["skipped"] == ["tiny"]


def test_numeric_failures_exit_with_code_three(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    data = _synth(tmp_path)

    def _diverge(*args, **kwargs):
        raise NumericError("loss became non-finite")

    monkeypatch.setattr(cli, "train", _diverge)

    assert cli.main(["train", "--input", str(data), "--out", str(tmp_path / "run")]) == 3


def test_train_with_zero_epochs_writes_the_initial_state(tmp_path: Path) -> None:
    data = _synth(tmp_path)
    config = _write_config(tmp_path)

    code = cli.main(
        ["--config", str(config), "train", "--input", str(data), "--out", str(tmp_path / "run"), "--epochs", "0",
         "--seed", "5"]
    )

    assert code == 0
    restored = read_checkpoint(tmp_path / "run" / cli.CHECKPOINT_NAME)
    initial = init_state(ModelConfig.from_mapping(_SMALL_MODEL), 4, TrainingStreams.from_seed(5).init)
    for before, after in zip(initial.student.arrays(), restored.student.arrays()):
        np.testing.assert_array_equal(before.astype(np.float32), after)
    assert read_metrics_log(tmp_path / "run" / cli.METRICS_NAME) == []
    settings = json.loads((tmp_path / "run" / cli.SETTINGS_NAME).read_text(encoding="utf-8"))
    assert settings["train"]["epochs"] == 0
    assert settings["train"]["seed"] == 5


def test_training_runs_are_byte_identical_across_runs_and_workers(tmp_path: Path) -> None:
    data = _synth(tmp_path)
    config = _write_config(tmp_path, epochs=2)

    for name, workers in (("a", "1"), ("b", "1"), ("c", "4")):
        code = cli.main(
            ["--config", str(config), "train", "--input", str(data), "--out", str(tmp_path / name), "--no-wall-time",
             "--workers", workers]
        )
        assert code == 0

    for filename in (cli.CHECKPOINT_NAME, cli.METRICS_NAME):
        reference = (tmp_path / "a" / filename).read_bytes()
        assert (tmp_path / "b" / filename).read_bytes() == reference
        assert (tmp_path / "c" / filename).read_bytes() == reference
    records = read_metrics_log(tmp_path / "a" / cli.METRICS_NAME)
    assert [record["epoch"] for record in records] == [0, 1]
    assert all("wall_time" not in record for record in records)


def test_end_to_end_pipeline(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data = _synth(tmp_path)
    config = _write_config(tmp_path)
    run = tmp_path / "run"

    assert cli.main(["--config", str(config), "train", "--input", str(data), "--out", str(run)]) == 0
    checkpoint = run / cli.CHECKPOINT_NAME

    report_path = tmp_path / "report.json"
    assert cli.main(
        ["--config", str(config), "eval", "--input", str(data), "--checkpoint", str(checkpoint), "--out",
         str(report_path), "--export-pooled", str(tmp_path / "pooled")]
    ) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert 0.0 <= report["accuracy"] <= 1.0
    assert 0.0 <= report["auc"] <= 1.0
    assert len(report["fold_accuracy"]) == 2
    assert report["compactness"] is not None
    assert load_dataset(tmp_path / "pooled").slides[0].features.shape == (1, 4)

    similarity_path = tmp_path / "similarity.json"
    assert cli.main(
        ["--config", str(config), "similarity", "--input", str(data), "--checkpoint", str(checkpoint), "--out",
         str(similarity_path)]
    ) == 0
    capsys.readouterr()
    assert cli.main(["neighbors", "--similarity", str(similarity_path), "--K", "2", "--slide", "slide-0000"]) == 0
    neighbors = json.loads(capsys.readouterr().out)
    assert list(neighbors) == ["slide-0000"]
    assert len(neighbors["slide-0000"]) == 2
    assert cli.main(["neighbors", "--similarity", str(similarity_path), "--slide", "missing"]) == 2

    assert cli.main(
        ["--config", str(config), "cluster", "--input", str(data), "--mode", "global", "--out", str(tmp_path / "protos")]
    ) == 0
    assert load_dataset(tmp_path / "protos").slides[0].features.shape == (16, 4)
    assert not (tmp_path / "protos" / "assignments.json").exists()
    assert cli.main(["--config", str(config), "cluster", "--input", str(data), "--out", str(tmp_path / "per-slide")]) == 0
    rows = json.loads((tmp_path / "per-slide" / "assignments.json").read_text(encoding="utf-8"))
    assert len(rows) == 48
    assert rows[0]["slide_id"] == "slide-0000" and rows[0]["region_index"] == 0
    assert {row["prototype"] for row in rows} == {0, 1}

    ablations = tmp_path / "ablations"
    assert cli.main(["--config", str(config), "ablate", "--input", str(data), "--axes", "M", "--out", str(ablations)]) == 0
    summary = json.loads((ablations / "summary.json").read_text(encoding="utf-8"))
    assert [entry["name"] for entry in summary] == ["M-2", "M-3", "M-4"]
    assert all(entry["accuracy"] is not None for entry in summary)
    assert (ablations / "M-3.metrics.jsonl").exists()
