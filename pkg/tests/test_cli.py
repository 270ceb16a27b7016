import json

import pytest

from nutriscreen.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, KB and a quick training run shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.jsonl"
    kb_data = root / "kbdata.jsonl"
    kb = root / "kb.json"
    runs = root / "runs"
    config = root / "config.json"
    config.write_text(
        json.dumps(
            {
                "max_epochs": 4,
                "folds": 2,
                "patience": 2,
                "heads": 2,
                "head_dim": 8,
                "seed": 42,
                "retrieval": {"k": 3},
            }
        )
    )
    assert dispatch(["gen-data", "--out", str(data), "--n", "36", "--seed", "5"]) == EXIT_OK
    assert (
        dispatch(["gen-data", "--out", str(kb_data), "--n", "20", "--seed", "6"]) == EXIT_OK
    )
    assert dispatch(["build-kb", "--data", str(kb_data), "--out", str(kb)]) == EXIT_OK
    assert (
        dispatch(
            [
                "train",
                "--data", str(data),
                "--kb", str(kb),
                "--config", str(config),
                "--out", str(runs),
            ]
        )
        == EXIT_OK
    )
    return {"root": root, "data": data, "kb": kb, "runs": runs, "config": config}


class TestGenData:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        args = ["--n", "10", "--seed", "3"]
        assert dispatch(["gen-data", "--out", str(a)] + args) == EXIT_OK
        assert dispatch(["gen-data", "--out", str(b)] + args) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_bad_fraction_is_data_error(self, tmp_path):
        code = dispatch(
            ["gen-data", "--out", str(tmp_path / "x.jsonl"), "--positive-fraction", "1.5"]
        )
        assert code == EXIT_DATA


class TestUsage:
    def test_unknown_flag(self, tmp_path):
        assert dispatch(["gen-data", "--out", str(tmp_path / "d"), "--bogus", "1"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert dispatch(["frobnicate"]) == EXIT_USAGE

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            dispatch(["--help"])
        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        for command in ("gen-data", "build-kb", "train", "evaluate", "predict", "ablate", "sweep", "serve"):
            assert command in out

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert dispatch(["build-kb", "--data", str(tmp_path / "no.jsonl"), "--out", str(tmp_path / "kb")]) == EXIT_DATA


class TestTrainArtifacts:
    def test_run_dir_contents(self, workspace):
        runs = workspace["runs"]
        for name in (
            "fold0.model.json",
            "fold1.model.json",
            "fold0.report.json",
            "fold1.report.json",
            "summary.json",
        ):
            assert (runs / name).exists(), name

    def test_train_rerun_is_byte_identical(self, workspace, tmp_path):
        runs2 = tmp_path / "runs2"
        code = dispatch(
            [
                "train",
                "--data", str(workspace["data"]),
                "--kb", str(workspace["kb"]),
                "--config", str(workspace["config"]),
                "--out", str(runs2),
            ]
        )
        assert code == EXIT_OK
        for name in ("fold0.model.json", "summary.json"):
            assert (runs2 / name).read_bytes() == (workspace["runs"] / name).read_bytes()


class TestEvaluatePredict:
    def test_evaluate_writes_report(self, workspace, tmp_path):
        out = tmp_path / "report.json"
        code = dispatch(
            [
                "evaluate",
                "--model", str(workspace["runs"] / "fold0.model.json"),
                "--data", str(workspace["data"]),
                "--kb", str(workspace["kb"]),
                "--config", str(workspace["config"]),
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        report = json.loads(out.read_text())
        assert "classification" in report and "regression" in report

    def test_predict_self_member_distance_zero(self, workspace, tmp_path, capsys):
        # a KB member queried against its own KB must match itself first
        from nutriscreen.records import load_dataset, save_dataset

        kb_records = load_dataset(workspace["root"] / "kbdata.jsonl")
        subject = tmp_path / "one.jsonl"
        save_dataset([kb_records[0]], subject)
        code = dispatch(
            [
                "predict",
                "--model", str(workspace["runs"] / "fold0.model.json"),
                "--kb", str(workspace["kb"]),
                "--subject", str(subject),
                "--config", str(workspace["config"]),
            ]
        )
        assert code == EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert payload["neighbors"][0]["distance"] == pytest.approx(0.0, abs=1e-9)
        assert payload["decision"] in ("healthy", "malnourished")
        lo = min(payload["gat_probability"], payload["retrieved_score"])
        hi = max(payload["gat_probability"], payload["retrieved_score"])
        assert lo - 1e-12 <= payload["fused_probability"] <= hi + 1e-12

    def test_evaluate_retrieval_off_without_kb(self, workspace, capsys):
        code = dispatch(
            [
                "evaluate",
                "--model", str(workspace["runs"] / "fold0.model.json"),
                "--data", str(workspace["data"]),
                "--config", str(workspace["config"]),
                "--retrieval", "off",
            ]
        )
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert "classification" in report

    def test_predict_multi_record_file_rejected(self, workspace):
        code = dispatch(
            [
                "predict",
                "--model", str(workspace["runs"] / "fold0.model.json"),
                "--kb", str(workspace["kb"]),
                "--subject", str(workspace["data"]),
            ]
        )
        assert code == EXIT_DATA


class TestSweepAndAblate:
    def test_sweep_k_grid(self, workspace, capsys):
        code = dispatch(
            [
                "sweep",
                "--axis", "k",
                "--values", "3,5,7,10",
                "--data", str(workspace["data"]),
                "--kb", str(workspace["kb"]),
                "--config", str(workspace["config"]),
            ]
        )
        assert code == EXIT_OK
        rows = json.loads(capsys.readouterr().out)
        assert [row["value"] for row in rows] == [3.0, 5.0, 7.0, 10.0]
        assert all(row["f1"] is not None for row in rows)

    def test_sweep_table_format(self, workspace, capsys):
        code = dispatch(
            [
                "sweep",
                "--axis", "tau_reg",
                "--data", str(workspace["data"]),
                "--kb", str(workspace["kb"]),
                "--config", str(workspace["config"]),
                "--format", "table",
            ]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "---" in out  # classification columns blank on the tau_reg axis
        assert len([ln for ln in out.strip().splitlines() if ln]) == 2 + 4  # header+rule+4 rows
