"""
Tests for the command-line surface and its exit codes.
"""
import json

import pandas as pd
import pytest

from pip_motion.cli import run
from pip_motion.config import tiny_config
from pip_motion.errors import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    EvaluationError,
    GenerationError,
    NumericalError,
    ValidationFailure,
    exit_code_for,
)
from pip_motion.models import PredictionSet, validate_many
from pip_motion.storage import manifest_path, read_json, read_predictions, read_scenes, write_jsonl


@pytest.fixture
def tiny_config_file(tmp_path):
    """Tiny model and a generator whose agents keep complete futures."""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "model": tiny_config().model_dump(mode="json"),
        "generator": {"seed": 1, "exit_fraction": 0.0},
        "training": {"steps": 3, "log_every": 1},
    }))
    return str(path)


@pytest.fixture
def scenes_file(tmp_path, tiny_config_file):
    path = tmp_path / "scenes.jsonl"
    assert run(["gen", "--config", tiny_config_file, "--num", "3", "--out", str(path)]) == EXIT_OK
    return str(path)


class TestCommands:
    """Test each command end to end on the tiny configuration."""

    def test_gen_writes_scenes_and_manifest(self, scenes_file):
        assert len(read_scenes(scenes_file)) == 3
        manifest = read_json(manifest_path(scenes_file))
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 1
        assert manifest["config"]["model"]["C"] == 8

    def test_seed_flag_overrides_config(self, tmp_path, tiny_config_file):
        out = tmp_path / "other.jsonl"
        assert run(["gen", "--config", tiny_config_file, "--seed", "5", "--num", "1", "--out", str(out)]) == EXIT_OK
        assert read_scenes(out)[0].scene_id == "s5-000000"

    def test_perfect_oracle_evaluates_to_one(self, tmp_path, tiny_config_file, scenes_file):
        preds = tmp_path / "preds.jsonl"
        report = tmp_path / "report.json"
        assert run(["perturb", "--config", tiny_config_file, "--scenes", scenes_file, "--noise", "0",
                    "--out", str(preds)]) == EXIT_OK
        assert run(["eval", "--config", tiny_config_file, "--scenes", scenes_file, "--preds", str(preds),
                    "--report", str(report)]) == EXIT_OK
        assert read_json(report)["epa"] == 1.0

    def test_csv_rows_accumulate(self, tmp_path, tiny_config_file, scenes_file):
        preds = tmp_path / "preds.jsonl"
        table = tmp_path / "summary.csv"
        run(["perturb", "--config", tiny_config_file, "--scenes", scenes_file, "--noise", "1.0", "--out", str(preds)])
        for label in ("first", "second"):
            assert run(["eval", "--config", tiny_config_file, "--scenes", scenes_file, "--preds", str(preds),
                        "--report", str(tmp_path / f"{label}.json"), "--csv", str(table),
                        "--label", label]) == EXIT_OK
        assert pd.read_csv(table)["label"].tolist() == ["first", "second"]

    def test_train_then_infer(self, tmp_path, tiny_config_file, scenes_file):
        params, log, preds = tmp_path / "params.json", tmp_path / "loss.csv", tmp_path / "preds.jsonl"
        assert run(["train", "--config", tiny_config_file, "--scenes", scenes_file, "--out", str(params),
                    "--log", str(log)]) == EXIT_OK
        assert len(pd.read_csv(log)) == 3
        assert manifest_path(params).exists()
        assert run(["infer", "--config", tiny_config_file, "--scenes", scenes_file, "--params", str(params),
                    "--out", str(preds)]) == EXIT_OK
        predictions = read_predictions(preds)
        assert [p.scene_id for p in predictions] == [s.scene_id for s in read_scenes(scenes_file)]
        assert validate_many(predictions, tiny_config()) == []

    def test_infer_with_mismatched_params(self, tmp_path, tiny_config_file, scenes_file):
        params = tmp_path / "params.json"
        params.write_text(json.dumps({"mode_queries": {"shape": [1, 1], "values": [0.0]}}))
        code = run(["infer", "--config", tiny_config_file, "--scenes", scenes_file, "--params", str(params),
                    "--out", str(tmp_path / "preds.jsonl")])
        assert code == EXIT_USAGE

    @pytest.mark.slow
    def test_gradcheck(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(["gradcheck"]) == EXIT_OK
        assert (tmp_path / "gradcheck.manifest.json").exists()

    def test_sampled_gradcheck(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(["gradcheck", "--max-coords", "4"]) == EXIT_OK
        assert (tmp_path / "gradcheck.manifest.json").exists()

    @pytest.mark.slow
    def test_demo(self, tmp_path):
        out = tmp_path / "demo"
        assert run(["demo", "--num", "2", "--steps", "20", "--out-dir", str(out)]) == EXIT_OK
        assert (out / "report.json").exists()


class TestExitCodes:
    """Test usage and validation failures."""

    def test_missing_command(self):
        assert run([]) == EXIT_USAGE

    def test_missing_required_flag(self):
        assert run(["gen", "--num", "3"]) == EXIT_USAGE

    def test_help(self):
        assert run(["--help"]) == EXIT_OK

    def test_missing_input_file(self, tmp_path):
        assert run(["perturb", "--scenes", str(tmp_path / "absent.jsonl"), "--noise", "1",
                    "--out", str(tmp_path / "p.jsonl")]) == EXIT_USAGE

    def test_invalid_config_value(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"TAU": 3.0}}))
        assert run(["gen", "--config", str(path), "--num", "1", "--out", str(tmp_path / "s.jsonl")]) == EXIT_USAGE

    def test_malformed_scene(self, tmp_path, tiny_config_file, scenes_file, capsys):
        scenes = read_scenes(scenes_file)
        broken = scenes[0].model_copy(update={"map_instances": [
            scenes[0].map_instances[0].model_copy(update={"points": [(0.0, 0.0)] * 9})]})
        path = tmp_path / "broken.jsonl"
        write_jsonl(path, [broken])
        code = run(["perturb", "--config", tiny_config_file, "--scenes", str(path), "--noise", "0",
                    "--out", str(tmp_path / "p.jsonl")])
        assert code == EXIT_VALIDATION
        assert f"violation: {broken.scene_id}.map_instances.points[0]" in capsys.readouterr().err

    def test_mismatched_scene_ids(self, tmp_path, tiny_config_file, scenes_file):
        preds = tmp_path / "preds.jsonl"
        write_jsonl(preds, [PredictionSet(scene_id="elsewhere")])
        code = run(["eval", "--config", tiny_config_file, "--scenes", scenes_file, "--preds", str(preds),
                    "--report", str(tmp_path / "r.json")])
        assert code == EXIT_VALIDATION

    def test_infeasible_generator(self, tmp_path):
        path = tmp_path / "no_lanes.json"
        path.write_text(json.dumps({
            "model": tiny_config().model_dump(mode="json"),
            "generator": {"lanes_per_scene": 0, "agents_per_scene": 3},
        }))
        assert run(["gen", "--config", str(path), "--num", "1", "--out", str(tmp_path / "s.jsonl")]) == EXIT_USAGE

    @pytest.mark.parametrize("error, code", [
        (ValidationFailure("bad scene"), EXIT_VALIDATION),
        (ConfigurationError("bad config"), EXIT_USAGE),
        (GenerationError("no lanes"), EXIT_USAGE),
        (DimensionError("shape"), EXIT_USAGE),
        (ContractError("precondition"), EXIT_USAGE),
        (DomainError("empty axis"), EXIT_USAGE),
        (NumericalError("nan"), EXIT_NUMERICAL),
        (EvaluationError("inf"), EXIT_NUMERICAL),
    ])
    def test_every_error_has_a_documented_code(self, error, code):
        assert exit_code_for(error) == code
