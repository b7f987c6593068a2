"""
Tests for file contracts and the parameter store.
"""
import numpy as np
import pandas as pd
import pytest

from pip_motion.errors import ConfigurationError, DimensionError, ValidationFailure
from pip_motion.models import GenConfig, RunManifest, Scene
from pip_motion.params import ModelParams, declared_shapes, scope
from pip_motion.storage import (
    manifest_path,
    read_json,
    read_scenes,
    write_csv,
    write_jsonl,
    write_manifest,
)
from pip_motion.synthgen import generate_scenes
from pip_motion.tensor import DerivativeRecord


class TestStorage:
    """Test JSON Lines, CSV and manifest files."""

    def test_scene_file_round_trip(self, tmp_path, config):
        scenes = generate_scenes(GenConfig(seed=1), 3, config)
        path = tmp_path / "scenes.jsonl"
        assert write_jsonl(path, scenes) == 3
        assert read_scenes(path) == scenes

    def test_no_temporary_files_left(self, tmp_path):
        write_jsonl(tmp_path / "out.jsonl", [Scene(scene_id="a")])
        assert [p.name for p in tmp_path.iterdir()] == ["out.jsonl"]

    def test_failed_write_keeps_previous_file(self, tmp_path):
        path = tmp_path / "out.jsonl"
        write_jsonl(path, [Scene(scene_id="a")])

        def broken():
            yield Scene(scene_id="b")
            raise RuntimeError("interrupted")

        with pytest.raises(RuntimeError):
            write_jsonl(path, broken())
        assert [s.scene_id for s in read_scenes(path)] == ["a"]
        assert len(list(tmp_path.iterdir())) == 1

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text('{"scene_id": "a"}\n{"scene_id": 5, "agents": "x"}\n')
        with pytest.raises(ValidationFailure, match=":2"):
            read_scenes(path)

    def test_blank_lines_are_skipped(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text('{"scene_id": "a"}\n\n')
        assert len(read_scenes(path)) == 1

    def test_csv_append(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_csv(path, pd.DataFrame([{"label": "a", "epa": 0.5}]))
        write_csv(path, pd.DataFrame([{"label": "b", "epa": 0.7}]), append=True)
        frame = pd.read_csv(path)
        assert frame["label"].tolist() == ["a", "b"]

    def test_manifest_next_to_output(self, tmp_path):
        output = tmp_path / "scenes.jsonl"
        manifest = RunManifest(command="gen", seed=1, build="1.0.0", duration_seconds=0.1)
        path = write_manifest(output, manifest)
        assert path == manifest_path(output) == tmp_path / "scenes.jsonl.manifest.json"
        assert read_json(path)["command"] == "gen"


class TestModelParams:
    """Test parameter initialization, checking and persistence."""

    def test_init_matches_declared_shapes(self, params, config):
        params.check(config)
        assert list(params) == list(declared_shapes(config))

    def test_init_is_seeded(self, config):
        a, b = ModelParams.init(config, seed=3), ModelParams.init(config, seed=3)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_orphan_parameter(self, params, config):
        arrays = dict(params.arrays)
        arrays["extra.w0"] = np.zeros(2)
        with pytest.raises(ConfigurationError):
            ModelParams(arrays).check(config)

    def test_wrong_shape(self, params, config):
        arrays = dict(params.arrays)
        arrays["mode_queries"] = np.zeros((config.N_MODE + 1, config.C))
        with pytest.raises(DimensionError):
            ModelParams(arrays).check(config)

    def test_save_load_is_bitwise(self, tmp_path, rng, config):
        arrays = {name: rng.standard_normal(shape) * 10.0 ** rng.integers(-8, 8)
                  for name, shape in declared_shapes(config).items()}
        params = ModelParams(arrays)
        path = tmp_path / "params.json"
        params.save(path)
        loaded = ModelParams.load(path)
        assert list(loaded) == list(params)
        for name in params:
            assert loaded[name].tobytes() == params[name].tobytes()

    def test_copy_is_independent(self, params):
        copied = params.copy()
        copied.arrays["mode_queries"][0, 0] = 99.0
        assert params["mode_queries"][0, 0] != 99.0

    def test_bind_with_record(self, params):
        record = DerivativeRecord()
        bound = params.bind(record)
        assert len(record) == len(params)
        assert all(v.tracked for v in bound.values())

    def test_scope(self, params):
        head = scope(params.bind(), "motion_head")
        assert set(head) == {"w0", "b0", "w1", "b1"}
