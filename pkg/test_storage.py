#!/usr/bin/env python3
"""
Tests for map files, the surrogate registry and CSV artifacts
"""

import json

import numpy as np
import pandas as pd
import pytest

from app.indexset import MultiIndexSet
from app.sbi import JointSampleSet, SurrogateLikelihood
from app.storage import (
    SurrogateRegistry,
    get_file_hash,
    load_map,
    load_surrogate,
    read_csv,
    read_observations,
    read_samples,
    save_map,
    save_surrogate,
    write_csv,
    write_observations,
    write_samples,
)
from app.transport import MapComponent, TriangularMap


def _map():
    rng = np.random.default_rng(0)
    comp2 = MapComponent(MultiIndexSet(2, ((0, 0), (0, 1), (1, 0), (1, 1))), rng.standard_normal(4) * 0.3)
    return TriangularMap((MapComponent.identity(1), comp2), shift=[0.1, -2.0], scale=[1.5, 0.3])


def test_map_round_trip_is_exact(tmp_path):
    tmap = _map()
    path = str(tmp_path / "map.json")
    save_map(tmap, path)
    restored = load_map(path)
    X = np.random.default_rng(1).standard_normal((50, 2))
    np.testing.assert_array_equal(restored.evaluate(X), tmap.evaluate(X))
    assert restored.direction == tmap.direction


def test_map_file_format_checked(tmp_path):
    path = tmp_path / "map.json"
    save_map(_map(), str(path))
    data = json.loads(path.read_text())
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_map(str(path))
    with pytest.raises(ValueError):
        load_surrogate(str(path))


def test_surrogate_round_trip(tmp_path):
    sur = SurrogateLikelihood(_map(), 1, 4)
    path = str(tmp_path / "sur.json")
    save_surrogate(sur, path)
    restored = load_surrogate(path)
    assert restored.t == 4 and restored.n_theta == 1
    assert restored.loglik([0.3], [-1.0])[0] == sur.loglik([0.3], [-1.0])[0]


def test_registry(tmp_path):
    registry = SurrogateRegistry(str(tmp_path / "surrogates"))
    assert registry.steps() == []
    registry.add(SurrogateLikelihood(_map(), 1, 2), {"n_samples": 100})
    registry.add(SurrogateLikelihood(_map(), 1, 1))
    registry.mark_failed(3, "model crashed")
    assert registry.steps() == [1, 2]
    assert registry.failed() == {3: "model crashed"}
    assert set(registry.load_all()) == {1, 2}
    with pytest.raises(KeyError, match="missing surrogate for step 3"):
        registry.load(3)

    manifest = json.loads((tmp_path / "surrogates" / "manifest.json").read_text())
    entry = manifest["steps"]["2"]
    assert entry["n_samples"] == 100
    assert entry["sha256"] == get_file_hash(str(tmp_path / "surrogates" / "step_002.json"))

    # a later success clears the failure
    registry.add(SurrogateLikelihood(_map(), 1, 3))
    assert registry.failed() == {}


def test_registry_detects_modified_files(tmp_path):
    registry = SurrogateRegistry(str(tmp_path))
    registry.add(SurrogateLikelihood(_map(), 1, 1))
    path = tmp_path / "step_001.json"
    path.write_text(path.read_text() + "\n")
    with pytest.raises(ValueError):
        registry.load(1)


def test_csv_manifest_lines(tmp_path):
    path = str(tmp_path / "table.csv")
    frame = pd.DataFrame({"a": [1.0, 2.5], "b": ["x", "y"]})
    write_csv(frame, path, {"format": "demo", "seed": 3, "tags": [1, 2]})
    with open(path) as f:
        assert f.readline() == '# format: "demo"\n'
    restored, manifest = read_csv(path)
    assert manifest == {"format": "demo", "seed": 3, "tags": [1, 2]}
    pd.testing.assert_frame_equal(restored, frame)


def test_samples_files_are_byte_identical(tmp_path):
    rng = np.random.default_rng(2)
    joint = JointSampleSet(rng.standard_normal((100, 2)), rng.standard_normal(100), 5, skipped=2, seed=9,
                           model_id="em31")
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    write_samples(joint, a)
    write_samples(read_samples(a), b)
    assert get_file_hash(a) == get_file_hash(b)
    restored = read_samples(a)
    np.testing.assert_array_equal(restored.joint, joint.joint)
    assert (restored.t, restored.skipped, restored.seed, restored.model_id) == (5, 2, 9, "em31")


def test_observations_files(tmp_path):
    path = str(tmp_path / "obs.csv")
    write_observations(np.array([600.5, 612.25, 590.0]), path, {"n_y": 1})
    values, manifest = read_observations(path)
    np.testing.assert_array_equal(values[:, 0], [600.5, 612.25, 590.0])
    assert manifest["n_y"] == 1
    frame, _ = read_csv(path)
    assert list(frame["step"]) == [1, 2, 3]

    write_observations(np.empty(0), path, {"n_y": 1})
    values, _ = read_observations(path)
    assert values.shape == (0, 1)


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING RUN STORAGE")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-v"]))
