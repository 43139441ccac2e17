import json
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from effdim.errors import InvalidInputError, ReportError
from effdim.services.dataset_factory import Dataset
from effdim.services.dmaps_core import Embedding, KernelVariant
from effdim.services.extension import gh_eval, gh_fit
from effdim.services.storage import ArtifactStore, to_jsonable


def test_to_jsonable_converts_numpy_and_enums():
    payload = {"a": np.arange(3), "b": np.float64(1.5), "c": (1, 2), "d": KernelVariant.PLAIN_INPUT,
               "e": Path("x/y"), 3: {"f": np.int64(2)}}
    converted = to_jsonable(payload)
    assert json.loads(json.dumps(converted)) == {
        "a": [0, 1, 2], "b": 1.5, "c": [1, 2], "d": "PLAIN_INPUT", "e": "x/y", "3": {"f": 2}}


def test_csv_keeps_full_precision(tmp_path):
    store = ArtifactStore(tmp_path)
    values = np.array([[1.0 / 3.0, 2e-17], [np.pi, -1e300]])
    store.save_csv("nested/table.csv", values, ["a", "b"])
    loaded, header = store.load_csv("nested/table.csv")
    assert header == ["a", "b"]
    assert_array_equal(loaded, values)
    with pytest.raises(InvalidInputError):
        store.save_csv("bad.csv", values, ["only_one"])
    with pytest.raises(ReportError):
        store.load_csv("missing.csv")


def test_dataset_directory(tmp_path):
    store = ArtifactStore(tmp_path)
    dataset = Dataset(np.arange(6.0).reshape(3, 2) + 1.0, np.arange(3.0), {"model": "toy_enzyme"})
    store.save_dataset("data", dataset, ["kf", "kr"])
    assert (tmp_path / "data" / "inputs.csv").read_text().startswith("kf,kr")
    loaded = store.load_dataset("data")
    assert_array_equal(loaded.inputs, dataset.inputs)
    assert_array_equal(loaded.outputs, dataset.outputs)
    assert loaded.meta == {"model": "toy_enzyme"}


def test_embedding_directory(tmp_path):
    store = ArtifactStore(tmp_path)
    embedding = Embedding(np.array([1.0, 0.5, 0.2]), np.random.default_rng(0).normal(size=(10, 3)), 1,
                          [1, 2], np.array([0.0, 1.0, 0.7]))
    store.save_embedding("emb", embedding, {"epsilon": 0.3})
    loaded = store.load_embedding("emb")
    assert_array_equal(loaded.eigenvectors, embedding.eigenvectors)
    assert loaded.nonharmonic_indices == [1, 2]
    assert_allclose(loaded.residuals, embedding.residuals)
    assert store.load_json("emb/selection.json")["epsilon"] == 0.3


def test_bundle_binary_layout(tmp_path):
    store = ArtifactStore(tmp_path)
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "s": np.array(2.0)}
    store.save_bundle("net", arrays, {"layers": 2})
    header = json.loads((tmp_path / "net.json").read_text())
    assert header["dtype"] == "<f8"
    assert header["arrays"]["b"]["offset"] == 6
    assert (tmp_path / "net.bin").stat().st_size == 8 * 8
    loaded, meta = store.load_bundle("net")
    assert meta == {"layers": 2}
    for key, value in arrays.items():
        assert_array_equal(loaded[key], value)


def test_gh_model_round_trip(tmp_path):
    store = ArtifactStore(tmp_path)
    coords = np.random.default_rng(1).uniform(size=(30, 2))
    model = gh_fit(coords, coords[:, 0] - coords[:, 1], epsilon=0.1)
    store.save_gh_model("gh", model, {"targets": ["d"]})
    loaded, meta = store.load_gh_model("gh")
    assert meta["targets"] == ["d"]
    probe = np.array([[0.3, 0.4]])
    assert_allclose(gh_eval(loaded, probe), gh_eval(model, probe))


def test_hashes_and_missing(tmp_path):
    store = ArtifactStore(tmp_path)
    store.save_json("a.json", {"x": 1})
    first = store.sha256("a.json")
    assert first == store.sha256("a.json")
    store.save_json("a.json", {"x": 2})
    assert store.sha256("a.json") != first
    store.save_csv("dir/t.csv", np.ones((2, 2)))
    assert len(store.sha256("dir")) == 64
    assert store.missing(["a.json", "dir", "nope.csv"]) == ["nope.csv"]
