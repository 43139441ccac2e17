import numpy as np
import pytest

from effdim.config import parse_experiment_config
from effdim.errors import NumericError
from effdim.services.randomness import derive_seed, make_rng, stream_key
from effdim.services.reporting import PlotSpec
from effdim.tasks.stages import RunContext, RunManifest, load_manifest


def _context(tmp_path, **overrides):
    data = {"experiment": "toy_jsf", "seed": 9}
    data.update(overrides)
    return RunContext(parse_experiment_config(data), tmp_path / "run")


def test_default_run_directory(tmp_path):
    ctx = RunContext(parse_experiment_config({"experiment": "toy_jsf", "seed": 9}))
    assert ctx.run_dir == tmp_path / "runs" / "toy_jsf_seed9"


def test_named_streams_are_independent_and_recorded(tmp_path):
    ctx = _context(tmp_path)
    a = ctx.rng("alpha").uniform(size=5)
    assert np.array_equal(a, make_rng(9, "alpha").uniform(size=5))
    assert not np.array_equal(a, ctx.rng("beta").uniform(size=5))
    assert ctx.manifest.substream_seeds == {"alpha": derive_seed(9, "alpha"), "beta": derive_seed(9, "beta")}
    assert stream_key("alpha") == stream_key("alpha")
    assert derive_seed(9, "alpha") != derive_seed(10, "alpha")


def test_stage_records_outputs_and_time(tmp_path):
    ctx = _context(tmp_path)
    with ctx.stage("write") as stage:
        ctx.store.save_json("out.json", {"v": 1})
        assert stage.output("out.json") == "out.json"
    record = ctx.manifest.stages[0]
    assert record.status == "ok"
    assert record.wall_time >= 0.0
    assert len(record.outputs["out.json"]) == 64
    assert ctx.manifest.artifact_names() == ["out.json"]


def test_failed_stage_is_recorded_and_reraised(tmp_path):
    ctx = _context(tmp_path)
    with pytest.raises(NumericError):
        with ctx.stage("boom"):
            raise NumericError("eigensolver gave up")
    record = ctx.manifest.stages[0]
    assert record.status == "failed"
    assert record.error == "NumericError: eigensolver gave up"


@pytest.mark.parametrize("comparison,observed,expected", [
    ("<", 0.5, True), ("<", 2.0, False), (">=", 1.0, True), ("==", 3, True), (">", float("nan"), False),
])
def test_check_comparisons(tmp_path, comparison, observed, expected):
    ctx = _context(tmp_path)
    threshold = 3 if comparison == "==" else 1.0
    assert ctx.check("c", observed, comparison, threshold).passed is expected


def test_underpowered_and_disabled_checks(tmp_path):
    ctx = _context(tmp_path, checks={"min_samples": 100})
    assert ctx.check("small", 0.0, ">", 1.0, sample_size=99).passed is None
    assert ctx.check("large", 0.0, ">", 1.0, sample_size=100).passed is False
    assert [c.name for c in ctx.manifest.failed_checks()] == ["large"]

    disabled = _context(tmp_path, checks={"enabled": False})
    result = disabled.check("any", 0.0, ">", 1.0)
    assert result.passed is None
    assert result.detail == "checks disabled"


def test_manifest_round_trip(tmp_path):
    ctx = _context(tmp_path)
    with ctx.stage("write") as stage:
        ctx.store.save_csv("t.csv", np.ones((3, 2)), ["a", "b"])
        stage.output("t.csv")
    ctx.metric("answer", 42)
    ctx.check("answer", 42, "==", 42)
    ctx.plot(PlotSpec("parity", "t.csv", "plots/t.py", "t"))
    ctx.seed_for("split")
    ctx.manifest.status = "ok"
    ctx.save_manifest()

    loaded = load_manifest(ctx.run_dir)
    assert isinstance(loaded, RunManifest)
    assert loaded.summary() == ctx.manifest.summary()
    assert loaded.resolved_config["experiment"] == "toy_jsf"
