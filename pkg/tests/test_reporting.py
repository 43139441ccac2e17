import json

import numpy as np
import pytest

from effdim.config import parse_experiment_config
from effdim.errors import ReportError
from effdim.services.reporting import CheckResult, PlotSpec, emit_report, render_plot_script, render_text_report
from effdim.tasks.stages import RunContext


@pytest.fixture
def finished_run(tmp_path):
    ctx = RunContext(parse_experiment_config({"experiment": "spiral_jsf", "seed": 2}), tmp_path / "run")
    with ctx.stage("sample") as stage:
        ctx.store.save_csv("points.csv", np.random.default_rng(0).uniform(size=(20, 3)), ["x", "y", "c"])
        stage.output("points.csv")
        ctx.metric("spread", 0.25)
        ctx.metric("per_output", [0.1, 0.2])
        ctx.check("spread", 0.25, "<", 1.0)
        ctx.check("tiny_run", 0.5, ">", 0.9, sample_size=20)
        ctx.plot(PlotSpec("scatter", "points.csv", "plots/points.py", "points", color=2, colorlabel="c"))
        ctx.seed_for("spiral")
    ctx.manifest.status = "ok"
    return ctx


def test_check_status_labels():
    assert CheckResult("a", 1.0, 2.0, True).status == "pass"
    assert CheckResult("a", 1.0, 2.0, False).status == "FAIL"
    assert CheckResult("a", 1.0, 2.0, None).status == "underpowered"
    assert CheckResult("a", 1.0, 2.0, None).to_dict()["status"] == "underpowered"


@pytest.mark.parametrize("kind", ["scatter", "parity", "histogram"])
def test_plot_scripts_are_valid_python(kind):
    plot = PlotSpec(kind, "data/table.csv", "plots/table.py", "a title", loglog=True)
    source = render_plot_script(plot)
    compile(source, "table.py", "exec")
    assert "data/table.csv" in source
    assert plot.output == "table.png"


def test_unknown_plot_kind():
    with pytest.raises(ReportError):
        render_plot_script(PlotSpec("pie", "a.csv", "a.py", "pie"))


def test_emit_report_writes_all_files(finished_run):
    written = emit_report(finished_run.manifest)
    names = sorted(p.name for p in written)
    assert names == ["points.py", "report.json", "report.txt"]

    report = json.loads((finished_run.run_dir / "report.json").read_text())
    assert report["experiment"] == "spiral_jsf"
    assert report["spread"] == 0.25
    assert report["per_output"] == [0.1, 0.2]
    assert [c["status"] for c in report["checks"]] == ["pass", "underpowered"]
    assert "spiral" in report["substream_seeds"]

    text = (finished_run.run_dir / "report.txt").read_text()
    assert "spiral_jsf" in text
    assert "underpowered" in text
    assert "plots/points.py  <- points.csv" in text


def test_emit_report_refuses_missing_artifacts(finished_run):
    (finished_run.run_dir / "points.csv").unlink()
    with pytest.raises(ReportError) as info:
        emit_report(finished_run.manifest)
    assert "points.csv" in info.value.missing


def test_text_report_without_checks():
    summary = {"experiment": "toy_jsf", "seed": 0, "status": "ok", "run_dir": "r", "metrics": {},
               "checks": [], "stages": [], "substream_seeds": {}, "plots": []}
    text = render_text_report(summary)
    assert text.count("(none)") == 2
