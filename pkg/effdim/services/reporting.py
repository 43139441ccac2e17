"""
Report emission service.
Renders the JSON summary, the text table and the plot scripts of a finished
run from jinja2 templates. Plot scripts only read CSV artifacts; the package
itself never imports a plotting library.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from effdim.errors import ReportError
from effdim.services.storage import ArtifactStore

if TYPE_CHECKING:
    from effdim.tasks.stages import RunManifest

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
PLOT_TEMPLATES = {
    "parity": "plot_parity.py.j2",
    "histogram": "plot_histogram.py.j2",
    "scatter": "plot_scatter.py.j2",
}


@dataclass
class PlotSpec:
    """One plot script and the CSV it reads (paths relative to the run directory)."""
    kind: str
    csv: str
    script: str
    title: str
    x: int = 0
    y: int = 1
    group: Optional[int] = None
    color: Optional[int] = None
    xlabel: str = "x"
    ylabel: str = "y"
    colorlabel: str = ""
    loglog: bool = False
    bins: int = 50

    @property
    def output(self) -> str:
        return Path(self.script).with_suffix(".png").name


@dataclass
class CheckResult:
    """A built-in acceptance check; `passed` is None when the run was too small to judge."""
    name: str
    observed: float
    threshold: float
    passed: Optional[bool]
    detail: str = ""

    @property
    def status(self) -> str:
        if self.passed is None:
            return "underpowered"
        return "pass" if self.passed else "FAIL"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["status"] = self.status
        return data


def _fmtvalue(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.4g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmtvalue(v) for v in value) + "]"
    return str(value)


def template_environment() -> Environment:
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), undefined=StrictUndefined,
                      keep_trailing_newline=True)
    env.filters["fmtvalue"] = _fmtvalue
    return env


def render_plot_script(plot: PlotSpec, env: Optional[Environment] = None) -> str:
    if plot.kind not in PLOT_TEMPLATES:
        raise ReportError([f"unknown plot kind {plot.kind!r}"])
    env = env or template_environment()
    return env.get_template(PLOT_TEMPLATES[plot.kind]).render(**asdict(plot), output=plot.output)


def render_text_report(summary: Dict[str, Any], env: Optional[Environment] = None) -> str:
    env = env or template_environment()
    return env.get_template("report.txt.j2").render(**summary)


def emit_report(manifest: "RunManifest", store: Optional[ArtifactStore] = None) -> List[Path]:
    """
    Write report.json, report.txt and one script per plot.

    Args:
        manifest: Finished (or partially finished) run manifest
        store: Store rooted at the run directory; built from the manifest when omitted

    Returns:
        List: Paths of the written report files
    """
    store = store or ArtifactStore(manifest.run_dir)
    missing = store.missing(manifest.artifact_names() + [p.csv for p in manifest.plots])
    if missing:
        logger.error(f"Cannot report run {manifest.run_dir}: {len(missing)} artifacts missing")
        raise ReportError(missing)

    summary = manifest.summary()
    env = template_environment()
    payload = {k: v for k, v in summary.items() if k not in ("metrics", "stages", "plots")}
    payload.update(summary["metrics"])
    payload["stages"] = summary["stages"]
    written = [store.save_json("report.json", payload)]

    text_path = store.path("report.txt")
    text_path.parent.mkdir(parents=True, exist_ok=True)
    text_path.write_text(render_text_report(summary, env), encoding="utf-8")
    written.append(text_path)

    for plot in manifest.plots:
        script = store.path(plot.script)
        script.parent.mkdir(parents=True, exist_ok=True)
        script.write_text(render_plot_script(plot, env), encoding="utf-8")
        written.append(script)
    logger.info(f"Report written to {store.root} ({len(written)} files)")
    return written
