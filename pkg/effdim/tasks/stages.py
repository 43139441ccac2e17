"""
Pipeline stage bookkeeping.
A run keeps an append-only manifest of its stages with artifact hashes,
wall times, check outcomes and the seeds of every random substream.
"""

import logging
import operator
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from effdim.config import ExperimentConfig, get_config
from effdim.services.randomness import derive_seed, make_rng
from effdim.services.reporting import CheckResult, PlotSpec
from effdim.services.storage import ArtifactStore

logger = logging.getLogger(__name__)

_COMPARISONS: Dict[str, Callable[[float, float], bool]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
}


@dataclass
class StageRecord:
    name: str
    status: str = "running"
    wall_time: float = 0.0
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    checks: List[str] = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class RunManifest:
    experiment: str
    seed: int
    run_dir: str
    resolved_config: Dict[str, Any]
    stages: List[StageRecord] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    checks: List[CheckResult] = field(default_factory=list)
    plots: List[PlotSpec] = field(default_factory=list)
    substream_seeds: Dict[str, int] = field(default_factory=dict)
    status: str = "running"
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def append(self, record: StageRecord) -> None:
        self.stages.append(record)

    def artifact_names(self) -> List[str]:
        names: List[str] = []
        for stage in self.stages:
            for name in stage.outputs:
                if name not in names:
                    names.append(name)
        return names

    def failed_checks(self) -> List[CheckResult]:
        return [c for c in self.checks if c.passed is False]

    def summary(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "status": self.status,
            "run_dir": self.run_dir,
            "started_at": self.started_at,
            "metrics": dict(self.metrics),
            "checks": [c.to_dict() for c in self.checks],
            "stages": [asdict(s) for s in self.stages],
            "plots": [asdict(p) for p in self.plots],
            "substream_seeds": dict(self.substream_seeds),
            "artifacts": self.artifact_names(),
        }

    def to_dict(self) -> Dict[str, Any]:
        data = self.summary()
        data["resolved_config"] = self.resolved_config
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        """Rebuild a manifest saved by `RunContext.save_manifest`."""
        checks = [CheckResult(c["name"], c["observed"], c["threshold"], c["passed"], c.get("detail", ""))
                  for c in data.get("checks", [])]
        return cls(
            experiment=data["experiment"],
            seed=int(data["seed"]),
            run_dir=data["run_dir"],
            resolved_config=data.get("resolved_config", {}),
            stages=[StageRecord(**s) for s in data.get("stages", [])],
            metrics=dict(data.get("metrics", {})),
            checks=checks,
            plots=[PlotSpec(**p) for p in data.get("plots", [])],
            substream_seeds=dict(data.get("substream_seeds", {})),
            status=data.get("status", "running"),
            started_at=data.get("started_at", ""),
        )


def load_manifest(run_dir: Path) -> RunManifest:
    manifest = RunManifest.from_dict(ArtifactStore(run_dir).load_json("manifest.json"))
    manifest.run_dir = str(run_dir)
    return manifest


class RunContext:
    """Everything a pipeline needs: config, store, manifest, seeds and checks."""

    def __init__(self, config: ExperimentConfig, run_dir: Optional[Path] = None):
        self.config = config
        root = Path(config.output_dir or get_config()["output_dir"])
        self.run_dir = Path(run_dir) if run_dir is not None else root / f"{config.experiment.value}_seed{config.seed}"
        self.store = ArtifactStore(self.run_dir)
        self.workers = get_config()["workers"]
        self.manifest = RunManifest(config.experiment.value, config.seed, str(self.run_dir),
                                    config.model_dump(mode="json"))

    def seed_for(self, stream: str) -> int:
        """Integer seed of a named substream, recorded on the manifest."""
        value = derive_seed(self.config.seed, stream)
        self.manifest.substream_seeds[stream] = value
        return value

    def rng(self, stream: str) -> np.random.Generator:
        self.seed_for(stream)
        return make_rng(self.config.seed, stream)

    def stage(self, name: str) -> "ExperimentStage":
        return ExperimentStage(name, self)

    def metric(self, name: str, value: Any) -> Any:
        self.manifest.metrics[name] = value
        return value

    def check(self, name: str, observed: float, comparison: str, threshold: float,
              sample_size: Optional[int] = None, detail: str = "") -> CheckResult:
        """
        Record a built-in check.

        Checks on fewer than `checks.min_samples` rows are flagged as
        underpowered instead of judged; disabled checks are recorded the same way.
        """
        checks = self.config.checks
        observed = float(observed)
        if not checks.enabled:
            passed, detail = None, detail or "checks disabled"
        elif sample_size is not None and sample_size < checks.min_samples:
            passed = None
            detail = detail or f"underpowered: {sample_size} < {checks.min_samples} samples"
            logger.warning(f"Check {name} skipped as underpowered ({sample_size} samples)")
        else:
            passed = bool(_COMPARISONS[comparison](observed, threshold)) if np.isfinite(observed) else False
        result = CheckResult(name, observed, float(threshold), passed, detail)
        self.manifest.checks.append(result)
        log = logger.info if passed is not False else logger.warning
        log(f"Check {name}: observed {observed:.4g} {comparison} {threshold:.4g} -> {result.status}")
        return result

    def plot(self, plot: PlotSpec) -> None:
        self.manifest.plots.append(plot)

    def save_manifest(self) -> Path:
        return self.store.save_json("manifest.json", self.manifest.to_dict())


class ExperimentStage:
    """
    One timed pipeline stage used as a context manager.

    Artifacts written inside the block are registered with `output`; the
    record is appended to the manifest on exit, and `on_failure` marks it
    failed before the error propagates.
    """

    def __init__(self, name: str, context: RunContext):
        self.name = name
        self.context = context
        self.record = StageRecord(name)
        self._start = 0.0

    def __enter__(self) -> "ExperimentStage":
        self._start = time.perf_counter()
        logger.info(f"Stage {self.name} started")
        return self

    def input(self, name: str) -> None:
        self.record.inputs[name] = self.context.store.sha256(name)

    def output(self, name: str) -> str:
        self.record.outputs[name] = self.context.store.sha256(name)
        return name

    def on_failure(self, exc: BaseException) -> None:
        """Handle stage failure by recording it on the manifest."""
        logger.error(f"Stage {self.name} failed: {exc}")
        self.record.status = "failed"
        self.record.error = f"{type(exc).__name__}: {exc}"

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.record.wall_time = time.perf_counter() - self._start
        if exc is not None:
            self.on_failure(exc)
        else:
            self.record.status = "ok"
            logger.info(f"Stage {self.name} finished in {self.record.wall_time:.2f} s")
        self.context.manifest.append(self.record)
        return False
