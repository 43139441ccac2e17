"""
CLI router for run reports.
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict

from effdim.cli import CommandRouter, arg
from effdim.services.reporting import emit_report
from effdim.services.storage import ArtifactStore
from effdim.tasks.stages import load_manifest

logger = logging.getLogger(__name__)

router = CommandRouter("report", help="Reports of finished runs", default_verb="emit")


@router.command("emit", arg("--run", required=True, help="Run directory holding manifest.json"))
def emit(args: argparse.Namespace) -> Dict[str, Any]:
    """Re-render report.json, report.txt and the plot scripts of a run."""
    manifest = load_manifest(Path(args.run))
    written = emit_report(manifest)
    return {"run": args.run, "files": [str(p) for p in written]}


@router.command("show", arg("--run", required=True))
def show(args: argparse.Namespace) -> None:
    """Print the text report of a run."""
    store = ArtifactStore(Path(args.run))
    if not store.exists("report.txt"):
        emit_report(load_manifest(Path(args.run)), store)
    print(store.path("report.txt").read_text(encoding="utf-8"))
