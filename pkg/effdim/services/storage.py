"""
Artifact storage service.
Reads and writes datasets, embeddings, CSV tables and JSON+binary bundles
under one run directory, and hashes artifacts for run manifests.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from effdim.config import get_config
from effdim.errors import InvalidInputError, ReportError
from effdim.services.dataset_factory import Dataset
from effdim.services.dmaps_core import Embedding
from effdim.services.extension import GHModel

logger = logging.getLogger(__name__)

# Little-endian float64, row-major
BIN_DTYPE = np.dtype("<f8")


def to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value") and hasattr(value, "name"):
        return value.value
    return value


class ArtifactStore:
    """File-backed store rooted at one directory."""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root if root is not None else get_config()["output_dir"])

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def _prepare(self, name: str) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def save_json(self, name: str, payload: Dict[str, Any]) -> Path:
        target = self._prepare(name)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        logger.debug(f"Wrote {target}")
        return target

    def load_json(self, name: str) -> Dict[str, Any]:
        target = self.path(name)
        if not target.exists():
            raise ReportError([str(target)])
        with open(target, "r", encoding="utf-8") as f:
            return json.load(f)

    def save_csv(self, name: str, array: np.ndarray, header: Optional[Sequence[str]] = None) -> Path:
        """Write a 2D array with an optional header row, full float precision."""
        target = self._prepare(name)
        array = np.asarray(array, dtype=float)
        array = array[:, None] if array.ndim == 1 else array
        if header is not None and len(header) != array.shape[1]:
            raise InvalidInputError(f"{len(header)} header names for {array.shape[1]} columns")
        np.savetxt(target, array, delimiter=",", fmt="%.17g",
                   header=",".join(header) if header is not None else "", comments="")
        logger.debug(f"Wrote {target} ({array.shape[0]}x{array.shape[1]})")
        return target

    def load_csv(self, name: str, header: bool = True) -> Tuple[np.ndarray, List[str]]:
        target = self.path(name)
        if not target.exists():
            raise ReportError([str(target)])
        names: List[str] = []
        if header:
            with open(target, "r", encoding="utf-8") as f:
                names = f.readline().strip().split(",")
        data = np.loadtxt(target, delimiter=",", skiprows=1 if header else 0, ndmin=2)
        return data, names

    def save_dataset(self, name: str, dataset: Dataset, input_names: Optional[Sequence[str]] = None,
                     output_names: Optional[Sequence[str]] = None) -> Path:
        """Dataset directory: inputs.csv, outputs.csv, meta.json."""
        in_names = list(input_names) if input_names else [f"p{j}" for j in range(dataset.inputs.shape[1])]
        out_names = list(output_names) if output_names else [f"y{j}" for j in range(dataset.outputs.shape[1])]
        self.save_csv(f"{name}/inputs.csv", dataset.inputs, in_names)
        self.save_csv(f"{name}/outputs.csv", dataset.outputs, out_names)
        self.save_json(f"{name}/meta.json", dataset.meta)
        logger.info(f"Saved dataset {name} with {len(dataset)} rows")
        return self.path(name)

    def load_dataset(self, name: str) -> Dataset:
        inputs, _ = self.load_csv(f"{name}/inputs.csv")
        outputs, _ = self.load_csv(f"{name}/outputs.csv")
        return Dataset(inputs, outputs, self.load_json(f"{name}/meta.json"))

    def save_embedding(self, name: str, embedding: Embedding, extra: Optional[Dict[str, Any]] = None) -> Path:
        """Embedding directory: eigenvalues.csv, eigenvectors.csv, selection.json."""
        self.save_csv(f"{name}/eigenvalues.csv", embedding.eigenvalues, ["lambda"])
        self.save_csv(f"{name}/eigenvectors.csv", embedding.eigenvectors,
                      [f"phi{j}" for j in range(embedding.eigenvectors.shape[1])])
        selection = {
            "alpha": embedding.alpha,
            "nonharmonic_indices": list(embedding.nonharmonic_indices),
            "residuals": embedding.residuals,
        }
        selection.update(extra or {})
        self.save_json(f"{name}/selection.json", selection)
        return self.path(name)

    def load_embedding(self, name: str) -> Embedding:
        values, _ = self.load_csv(f"{name}/eigenvalues.csv")
        vectors, _ = self.load_csv(f"{name}/eigenvectors.csv")
        selection = self.load_json(f"{name}/selection.json")
        return Embedding(values[:, 0], vectors, int(selection["alpha"]),
                         [int(i) for i in selection["nonharmonic_indices"]],
                         np.asarray(selection["residuals"], dtype=float))

    def save_bundle(self, name: str, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
        """
        Write `<name>.json` (metadata plus array offsets and shapes) and
        `<name>.bin` (all arrays back to back as little-endian float64).
        """
        layout = {}
        offset = 0
        blobs = []
        for key, value in arrays.items():
            block = np.ascontiguousarray(np.asarray(value, dtype=BIN_DTYPE))
            layout[key] = {"offset": offset, "shape": list(block.shape)}
            offset += block.size
            blobs.append(block.ravel())
        with open(self._prepare(f"{name}.bin"), "wb") as f:
            for blob in blobs:
                f.write(blob.tobytes())
        self.save_json(f"{name}.json", {"meta": meta or {}, "arrays": layout, "dtype": "<f8", "order": "C"})
        return self.path(f"{name}.json")

    def load_bundle(self, name: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        header = self.load_json(f"{name}.json")
        target = self.path(f"{name}.bin")
        if not target.exists():
            raise ReportError([str(target)])
        flat = np.fromfile(target, dtype=BIN_DTYPE)
        arrays = {}
        for key, info in header["arrays"].items():
            shape = tuple(info["shape"])
            size = int(np.prod(shape)) if shape else 1
            arrays[key] = flat[info["offset"]:info["offset"] + size].reshape(shape).astype(float)
        return arrays, header["meta"]

    def save_gh_model(self, name: str, model: GHModel, extra: Optional[Dict[str, Any]] = None) -> Path:
        meta = {"epsilon": model.epsilon, "delta": model.delta, "normalized": model.normalized}
        meta.update(extra or {})
        arrays = {
            "train_coords": model.train_coords,
            "basis_eigvals": model.basis_eigvals,
            "basis_eigvecs": model.basis_eigvecs,
            "coefficients": model.coefficients,
            "weights": model.weights,
        }
        return self.save_bundle(name, arrays, meta)

    def load_gh_model(self, name: str) -> Tuple[GHModel, Dict[str, Any]]:
        arrays, meta = self.load_bundle(name)
        model = GHModel(arrays["train_coords"], float(meta["epsilon"]), float(meta["delta"]),
                        bool(meta["normalized"]), arrays["basis_eigvals"], arrays["basis_eigvecs"],
                        arrays["coefficients"], arrays["weights"])
        return model, meta

    def sha256(self, name: str) -> str:
        target = self.path(name)
        digest = hashlib.sha256()
        files = sorted(p for p in target.rglob("*") if p.is_file()) if target.is_dir() else [target]
        for file in files:
            with open(file, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    digest.update(chunk)
        return digest.hexdigest()

    def missing(self, names: Sequence[str]) -> List[str]:
        return [n for n in names if not self.exists(n)]
