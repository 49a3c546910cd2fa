"""
Run artifacts on disk: versioned JSON map files, the surrogate registry
directory, and CSV tables with "# key: value" manifest header lines.
"""

import hashlib
import json
import logging
import os
import threading
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import MAP_FORMAT_VERSION, REGISTRY_FORMAT_VERSION, SAMPLES_FORMAT_VERSION
from app.sbi import JointSampleSet, SurrogateLikelihood
from app.transport import TriangularMap

logger = logging.getLogger(__name__)

MAP_FORMAT = "seqtm-map"
SURROGATE_FORMAT = "seqtm-surrogate"
MANIFEST_FILE = "manifest.json"


def get_file_hash(file_path: str) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_json(path: str, data: dict):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _check_format(data: dict, fmt: str, version: int, path: str):
    if data.get("format") != fmt:
        raise ValueError(f"{path} is not a {fmt} file")
    if data.get("version") != version:
        raise ValueError(f"{path} has format version {data.get('version')}, expected {version}")


# ----------------------------------------------------------------------
# Maps
# ----------------------------------------------------------------------

def save_map(tmap: TriangularMap, path: str):
    """Write a map; floats go through repr so reading back is bit-exact."""
    write_json(path, {"format": MAP_FORMAT, "version": MAP_FORMAT_VERSION, **tmap.to_dict()})


def load_map(path: str) -> TriangularMap:
    data = read_json(path)
    _check_format(data, MAP_FORMAT, MAP_FORMAT_VERSION, path)
    return TriangularMap.from_dict(data)


def save_surrogate(sur: SurrogateLikelihood, path: str):
    write_json(path, {"format": SURROGATE_FORMAT, "version": MAP_FORMAT_VERSION, **sur.to_dict()})


def load_surrogate(path: str) -> SurrogateLikelihood:
    data = read_json(path)
    _check_format(data, SURROGATE_FORMAT, MAP_FORMAT_VERSION, path)
    return SurrogateLikelihood.from_dict(data)


# ----------------------------------------------------------------------
# Surrogate registry
# ----------------------------------------------------------------------

class SurrogateRegistry:
    """Directory of per-step surrogate files plus a manifest.

    manifest.json lists every step with its file name and hash, and the
    steps whose training failed with the error message.
    """

    def __init__(self, directory: str):
        self.directory = directory
        self._lock = threading.Lock()
        self._ensure_directory()

    def _ensure_directory(self):
        os.makedirs(self.directory, exist_ok=True)

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.directory, MANIFEST_FILE)

    @staticmethod
    def step_file(t: int) -> str:
        return f"step_{t:03d}.json"

    def _load_manifest(self) -> Dict:
        if not os.path.exists(self.manifest_path):
            return {"format": "seqtm-registry", "version": REGISTRY_FORMAT_VERSION, "steps": {}, "failed": {}}
        data = read_json(self.manifest_path)
        _check_format(data, "seqtm-registry", REGISTRY_FORMAT_VERSION, self.manifest_path)
        return data

    def _save_manifest(self, data: Dict):
        data["last_updated"] = datetime.utcnow().isoformat()
        write_json(self.manifest_path, data)

    def add(self, sur: SurrogateLikelihood, info: Optional[Dict] = None):
        path = os.path.join(self.directory, self.step_file(sur.t))
        save_surrogate(sur, path)
        with self._lock:
            manifest = self._load_manifest()
            manifest["steps"][str(sur.t)] = {
                "file": self.step_file(sur.t),
                "sha256": get_file_hash(path),
                "n_terms": sur.map.n_terms,
                **(info or {}),
            }
            manifest["failed"].pop(str(sur.t), None)
            self._save_manifest(manifest)
        logger.info(f"Registered surrogate for step {sur.t} in {self.directory}")

    def mark_failed(self, t: int, message: str):
        with self._lock:
            manifest = self._load_manifest()
            manifest["failed"][str(t)] = message
            self._save_manifest(manifest)

    def steps(self) -> List[int]:
        return sorted(int(t) for t in self._load_manifest()["steps"])

    def failed(self) -> Dict[int, str]:
        return {int(t): msg for t, msg in self._load_manifest()["failed"].items()}

    def load(self, t: int) -> SurrogateLikelihood:
        entry = self._load_manifest()["steps"].get(str(t))
        if entry is None:
            raise KeyError(f"missing surrogate for step {t}")
        path = os.path.join(self.directory, entry["file"])
        if get_file_hash(path) != entry["sha256"]:
            raise ValueError(f"surrogate file for step {t} does not match its manifest hash")
        return load_surrogate(path)

    def load_all(self, steps: Optional[List[int]] = None) -> Dict[int, SurrogateLikelihood]:
        return {t: self.load(t) for t in (steps if steps is not None else self.steps())}


# ----------------------------------------------------------------------
# CSV tables
# ----------------------------------------------------------------------

def write_csv(frame: pd.DataFrame, path: str, manifest: Optional[Dict] = None):
    """CSV with optional leading "# key: value" lines."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in (manifest or {}).items():
            f.write(f"# {key}: {json.dumps(value)}\n")
        frame.to_csv(f, index=False, float_format="%.17g")


def read_csv(path: str) -> Tuple[pd.DataFrame, Dict]:
    manifest = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(":")
            manifest[key.strip()] = json.loads(value.strip())
    frame = pd.read_csv(path, comment="#")
    return frame, manifest


def write_samples(samples: JointSampleSet, path: str):
    columns = [f"theta{i}" for i in range(samples.n_theta)] + [f"y{i}" for i in range(samples.n_y)]
    frame = pd.DataFrame(samples.joint, columns=columns)
    manifest = {
        "format": "seqtm-samples",
        "version": SAMPLES_FORMAT_VERSION,
        "n_theta": samples.n_theta,
        "n_y": samples.n_y,
        "step": samples.t,
        "seed": samples.seed,
        "model_id": samples.model_id,
        "skipped": samples.skipped,
    }
    write_csv(frame, path, manifest)


def read_samples(path: str) -> JointSampleSet:
    frame, manifest = read_csv(path)
    if manifest.get("format") != "seqtm-samples" or manifest.get("version") != SAMPLES_FORMAT_VERSION:
        raise ValueError(f"{path} is not a version {SAMPLES_FORMAT_VERSION} sample file")
    n_theta = int(manifest["n_theta"])
    values = frame.to_numpy(dtype=float)
    return JointSampleSet(values[:, :n_theta], values[:, n_theta:], int(manifest["step"]),
                          skipped=int(manifest.get("skipped", 0)), seed=manifest.get("seed"),
                          model_id=manifest.get("model_id", ""))


def write_observations(observations: np.ndarray, path: str, manifest: Optional[Dict] = None):
    observations = np.asarray(observations, dtype=float)
    if observations.ndim == 1:
        observations = observations[:, None]
    frame = pd.DataFrame(observations, columns=[f"y{i}" for i in range(observations.shape[1])])
    frame.insert(0, "step", np.arange(1, observations.shape[0] + 1))
    write_csv(frame, path, manifest)


def read_observations(path: str) -> Tuple[np.ndarray, Dict]:
    frame, manifest = read_csv(path)
    values = frame.drop(columns=["step"]).to_numpy(dtype=float)
    n_y = int(manifest.get("n_y", values.shape[1] if values.ndim == 2 and values.shape[1] else 1))
    return values.reshape(-1, n_y), manifest
