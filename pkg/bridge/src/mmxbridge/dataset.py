"""Minimal reader for the engine's dataset manifests (JSON + NPY arrays)."""

import json
from pathlib import Path
from typing import List, Tuple

import numpy as np


def load_cases(manifest_path) -> List[Tuple[str, np.ndarray]]:
    """(case_id, image array) pairs from a dataset manifest, in file order."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = path.parent
    cases = []
    for entry in doc["cases"]:
        image = np.load(base / entry["image"]).astype(np.float32)
        cases.append((str(entry["id"]), image))
    return cases
