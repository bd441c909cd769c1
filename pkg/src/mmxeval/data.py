"""Core data model: cases, heatmaps, masks, dataset manifests, and their I/O.

A dataset on disk is one JSON manifest plus sibling NPY arrays referenced by
relative path. The modality axis is always axis 0. Everything is validated
eagerly at load time so downstream code never re-checks shapes.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .npyio import ArrayIOError, read_array, write_array

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
DEFAULT_MODALITIES = ("T1", "T1C", "T2", "FLAIR")


class ManifestError(ValueError):
    """Raised when a manifest or one of its arrays violates an invariant."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MultiModalImage:
    """Dense model input of shape (M, D1, ..., Dk) with k in {2, 3}."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim not in (3, 4):
            raise ValueError(f"image must be (M, D1..Dk) with k in 2..3, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("image needs at least one modality")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def num_modalities(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[1:]


@dataclass(frozen=True)
class Heatmap:
    """Attribution map with the same shape as its image.

    ``rectified`` means all values are non-negative; ``normalized`` means the
    map was scaled into [0, 1] by its joint maximum. ``degenerate`` marks an
    all-zero map that could not be normalized.
    """

    data: np.ndarray
    rectified: bool = False
    normalized: bool = False
    degenerate: bool = False

    def __post_init__(self):
        # float64 in memory: ratio metrics are checked to 1e-12; files stay f4
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim not in (3, 4):
            raise ValueError(f"heatmap must be (M, D1..Dk), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("heatmap contains non-finite values")
        if self.rectified and arr.size and float(arr.min()) < 0:
            raise ValueError("rectified heatmap has negative values")
        if self.normalized and arr.size and float(arr.max()) > 1.0 + 1e-6:
            raise ValueError("normalized heatmap has values above 1")
        object.__setattr__(self, "data", _freeze(arr))

    def modality_slice(self, m: int) -> np.ndarray:
        return self.data[m]


@dataclass(frozen=True)
class FeatureMaskSet:
    """Per-modality binary localization masks, shape (M, D1, ..., Dk)."""

    masks: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.masks)
        if arr.ndim not in (3, 4):
            raise ValueError(f"masks must be (M, D1..Dk), got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("masks must contain only 0 and 1")
        object.__setattr__(self, "masks", _freeze(arr.astype(np.uint8)))

    def modality_mask(self, m: int) -> np.ndarray:
        return self.masks[m]


@dataclass(frozen=True)
class Case:
    """One evaluation case: image, label, and optional masks/prediction."""

    id: str
    image: MultiModalImage
    label: int
    masks: Optional[FeatureMaskSet] = None
    prediction: Optional[int] = None

    def __post_init__(self):
        if self.masks is not None and self.masks.masks.shape != self.image.data.shape:
            raise ValueError(
                f"case {self.id}: mask shape {self.masks.masks.shape} "
                f"!= image shape {self.image.data.shape}"
            )

    @property
    def correct(self) -> Optional[bool]:
        if self.prediction is None:
            return None
        return self.prediction == self.label


@dataclass(frozen=True)
class DatasetManifest:
    """A validated dataset: modality names, class count, and loaded cases."""

    modalities: tuple
    num_classes: int
    cases: tuple
    params: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if len(set(self.modalities)) != len(self.modalities):
            raise ManifestError("modality names must be unique")
        ids = [c.id for c in self.cases]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ManifestError(f"duplicate case ids: {sorted(dup)}")
        for c in self.cases:
            if not (0 <= c.label < self.num_classes):
                raise ManifestError(f"case {c.id}: label {c.label} outside [0, {self.num_classes})")
            if c.image.num_modalities != len(self.modalities):
                raise ManifestError(
                    f"case {c.id}: {c.image.num_modalities} modalities, "
                    f"manifest declares {len(self.modalities)}"
                )

    def modality_index(self, name: str) -> int:
        return self.modalities.index(name)

    @property
    def shape(self) -> tuple:
        return self.cases[0].image.data.shape if self.cases else ()


def write_manifest(manifest: DatasetManifest, out_dir) -> Path:
    """Write arrays and the manifest JSON under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    arrays = out / "arrays"
    arrays.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in manifest.cases:
        image_rel = f"arrays/{case.id}_image.npy"
        write_array(out / image_rel, case.image.data)
        entry = {"id": case.id, "label": int(case.label), "image": image_rel}
        if case.masks is not None:
            masks_rel = f"arrays/{case.id}_masks.npy"
            write_array(out / masks_rel, case.masks.masks)
            entry["masks"] = masks_rel
        if case.prediction is not None:
            entry["prediction"] = int(case.prediction)
            entry["correct"] = bool(case.prediction == case.label)
        entries.append(entry)
    doc = {
        "version": manifest.version,
        "modalities": list(manifest.modalities),
        "num_classes": manifest.num_classes,
        "params": manifest.params,
        "cases": entries,
    }
    path = out / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path) -> DatasetManifest:
    """Load and fully validate a dataset manifest.

    ``path`` may be the manifest file or its directory. All referenced arrays
    are loaded eagerly; every shape/invariant violation is reported with the
    offending case id.
    """
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise ManifestError(f"manifest not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {p}: {exc}") from None
    if not isinstance(doc, dict) or "cases" not in doc:
        raise ManifestError(f"manifest missing 'cases': {p}")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version!r} (expected {MANIFEST_VERSION})")
    base = p.parent
    modalities = tuple(doc.get("modalities", ()))
    num_classes = int(doc.get("num_classes", 0))
    cases = []
    expected_shape = None
    for entry in doc["cases"]:
        cid = entry.get("id")
        if not cid:
            raise ManifestError(f"case entry without id in {p}")
        try:
            image_arr = read_array(base / entry["image"])
        except ArrayIOError as exc:
            raise ManifestError(f"case {cid}: {exc}") from None
        if image_arr.shape[0] != len(modalities):
            raise ManifestError(
                f"case {cid}: image has {image_arr.shape[0]} modalities, "
                f"manifest declares {len(modalities)}"
            )
        if expected_shape is None:
            expected_shape = image_arr.shape
        elif image_arr.shape != expected_shape:
            raise ManifestError(
                f"case {cid}: image shape {image_arr.shape} != dataset shape {expected_shape}"
            )
        masks = None
        if "masks" in entry:
            try:
                mask_arr = read_array(base / entry["masks"])
            except ArrayIOError as exc:
                raise ManifestError(f"case {cid}: {exc}") from None
            if mask_arr.shape != image_arr.shape:
                raise ManifestError(
                    f"case {cid}: mask shape {mask_arr.shape} != image shape {image_arr.shape}"
                )
            try:
                masks = FeatureMaskSet(mask_arr)
            except ValueError as exc:
                raise ManifestError(f"case {cid}: {exc}") from None
        try:
            case = Case(
                id=str(cid),
                image=MultiModalImage(image_arr),
                label=int(entry["label"]),
                masks=masks,
                prediction=entry.get("prediction"),
            )
        except (ValueError, KeyError) as exc:
            raise ManifestError(f"case {cid}: {exc}") from None
        cases.append(case)
    try:
        return DatasetManifest(
            modalities=modalities,
            num_classes=num_classes,
            cases=tuple(cases),
            params=doc.get("params", {}),
            version=version,
        )
    except ManifestError:
        raise
    except ValueError as exc:
        raise ManifestError(str(exc)) from None
