"""Heatmap-vs-ground-truth metrics: estimated MI, MI correlation, MSFI, FP, IoU.

MSFI is the MI-weighted average, over modalities, of the fraction of heatmap
mass lying inside that modality's localization mask; FP is the same fraction
taken jointly over all modalities; IoU compares the binarized heatmap to the
masks. Estimated MI sums positive heatmap values per modality and is compared
to ground-truth MI via Kendall's tau-b.
"""

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .data import FeatureMaskSet, Heatmap
from .stats import kendall_tau_b


class DegenerateWeightsError(ValueError):
    """All modality-importance weights are zero; MSFI is undefined."""


class DegenerateHeatmapError(ValueError):
    """The heatmap has no mass; the requested ratio metric is undefined."""


@dataclass(frozen=True)
class MiVector:
    """Per-modality importance values, optionally normalized into [0, 1]."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("MI vector must be one-dimensional and non-empty")
        if not np.all(np.isfinite(vals)):
            raise ValueError("MI vector contains non-finite values")
        if self.normalized:
            if vals.min() < 0 or vals.max() > 1.0 + 1e-12:
                raise ValueError("normalized MI values must lie in [0, 1]")
            if vals.max() > 0 and abs(vals.max() - 1.0) > 1e-9:
                raise ValueError("normalized MI must have maximum 1")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


def estimated_mi(heatmap: Heatmap) -> MiVector:
    """Per-modality sum of positive heatmap values (unnormalized)."""
    data = heatmap.data
    pos = np.maximum(data, 0.0)
    sums = pos.reshape(data.shape[0], -1).sum(axis=1, dtype=np.float64)
    return MiVector(sums, normalized=False)


def mi_correlation(estimated: MiVector, truth: MiVector) -> float:
    """Kendall tau-b agreement between estimated and ground-truth MI.

    NaN when either vector is entirely tied, e.g. for heatmaps that are not
    modality-specific.
    """
    if len(estimated) != len(truth):
        raise ValueError(f"MI length mismatch: {len(estimated)} vs {len(truth)}")
    return kendall_tau_b(estimated.values, truth.values)


def _check_shapes(heatmap: Heatmap, masks: FeatureMaskSet) -> None:
    if heatmap.data.shape != masks.masks.shape:
        raise ValueError(
            f"heatmap shape {heatmap.data.shape} != mask shape {masks.masks.shape}"
        )


def msfi(heatmap: Heatmap, masks: FeatureMaskSet, phi: MiVector) -> float:
    """Modality-specific feature importance in [0, 1].

    For each modality the in-mask fraction of heatmap mass is weighted by the
    normalized importance phi_m; the weighted sum is divided by sum(phi).
    A modality whose heatmap slice is all zero contributes fraction 0 rather
    than being skipped, penalizing explainers that ignore an important
    modality.
    """
    if not heatmap.rectified:
        raise ValueError("MSFI requires a rectified heatmap")
    _check_shapes(heatmap, masks)
    if len(phi) != heatmap.data.shape[0]:
        raise ValueError(f"phi has {len(phi)} entries for {heatmap.data.shape[0]} modalities")
    weights = phi.values
    weight_sum = float(weights.sum())
    if weight_sum <= 0.0:
        raise DegenerateWeightsError("sum of MI weights is zero; MSFI undefined")
    total = 0.0
    for m in range(heatmap.data.shape[0]):
        w = float(weights[m])
        if w == 0.0:
            continue
        slice_m = heatmap.data[m]
        denom = float(slice_m.sum(dtype=np.float64))
        if denom <= 0.0:
            continue  # zero-mass modality contributes fraction 0
        inside = float(slice_m[masks.masks[m] > 0].sum(dtype=np.float64))
        total += w * (inside / denom)
    return total / weight_sum


def feature_portion(heatmap: Heatmap, masks: FeatureMaskSet) -> float:
    """Fraction of total heatmap mass inside the masks, all modalities jointly."""
    if not heatmap.rectified:
        raise ValueError("FP requires a rectified heatmap")
    _check_shapes(heatmap, masks)
    total = float(heatmap.data.sum(dtype=np.float64))
    if total <= 0.0:
        raise DegenerateHeatmapError("all-zero heatmap; feature portion undefined")
    inside = float(heatmap.data[masks.masks > 0].sum(dtype=np.float64))
    return inside / total


def iou(heatmap: Heatmap, masks: FeatureMaskSet, threshold_fraction: float = 0.5) -> float:
    """Intersection over union of the binarized heatmap and the masks.

    The heatmap is binarized at ``threshold_fraction`` times its per-case
    maximum. An empty union is defined as IoU 0.
    """
    if not (heatmap.rectified and heatmap.normalized):
        raise ValueError("IoU requires a rectified, normalized heatmap")
    _check_shapes(heatmap, masks)
    peak = float(heatmap.data.max()) if heatmap.data.size else 0.0
    binary = heatmap.data >= threshold_fraction * peak if peak > 0 else np.zeros_like(
        heatmap.data, dtype=bool)
    mask = masks.masks > 0
    union = float(np.logical_or(binary, mask).sum())
    if union == 0:
        return 0.0
    inter = float(np.logical_and(binary, mask).sum())
    return inter / union


# ---------------------------------------------------------------------------
# per-case metric records and CSV serialization
# ---------------------------------------------------------------------------

# fixed column order of the metrics CSV
CSV_COLUMNS = ("case_id", "method", "msfi", "mi_correlation", "fp", "iou",
               "seconds", "status", "correct")


@dataclass
class MetricRecord:
    """One row of evaluation results for a (case, method) pair."""

    case_id: str
    method: str
    msfi: float = float("nan")
    mi_correlation: float = float("nan")
    fp: float = float("nan")
    iou: float = float("nan")
    seconds: float = float("nan")
    status: str = "ok"  # ok | missing | degenerate
    correct: Optional[bool] = None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "NaN"
        return repr(value)
    return str(value)


def write_records(path, records: Sequence[MetricRecord]) -> None:
    """Write records as CSV in the documented fixed column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.case_id, r.method, _fmt(r.msfi), _fmt(r.mi_correlation),
                _fmt(r.fp), _fmt(r.iou), _fmt(r.seconds), r.status, _fmt(r.correct),
            ])


def _parse_float(text: str) -> float:
    return float("nan") if text in ("", "NaN") else float(text)


def read_records(path) -> List[MetricRecord]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics CSV header in {path}: {header}")
        records = []
        for row in reader:
            rec = MetricRecord(
                case_id=row[0], method=row[1],
                msfi=_parse_float(row[2]), mi_correlation=_parse_float(row[3]),
                fp=_parse_float(row[4]), iou=_parse_float(row[5]),
                seconds=_parse_float(row[6]), status=row[7],
                correct=None if row[8] == "" else row[8] == "true",
            )
            records.append(rec)
        return records


def nan_mean_std(values: Sequence[float]):
    """(mean, std, nan_count) with NaNs excluded; mean/std NaN when empty."""
    arr = np.asarray(list(values), dtype=np.float64)
    nan_count = int(np.isnan(arr).sum())
    valid = arr[~np.isnan(arr)]
    if valid.size == 0:
        return float("nan"), float("nan"), nan_count
    return float(valid.mean()), float(valid.std()), nan_count
