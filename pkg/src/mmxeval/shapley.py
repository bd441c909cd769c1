"""Ground-truth modality importance via exact Shapley values over coalitions.

The characteristic function v(c) is the oracle's dataset accuracy when only
the modalities in subset c are kept: the others are either zeroed entirely
(whole-modality ablation) or zeroed inside their localization masks only
(feature-region ablation). Shapley values are computed by full enumeration
of the 2^M coalition table, which is cached as JSON between CLI runs.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest
from .metrics import DegenerateWeightsError, MiVector
from .oracle import Oracle, OracleError, dataset_accuracy

MAX_MODALITIES = 20
ABLATION_MODES = ("whole_modality", "feature_region")


@dataclass(frozen=True)
class CoalitionTable:
    """Model performance v(c) for every subset c of modalities (bitmask keys)."""

    num_modalities: int
    values: np.ndarray  # index = bitmask over modalities
    ablation: str = "whole_modality"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if self.num_modalities < 1 or self.num_modalities > MAX_MODALITIES:
            raise ValueError(f"modality count must be in [1, {MAX_MODALITIES}]")
        if vals.shape != (2 ** self.num_modalities,):
            raise ValueError(
                f"coalition table needs {2 ** self.num_modalities} entries, got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("coalition table contains non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def value(self, subset_mask: int) -> float:
        return float(self.values[subset_mask])

    def to_json(self) -> dict:
        return {
            "num_modalities": self.num_modalities,
            "ablation": self.ablation,
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CoalitionTable":
        return cls(
            num_modalities=int(doc["num_modalities"]),
            values=np.asarray(doc["values"], dtype=np.float64),
            ablation=doc.get("ablation", "whole_modality"),
        )


def _ablate_case(case, keep_mask: int, ablation: str) -> np.ndarray:
    arr = np.array(case.image.data, copy=True)
    for m in range(arr.shape[0]):
        if keep_mask >> m & 1:
            continue
        if ablation == "whole_modality":
            arr[m] = 0.0
        else:
            arr[m][case.masks.masks[m] > 0] = 0.0
    return arr


def characteristic_values(oracle: Oracle, dataset: DatasetManifest,
                          ablation: str = "whole_modality",
                          jobs: int = 1) -> CoalitionTable:
    """Oracle accuracy for every modality subset (2^M dataset passes).

    ``feature_region`` ablation zeroes only the masked voxels of excluded
    modalities and requires masks on every case. On oracle failure the error
    carries the partially filled table in ``partial_values``.
    """
    if ablation not in ABLATION_MODES:
        raise ValueError(f"ablation must be one of {ABLATION_MODES}")
    m_count = len(dataset.modalities)
    if m_count > MAX_MODALITIES:
        raise ValueError(f"too many modalities for exact enumeration ({m_count})")
    if ablation == "feature_region":
        missing = [c.id for c in dataset.cases if c.masks is None]
        if missing:
            raise ValueError(
                f"feature_region ablation requires masks on every case; missing for {missing[:5]}"
            )
    n_subsets = 2 ** m_count
    values = np.full(n_subsets, np.nan)

    def eval_subset(mask: int) -> float:
        return dataset_accuracy(
            oracle, dataset, transform=lambda case: _ablate_case(case, mask, ablation)
        )

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(eval_subset, range(n_subsets)))
            values[:] = results
        else:
            for mask in range(n_subsets):
                values[mask] = eval_subset(mask)
    except OracleError as exc:
        err = OracleError(f"oracle failed during coalition evaluation: {exc}")
        err.partial_values = values  # never silently filled
        raise err from exc
    return CoalitionTable(num_modalities=m_count, values=values, ablation=ablation)


def shapley_from_table(table: CoalitionTable) -> MiVector:
    """Exact Shapley value of every modality by full subset enumeration."""
    m_count = table.num_modalities
    full = 2 ** m_count - 1
    fact = [math.factorial(i) for i in range(m_count + 1)]
    phi = np.zeros(m_count)
    for m in range(m_count):
        bit = 1 << m
        total = 0.0
        for subset in range(full + 1):
            if subset & bit:
                continue
            size = bin(subset).count("1")
            weight = fact[size] * fact[m_count - size - 1] / fact[m_count]
            total += weight * (table.value(subset | bit) - table.value(subset))
        phi[m] = total
    return MiVector(phi, normalized=False)


def normalize_mi(phi: MiVector) -> MiVector:
    """Clip negatives to zero and divide by the maximum; max becomes 1."""
    vals = np.maximum(phi.values, 0.0)
    peak = float(vals.max())
    if peak <= 0.0:
        raise DegenerateWeightsError("no positive MI value; cannot normalize")
    return MiVector(vals / peak, normalized=True)


# ---------------------------------------------------------------------------
# JSON cache of the MI ground truth
# ---------------------------------------------------------------------------

def mi_result_to_json(table: CoalitionTable, raw: MiVector, normalized: MiVector,
                      modalities, oracle_name: str) -> dict:
    return {
        "version": 1,
        "oracle": oracle_name,
        "modalities": list(modalities),
        "table": table.to_json(),
        "phi_raw": [float(v) for v in raw.values],
        "phi_normalized": [float(v) for v in normalized.values],
    }


def save_mi_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mi_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "phi_raw" not in doc or "phi_normalized" not in doc:
        raise ValueError(f"malformed MI file: {path}")
    # validate eagerly so downstream code can trust the vectors
    raw = MiVector(np.asarray(doc["phi_raw"], dtype=np.float64))
    normalized = MiVector(np.asarray(doc["phi_normalized"], dtype=np.float64), normalized=True)
    doc["_raw"] = raw
    doc["_normalized"] = normalized
    return doc
