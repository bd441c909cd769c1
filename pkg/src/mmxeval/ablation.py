"""Faithfulness via gradual feature ablation: accuracy curves and diffAUC.

Voxels are ranked jointly across all modalities (by heatmap value, ties in
fixed linear-index order, or by a seeded random permutation) and zeroed from
the top; dataset accuracy is evaluated on a fraction grid from 0 to 1.
diffAUC is the random-baseline mean AUC minus the method AUC: positive means
the heatmap ablates decision-relevant features faster than chance.
"""

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import DatasetManifest, Heatmap
from .explainers import stable_seed
from .oracle import MAX_BATCH, Oracle


@dataclass(frozen=True)
class AblationCurve:
    """Accuracy as a function of the fraction of ablated voxels."""

    fractions: tuple
    accuracies: tuple
    ordering: str  # "heatmap_desc" or "random:<seed>"

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        ac = tuple(float(a) for a in self.accuracies)
        if len(fr) != len(ac) or len(fr) < 2:
            raise ValueError("curve needs matching fraction/accuracy lists (>= 2 points)")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("fractions must be strictly increasing")
        if fr[0] != 0.0 or fr[-1] != 1.0:
            raise ValueError("fractions must start at 0 and end at 1")
        if any(not (0.0 <= a <= 1.0) for a in ac):
            raise ValueError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "fractions", fr)
        object.__setattr__(self, "accuracies", ac)


def fraction_grid(step: float) -> List[float]:
    if not (0.0 < step <= 0.5):
        raise ValueError("step must be in (0, 0.5]")
    fracs = [0.0]
    k = 1
    while fracs[-1] < 1.0:
        nxt = min(k * step, 1.0)
        if nxt > fracs[-1]:
            fracs.append(nxt)
        k += 1
    return fracs


def _ranking(case_id: str, heatmap: Optional[Heatmap], shape, ordering: str,
             seed: int) -> np.ndarray:
    n = int(np.prod(shape))
    if ordering == "heatmap_desc":
        flat = heatmap.data.reshape(-1)
        # stable sort on negated values: descending by value, ties by index
        return np.argsort(-flat, kind="stable")
    if ordering == "random":
        rng = np.random.default_rng(stable_seed(seed, case_id, "ablation-order"))
        return rng.permutation(n)
    raise ValueError(f"unknown ordering {ordering!r}")


def ablation_curve(oracle: Oracle, dataset: DatasetManifest,
                   heatmaps: Optional[Dict[str, Heatmap]] = None,
                   ordering: str = "heatmap_desc", step: float = 0.05,
                   seed: int = 0) -> AblationCurve:
    """Accuracy-vs-ablation curve over the dataset.

    ``heatmaps`` maps case id to a rectified heatmap and is required for
    heatmap ordering. The first grid point is the un-ablated accuracy; the
    last ablates everything.
    """
    fracs = fraction_grid(step)
    if ordering == "heatmap_desc":
        if heatmaps is None:
            raise ValueError("heatmap ordering requires per-case heatmaps")
        missing = [c.id for c in dataset.cases if c.id not in heatmaps]
        if missing:
            raise ValueError(f"missing heatmaps for cases: {missing[:5]}")
        for c in dataset.cases:
            if not heatmaps[c.id].rectified:
                raise ValueError(f"heatmap for {c.id} is not rectified")
            if heatmaps[c.id].data.shape != c.image.data.shape:
                raise ValueError(f"heatmap/case shape mismatch for {c.id}")

    orders = {
        c.id: _ranking(c.id, None if heatmaps is None else heatmaps.get(c.id),
                       c.image.data.shape, ordering, seed)
        for c in dataset.cases
    }
    labels = np.array([c.label for c in dataset.cases])
    accuracies = []
    for frac in fracs:
        preds = np.empty(len(dataset.cases), dtype=int)
        batch, positions = [], []

        def flush():
            if not batch:
                return
            probs = oracle.predict(batch)
            preds[positions] = np.argmax(probs, axis=1)
            batch.clear()
            positions.clear()

        for pos, case in enumerate(dataset.cases):
            flat = np.array(case.image.data.reshape(-1), copy=True)
            k = int(round(frac * flat.size))
            flat[orders[case.id][:k]] = 0.0
            batch.append(flat.reshape(case.image.data.shape))
            positions.append(pos)
            if len(batch) >= MAX_BATCH:
                flush()
        flush()
        accuracies.append(float((preds == labels).mean()))
    tag = ordering if ordering == "heatmap_desc" else f"random:{seed}"
    return AblationCurve(tuple(fracs), tuple(accuracies), tag)


def auc(curve: AblationCurve) -> float:
    """Trapezoidal area under the accuracy curve over the fraction range."""
    fr = np.asarray(curve.fractions)
    ac = np.asarray(curve.accuracies)
    return float(np.trapezoid(ac, fr) / (fr[-1] - fr[0]))


def diff_auc(method_curve: AblationCurve, random_curves: Sequence[AblationCurve]) -> float:
    """Mean random-baseline AUC minus the method AUC."""
    if not random_curves:
        raise ValueError("need at least one random baseline curve")
    for rc in random_curves:
        if rc.fractions != method_curve.fractions:
            raise ValueError("all curves must share one fraction grid")
    random_mean = float(np.mean([auc(rc) for rc in random_curves]))
    return random_mean - auc(method_curve)


def write_curves_csv(path, curves: Dict[str, AblationCurve]) -> None:
    """Long-format CSV (label, ordering, fraction, accuracy) for plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "ordering", "fraction", "accuracy"])
        for label in sorted(curves):
            curve = curves[label]
            for f, a in zip(curve.fractions, curve.accuracies):
                writer.writerow([label, curve.ordering, repr(f), repr(a)])
