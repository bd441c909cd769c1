"""Evaluation engine for feature-attribution heatmaps on multi-modal images.

Computes ground-truth modality importance by exact Shapley values over
modality coalitions, scores heatmaps with the MSFI metric family (MSFI,
MI correlation, FP, IoU, diffAUC), generates synthetic multi-modal datasets
with controllable ground truth, produces heatmaps with black-box perturbation
explainers, and provides the statistics used to compare explainers.
"""

from .data import (
    Case,
    DatasetManifest,
    FeatureMaskSet,
    Heatmap,
    ManifestError,
    MultiModalImage,
    load_manifest,
    write_manifest,
)
from .metrics import (
    MetricRecord,
    MiVector,
    estimated_mi,
    feature_portion,
    iou,
    mi_correlation,
    msfi,
)
from .npyio import ArrayIOError, read_array, write_array
from .oracle import (
    DualModalityOracle,
    LinearOracle,
    Oracle,
    OracleError,
    T1cShapeOracle,
    open_oracle,
    probe_mi,
)
from .postproc import normalize_joint, rectify
from .shapley import (
    CoalitionTable,
    characteristic_values,
    normalize_mi,
    shapley_from_table,
)
from .synthgen import generate_dataset, generate_probe_sets, make_shape

__version__ = "0.1.0"

__all__ = [
    "ArrayIOError",
    "Case",
    "CoalitionTable",
    "DatasetManifest",
    "DualModalityOracle",
    "FeatureMaskSet",
    "Heatmap",
    "LinearOracle",
    "ManifestError",
    "MetricRecord",
    "MiVector",
    "MultiModalImage",
    "Oracle",
    "OracleError",
    "T1cShapeOracle",
    "characteristic_values",
    "estimated_mi",
    "feature_portion",
    "generate_dataset",
    "generate_probe_sets",
    "iou",
    "load_manifest",
    "make_shape",
    "mi_correlation",
    "msfi",
    "normalize_joint",
    "normalize_mi",
    "open_oracle",
    "probe_mi",
    "read_array",
    "rectify",
    "shapley_from_table",
    "write_array",
    "write_manifest",
]
