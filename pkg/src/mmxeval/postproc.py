"""Heatmap post-processing: rectification and joint max-normalization.

All metrics consume heatmaps in rectified [0, 1] form. Normalization divides
by the single maximum over all modalities jointly; per-modality scaling would
destroy the modality-importance signal, so it is deliberately not offered.
"""

import numpy as np

from .data import Heatmap

RECTIFY_MODES = ("clip_negative", "absolute")


def rectify(heatmap: Heatmap, mode: str = "clip_negative") -> Heatmap:
    """Map a raw heatmap to non-negative values.

    ``clip_negative`` keeps positive evidence only (x -> max(x, 0));
    ``absolute`` treats magnitude of either sign as importance (x -> |x|).
    """
    if heatmap.rectified:
        raise ValueError("heatmap is already rectified")
    if mode == "clip_negative":
        data = np.maximum(heatmap.data, 0.0)
    elif mode == "absolute":
        data = np.abs(heatmap.data)
    else:
        raise ValueError(f"unknown rectify mode {mode!r} (expected one of {RECTIFY_MODES})")
    return Heatmap(data, rectified=True)


def normalize_joint(heatmap: Heatmap) -> Heatmap:
    """Scale a rectified heatmap by its global maximum over all modalities.

    Preserves every ratio between heatmap values, so modality rankings are
    unchanged. An all-zero heatmap is returned unchanged with the degenerate
    flag set.
    """
    if not heatmap.rectified:
        raise ValueError("heatmap must be rectified before normalization")
    if heatmap.normalized:
        return heatmap
    peak = float(heatmap.data.max()) if heatmap.data.size else 0.0
    if peak <= 0.0:
        return Heatmap(heatmap.data, rectified=True, normalized=True, degenerate=True)
    return Heatmap(heatmap.data / peak, rectified=True, normalized=True)
