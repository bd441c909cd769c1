"""Shape-rule arithmetic for the analytic T1C reference model.

This mirrors the evaluation engine's builtin byte for byte: Gaussian blur in
float32 (kernels truncated at 3 sigma), half-max threshold, largest
8-connected component, outline re-smoothing, and a marching-squares
compactness statistic. Keeping the exact numeric pipeline here lets a served
bridge model reproduce the engine's in-process predictions exactly.
"""

import math
from typing import List, Optional

import numpy as np
from scipy import ndimage

BLUR_TRUNCATE = 3.0
_EIGHT = np.ones((3, 3), dtype=bool)

_MS_LUT = np.zeros(16)
for _case in range(16):
    _tl, _tr = _case & 1, (_case >> 1) & 1
    _bl, _br = (_case >> 2) & 1, (_case >> 3) & 1
    _n = _tl + _tr + _bl + _br
    if _n in (0, 4):
        _len = 0.0
    elif _n in (1, 3):
        _len = math.sqrt(2.0) / 2.0
    elif (_tl and _tr) or (_bl and _br) or (_tl and _bl) or (_tr and _br):
        _len = 1.0
    else:
        _len = math.sqrt(2.0)
    _MS_LUT[_case] = _len


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count <= 1:
        return np.asarray(mask, dtype=bool)
    sizes = ndimage.sum(mask, labels, range(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def batched_blob_compactness(channels: np.ndarray, blur_sigma: float = 1.5,
                             smooth_sigma: float = 1.0) -> List[Optional[float]]:
    """Compactness of the regularized half-max blob per (B, H, W) image."""
    chan = np.asarray(channels, dtype=np.float32)
    blurred = ndimage.gaussian_filter(chan, (0, blur_sigma, blur_sigma),
                                      mode="constant", truncate=BLUR_TRUNCATE)
    peaks = blurred.max(axis=(1, 2))
    blobs = np.zeros(chan.shape, dtype=bool)
    alive = peaks > 0
    if alive.any():
        blobs[alive] = blurred[alive] >= 0.5 * peaks[alive, None, None]
        for i in np.nonzero(alive)[0]:
            blobs[i] = largest_component(blobs[i])
        if smooth_sigma > 0:
            blobs = ndimage.gaussian_filter(
                blobs.astype(np.float32), (0, smooth_sigma, smooth_sigma),
                mode="constant", truncate=BLUR_TRUNCATE,
            ) >= 0.5
    padded = np.pad(blobs.astype(np.uint8), ((0, 0), (1, 1), (1, 1)))
    case = (padded[:, :-1, :-1] + 2 * padded[:, :-1, 1:]
            + 4 * padded[:, 1:, :-1] + 8 * padded[:, 1:, 1:])
    perims = _MS_LUT[case].sum(axis=(1, 2))
    areas = blobs.sum(axis=(1, 2)).astype(np.float64)
    out: List[Optional[float]] = []
    for i in range(chan.shape[0]):
        if areas[i] == 0:
            out.append(None)
        else:
            out.append(float(perims[i] ** 2 / (4.0 * math.pi * areas[i])))
    return out
