"""Low-level 2-D shape measurements: blur, blob extraction, compactness.

The compactness statistic P^2 / (4*pi*A) is 1 for a perfect disk and grows
with boundary irregularity. The perimeter P comes from marching squares on
the binary blob at level 0.5 (all crossings at cell-edge midpoints), summed
over every contour, so holes and fragments contribute.
"""

import math

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)

# Segment length contributed by each 2x2 marching-squares cell of a binary
# image: single/triple corners cut a diagonal, adjacent pairs a straight
# edge, diagonal pairs (saddles) two diagonals. Length is config-independent.
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


def marching_squares_perimeter(mask: np.ndarray) -> float:
    """Total contour length of a binary 2-D mask at level 0.5."""
    m = np.pad(np.asarray(mask, dtype=np.uint8), 1)
    case = m[:-1, :-1] + 2 * m[:-1, 1:] + 4 * m[1:, :-1] + 8 * m[1:, 1:]
    return float(_MS_LUT[case].sum())


def compactness(mask: np.ndarray) -> float:
    """P^2 / (4*pi*A) roundness statistic of a binary mask; 0 for empty."""
    area = float(np.asarray(mask).sum())
    if area == 0:
        return 0.0
    p = marching_squares_perimeter(mask)
    return p * p / (4.0 * math.pi * area)


BLUR_TRUNCATE = 3.0  # kernel support in sigmas; fixed for reproducibility


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing with zero-padding at the borders (float32 output)."""
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float32), sigma,
                                   mode="constant", truncate=BLUR_TRUNCATE)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected component of a binary mask (the mask itself if single)."""
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count <= 1:
        return np.asarray(mask, dtype=bool)
    sizes = ndimage.sum(mask, labels, range(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def extract_blob(channel: np.ndarray, blur_sigma: float = 1.5, smooth_sigma: float = 1.0):
    """Half-max blob of one image channel, regularized for measurement.

    Pipeline: Gaussian blur -> threshold at half the blurred maximum ->
    keep the largest connected component -> re-smooth the binary outline.
    Returns None when the channel has no positive response.
    """
    blurred = gaussian_blur(channel, blur_sigma)
    peak = float(blurred.max())
    if peak <= 0.0:
        return None
    blob = blurred >= 0.5 * peak
    blob = largest_component(blob)
    if smooth_sigma > 0:
        blob = gaussian_blur(blob.astype(np.float64), smooth_sigma) >= 0.5
    if not blob.any():
        return None
    return blob


def blob_compactness(channel: np.ndarray, blur_sigma: float = 1.5,
                     smooth_sigma: float = 1.0):
    """Compactness of the extracted blob, or None for an empty channel."""
    blob = extract_blob(channel, blur_sigma, smooth_sigma)
    if blob is None:
        return None
    return compactness(blob)
