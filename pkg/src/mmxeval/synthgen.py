"""Procedural multi-modal tumor dataset with controllable ground truth.

Each case carries four modality channels over a 2-D grid. Class 0 tumors are
round, class 1 tumors irregular (radially perturbed disks). The T1C channel's
tumor shape always matches the label; FLAIR matches with probability
``p_flair``; T1 and T2 get shapes drawn at random, so only T1C and FLAIR can
carry class signal. Tumors sit on a smooth noisy brain-like ellipse unless
``tumor_only`` is set. Every tumor has a bright core dot at its center, which
keeps the half-max blob of an unperturbed channel equal to the tumor region.

All randomness derives from (seed, case index), so generation is
deterministic and order-independent.
"""

from typing import Tuple

import numpy as np

from .data import (
    Case,
    DEFAULT_MODALITIES,
    DatasetManifest,
    FeatureMaskSet,
    MultiModalImage,
)

DEFAULT_SIZE = 128
DEFAULT_P_FLAIR = 0.7

RADIUS_RANGE = (0.08, 0.15)      # tumor radius as a fraction of image size
CENTER_RANGE = (0.2, 0.8)        # tumor center inside the central 60%
ROUND_AMP = (0.0, 0.05)          # radial perturbation amplitude, round class
IRREGULAR_AMP = (0.30, 0.60)     # radial perturbation amplitude, irregular
LOBE_RANGE = (5, 9)              # lobes of the irregular perturbation

ELLIPSE_AXES = (0.46, 0.40)      # background ellipse semi-axes / size
BG_BASE = (0.42, 0.44, 0.43, 0.45)  # per-modality background intensity
BG_NOISE_SIGMA = 0.02
TUMOR_PLATEAU = 0.72
CORE_DOT_AMP = 0.55
CORE_DOT_RHO = 2.0

SHAPE_CLASSES = ("round", "irregular")


def _draw_shape(rng: np.random.Generator, shape_class: str, size: int):
    """Rasterize one random star-shaped blob; returns (mask, center)."""
    radius = size * rng.uniform(*RADIUS_RANGE)
    cy = rng.uniform(CENTER_RANGE[0] * size, CENTER_RANGE[1] * size)
    cx = rng.uniform(CENTER_RANGE[0] * size, CENTER_RANGE[1] * size)
    n_lobes = int(rng.integers(LOBE_RANGE[0], LOBE_RANGE[1] + 1))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if shape_class == "round":
        amp = rng.uniform(*ROUND_AMP)
    else:
        amp = rng.uniform(*IRREGULAR_AMP)
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    theta = np.arctan2(dy, dx)
    boundary = radius * (1.0 + amp * np.cos(n_lobes * theta + phase))
    mask = (dy * dy + dx * dx) <= boundary * boundary
    return mask, (cy, cx)


def make_shape(shape_class: str, seed, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Binary tumor mask of the requested class ('round' or 'irregular')."""
    if shape_class not in SHAPE_CLASSES:
        raise ValueError(f"shape_class must be one of {SHAPE_CLASSES}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask, _ = _draw_shape(rng, shape_class, size)
    return mask.astype(np.uint8)


def _render_channel(rng: np.random.Generator, mask: np.ndarray, center,
                    size: int, base: float, tumor_only: bool) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float64)
    if not tumor_only:
        yy, xx = np.mgrid[0:size, 0:size]
        half = size / 2.0
        ell = (((yy - half) / (ELLIPSE_AXES[0] * size)) ** 2
               + ((xx - half) / (ELLIPSE_AXES[1] * size)) ** 2) <= 1.0
        img[ell] = base
        img += rng.normal(0.0, BG_NOISE_SIGMA, img.shape) * ell
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    dot = CORE_DOT_AMP * np.exp(-r2 / (CORE_DOT_RHO ** 2))
    img[mask] = TUMOR_PLATEAU + dot[mask]
    return img


def _modality_shape_classes(rng: np.random.Generator, label: int, p_flair: float,
                            t1c_class=None, flair_class=None):
    """Shape class per modality in (T1, T1C, T2, FLAIR) order.

    The per-modality draw order is fixed so the stream of random numbers is
    identical for every configuration.
    """
    classes = []
    # T1: no class signal
    classes.append(SHAPE_CLASSES[int(rng.integers(0, 2))])
    # T1C: aligned with the label unless overridden (probe construction)
    classes.append(SHAPE_CLASSES[label if t1c_class is None else t1c_class])
    # T2: no class signal
    classes.append(SHAPE_CLASSES[int(rng.integers(0, 2))])
    # FLAIR: aligned with probability p_flair unless overridden
    aligned = bool(rng.random() < p_flair)
    if flair_class is None:
        classes.append(SHAPE_CLASSES[label if aligned else 1 - label])
    else:
        classes.append(SHAPE_CLASSES[flair_class])
    return classes, aligned


def _generate_case(seed: int, index: int, size: int, p_flair: float,
                   tumor_only: bool, t1c_class=None, flair_class=None) -> Case:
    rng = np.random.default_rng((seed, index))
    label = index % 2
    if t1c_class is not None:
        t1c_class = label if t1c_class == "label" else 1 - label
    if flair_class is not None:
        flair_class = label if flair_class == "label" else 1 - label
    classes, _ = _modality_shape_classes(rng, label, p_flair, t1c_class, flair_class)
    channels = []
    masks = []
    for m, shape_class in enumerate(classes):
        mask, center = _draw_shape(rng, shape_class, size)
        channels.append(_render_channel(rng, mask, center, size, BG_BASE[m], tumor_only))
        masks.append(mask.astype(np.uint8))
    image = np.stack(channels).astype(np.float32)
    return Case(
        id=f"case_{index:04d}",
        image=MultiModalImage(image),
        label=label,
        masks=FeatureMaskSet(np.stack(masks)),
    )


def _check_n(n: int) -> None:
    if n < 2 or n % 2 != 0:
        raise ValueError(f"n must be an even number >= 2, got {n}")


def generate_dataset(n: int, seed: int, p_flair: float = DEFAULT_P_FLAIR,
                     size: int = DEFAULT_SIZE, tumor_only: bool = False) -> DatasetManifest:
    """Balanced synthetic dataset of ``n`` cases with per-modality masks."""
    _check_n(n)
    if not (0.0 <= p_flair <= 1.0):
        raise ValueError("p_flair must be within [0, 1]")
    cases = tuple(
        _generate_case(seed, i, size, p_flair, tumor_only) for i in range(n)
    )
    params = {
        "kind": "synthetic",
        "n": n,
        "seed": seed,
        "p_flair": p_flair,
        "size": size,
        "tumor_only": tumor_only,
        "intensities": {
            "background": list(BG_BASE),
            "background_noise_sigma": BG_NOISE_SIGMA,
            "tumor_plateau": TUMOR_PLATEAU,
            "core_dot_amp": CORE_DOT_AMP,
            "core_dot_rho": CORE_DOT_RHO,
        },
    }
    return DatasetManifest(
        modalities=DEFAULT_MODALITIES,
        num_classes=2,
        cases=cases,
        params=params,
    )


def generate_probe_sets(n: int, seed: int,
                        size: int = DEFAULT_SIZE) -> Tuple[DatasetManifest, DatasetManifest]:
    """Tumor-only probe datasets for reading off ground-truth modality importance.

    In the T1C probe the T1C shape always matches the label and FLAIR is
    always flipped; the FLAIR probe reverses the roles. T1/T2 stay random.
    """
    _check_n(n)

    def build(t1c_mode: str, flair_mode: str, tag: str) -> DatasetManifest:
        cases = tuple(
            _generate_case(seed, i, size, 0.5, True, t1c_class=t1c_mode,
                           flair_class=flair_mode)
            for i in range(n)
        )
        params = {
            "kind": f"probe_{tag}",
            "n": n,
            "seed": seed,
            "size": size,
            "tumor_only": True,
        }
        return DatasetManifest(
            modalities=DEFAULT_MODALITIES, num_classes=2, cases=cases, params=params
        )

    probe_t1c = build("label", "flipped", "t1c")
    probe_flair = build("flipped", "label", "flair")
    return probe_t1c, probe_flair
