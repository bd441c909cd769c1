"""Forward-only perturbation explainers producing heatmaps against any oracle.

All methods score the probability of the model's ORIGINAL predicted class,
so explanations describe the decision actually made, right or wrong. Feature
groups never span modalities, which keeps every heatmap modality-specific.
Sampling methods are deterministic given their seed.
"""

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .data import Case, DatasetManifest, Heatmap
from .npyio import write_array
from .oracle import MAX_BATCH, Oracle

METHODS = (
    "occlusion",
    "feature_ablation",
    "shapley_value_sampling",
    "kernel_shap",
    "lime",
    "feature_permutation",
    "uniform",
    "random",
)

BOUNDARY_WEIGHT = 1e6  # finite stand-in for the infinite-weight boundary coalitions


class ExplainerError(ValueError):
    """Unusable explainer configuration or a failed attribution solve."""


@dataclass(frozen=True)
class FeatureGrouping:
    """Partition of the voxels into atomic attribution groups.

    ``group_map`` has the image shape and assigns every voxel a group id in
    [0, num_groups); ids are contiguous and no group spans modalities.
    """

    group_map: np.ndarray
    num_groups: int
    description: str = ""

    def __post_init__(self):
        gm = np.asarray(self.group_map, dtype=np.int32)
        if gm.min(initial=0) < 0 or (gm.size and gm.max() != self.num_groups - 1):
            raise ValueError("group ids must be contiguous from 0")
        gm.flags.writeable = False
        object.__setattr__(self, "group_map", gm)

    def masks(self) -> List[np.ndarray]:
        return [self.group_map == g for g in range(self.num_groups)]


def segment_grid(image_shape: Sequence[int], patch_size: int) -> FeatureGrouping:
    """Axis-aligned grid of patches per modality (edge patches may be smaller)."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    shape = tuple(image_shape)
    m_count, spatial = shape[0], shape[1:]
    cells_per_axis = [math.ceil(d / patch_size) for d in spatial]
    cells_per_modality = int(np.prod(cells_per_axis))
    grids = np.meshgrid(*[np.arange(d) // patch_size for d in spatial], indexing="ij")
    cell_id = np.zeros(spatial, dtype=np.int64)
    for axis_cells, g in zip(np.cumprod([1] + cells_per_axis[::-1][:-1])[::-1], grids):
        cell_id += g * axis_cells
    gm = np.empty(shape, dtype=np.int32)
    for m in range(m_count):
        gm[m] = cell_id + m * cells_per_modality
    return FeatureGrouping(gm, m_count * cells_per_modality,
                           f"{patch_size}-voxel grid per modality")


def segment_mask_background(masks: np.ndarray) -> FeatureGrouping:
    """Two groups per modality: localization mask and background.

    Modalities with an empty mask (or empty background) contribute a single
    group so ids stay contiguous.
    """
    arr = np.asarray(masks)
    gm = np.empty(arr.shape, dtype=np.int32)
    next_id = 0
    for m in range(arr.shape[0]):
        inside = arr[m] > 0
        if inside.any():
            gm[m][inside] = next_id
            next_id += 1
        if (~inside).any():
            gm[m][~inside] = next_id
            next_id += 1
    return FeatureGrouping(gm, next_id, "mask/background split per modality")


@dataclass(frozen=True)
class ExplainerConfig:
    """Hyperparameters shared by the perturbation methods."""

    baseline: float = 0.0
    samples: int = 25
    window: int = 8
    stride: int = 4
    patch_size: int = 8
    grouping: str = "grid"  # grid | mask_background
    kernel_width: float = 0.25
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.window < 1 or self.stride < 1 or self.patch_size < 1:
            raise ValueError("window, stride and patch_size must be >= 1")
        if self.kernel_width <= 0:
            raise ValueError("kernel width must be positive")
        if self.ridge < 0:
            raise ValueError("ridge strength must be non-negative")


def _predicted_class_score(oracle: Oracle, image: np.ndarray):
    probs = oracle.predict([image])[0]
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def _scores(oracle: Oracle, arrays: List[np.ndarray], cls: int) -> np.ndarray:
    """Predicted-class scores for a list of inputs, chunked for memory."""
    out = np.empty(len(arrays), dtype=np.float64)
    for start in range(0, len(arrays), MAX_BATCH):
        chunk = arrays[start:start + MAX_BATCH]
        out[start:start + len(chunk)] = oracle.predict(chunk)[:, cls]
    return out


def _window_starts(dim: int, window: int, stride: int) -> List[int]:
    starts = list(range(0, dim - window + 1, stride))
    last = dim - window
    if starts and starts[-1] != last:
        starts.append(last)  # cover trailing voxels
    return starts or [0]


def occlusion(oracle: Oracle, case: Case, window: int = 8, stride: int = 4,
              baseline: float = 0.0) -> Heatmap:
    """Sliding-window occlusion, one modality at a time.

    Each voxel's attribution is the mean, over windows covering it, of the
    predicted-class score drop when the window is set to the baseline.
    """
    image = case.image.data
    spatial = image.shape[1:]
    if any(window > d for d in spatial):
        raise ExplainerError(f"window {window} exceeds spatial shape {spatial}")
    cls, s0 = _predicted_class_score(oracle, image)
    sums = np.zeros(image.shape, dtype=np.float64)
    counts = np.zeros(image.shape, dtype=np.int64)
    positions = []
    per_axis = [_window_starts(d, window, stride) for d in spatial]
    for m in range(image.shape[0]):
        for corner in np.array(np.meshgrid(*per_axis, indexing="ij")).reshape(len(spatial), -1).T:
            sl = (m,) + tuple(slice(int(c), int(c) + window) for c in corner)
            positions.append(sl)
    for start in range(0, len(positions), MAX_BATCH):
        chunk = positions[start:start + MAX_BATCH]
        arrays = []
        for sl in chunk:
            pert = np.array(image, copy=True)
            pert[sl] = baseline
            arrays.append(pert)
        scores = _scores(oracle, arrays, cls)
        for sl, s in zip(chunk, scores):
            sums[sl] += s0 - s
            counts[sl] += 1
    heat = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return Heatmap(heat)


def feature_ablation(oracle: Oracle, case: Case, grouping: FeatureGrouping,
                     baseline: float = 0.0) -> Heatmap:
    """Score drop from setting one group at a time to the baseline (G+1 calls)."""
    image = case.image.data
    _check_grouping(grouping, image.shape)
    cls, s0 = _predicted_class_score(oracle, image)
    heat = np.zeros(image.shape, dtype=np.float64)
    group_ids = list(range(grouping.num_groups))
    flat_map = grouping.group_map.reshape(-1)
    order = np.argsort(flat_map, kind="stable")
    bounds = np.searchsorted(flat_map[order], np.arange(grouping.num_groups + 1))
    group_indices = [order[bounds[g]:bounds[g + 1]] for g in group_ids]
    for start in range(0, len(group_ids), MAX_BATCH):
        chunk = group_ids[start:start + MAX_BATCH]
        arrays = []
        for g in chunk:
            pert = np.array(image, copy=True)
            pert.reshape(-1)[group_indices[g]] = baseline
            arrays.append(pert)
        scores = _scores(oracle, arrays, cls)
        flat_heat = heat.reshape(-1)
        for g, s in zip(chunk, scores):
            flat_heat[group_indices[g]] = s0 - s
    return Heatmap(heat)


def _check_grouping(grouping: FeatureGrouping, shape) -> None:
    if grouping.group_map.shape != tuple(shape):
        raise ExplainerError(
            f"grouping shape {grouping.group_map.shape} != image shape {tuple(shape)}"
        )


def shapley_value_sampling(oracle: Oracle, case: Case, grouping: FeatureGrouping,
                           samples: int = 25, baseline: float = 0.0,
                           seed: int = 0) -> Heatmap:
    """Monte-Carlo Shapley over groups via random insertion orders.

    Groups are added one by one to an all-baseline input, each credited its
    marginal score change; attributions average over sampled permutations.
    When samples allow at least one full round of all G! permutations, whole
    rounds are used so small games are computed exactly.
    """
    image = case.image.data
    _check_grouping(grouping, image.shape)
    g_count = grouping.num_groups
    cls, _ = _predicted_class_score(oracle, image)
    rng = np.random.default_rng(seed)

    n_fact = math.factorial(g_count) if g_count <= 12 else None
    if n_fact is not None and samples >= n_fact:
        import itertools
        perms = list(itertools.permutations(range(g_count))) * (samples // n_fact)
    else:
        perms = [tuple(rng.permutation(g_count)) for _ in range(samples)]

    group_masks = grouping.masks()
    totals = np.zeros(g_count, dtype=np.float64)
    for perm in perms:
        states = []
        pert = np.full_like(image, baseline, dtype=image.dtype)
        states.append(np.array(pert, copy=True))
        for g in perm:
            pert[group_masks[g]] = image[group_masks[g]]
            states.append(np.array(pert, copy=True))
        scores = _scores(oracle, states, cls)
        marginals = np.diff(scores)
        for g, delta in zip(perm, marginals):
            totals[g] += delta
    totals /= len(perms)
    heat = np.zeros(image.shape, dtype=np.float64)
    for g in range(g_count):
        heat[group_masks[g]] = totals[g]
    return Heatmap(heat)


def _coalition_inputs(image: np.ndarray, group_masks, coalitions: np.ndarray,
                      baseline: float) -> List[np.ndarray]:
    arrays = []
    for z in coalitions:
        pert = np.full_like(image, baseline, dtype=image.dtype)
        for g in np.nonzero(z)[0]:
            pert[group_masks[g]] = image[group_masks[g]]
        arrays.append(pert)
    return arrays


def _weighted_ridge(coalitions: np.ndarray, weights: np.ndarray, scores: np.ndarray,
                    ridge: float) -> np.ndarray:
    """Solve weighted ridge regression of scores on coalition indicators.

    Returns the G group coefficients; the intercept is unpenalized. Raises
    ExplainerError for a singular system rather than regularizing further.
    """
    n, g_count = coalitions.shape
    design = np.column_stack([np.ones(n), coalitions.astype(np.float64)])
    w = weights[:, None]
    a = design.T @ (w * design)
    a += ridge * np.diag([0.0] + [1.0] * g_count)
    b = design.T @ (weights * scores)
    try:
        coef = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise ExplainerError("singular regression system; increase samples or ridge") from None
    return coef[1:]


def _shapley_kernel_weight(g_count: int, size: int) -> float:
    if size == 0 or size == g_count:
        return BOUNDARY_WEIGHT
    return (g_count - 1) / (math.comb(g_count, size) * size * (g_count - size))


def kernel_shap(oracle: Oracle, case: Case, grouping: FeatureGrouping,
                samples: int = 25, baseline: float = 0.0, ridge: float = 1e-6,
                seed: int = 0) -> Heatmap:
    """KernelSHAP over groups: Shapley-kernel-weighted ridge regression.

    The all-zeros and all-ones coalitions are always included with a large
    finite weight. When 2^G fits in the sample budget all coalitions are
    enumerated, which recovers exact group Shapley values on games the linear
    model can represent.
    """
    image = case.image.data
    _check_grouping(grouping, image.shape)
    g_count = grouping.num_groups
    if g_count < 2:
        raise ExplainerError("kernel_shap needs at least 2 groups")
    cls, _ = _predicted_class_score(oracle, image)
    rng = np.random.default_rng(seed)

    if 2 ** g_count <= max(samples, 2):
        coalitions = ((np.arange(2 ** g_count)[:, None] >> np.arange(g_count)) & 1).astype(np.int8)
    else:
        sizes = np.arange(1, g_count)
        size_mass = (g_count - 1) / (sizes * (g_count - sizes))
        size_mass = size_mass / size_mass.sum()
        rows = [np.zeros(g_count, dtype=np.int8), np.ones(g_count, dtype=np.int8)]
        for _ in range(max(samples - 2, 0)):
            k = int(rng.choice(sizes, p=size_mass))
            z = np.zeros(g_count, dtype=np.int8)
            z[rng.choice(g_count, size=k, replace=False)] = 1
            rows.append(z)
        coalitions = np.stack(rows)
    weights = np.array([_shapley_kernel_weight(g_count, int(z.sum())) for z in coalitions])
    group_masks = grouping.masks()
    scores = _scores(oracle, _coalition_inputs(image, group_masks, coalitions, baseline), cls)
    coef = _weighted_ridge(coalitions, weights, scores, ridge)
    heat = np.zeros(image.shape, dtype=np.float64)
    for g in range(g_count):
        heat[group_masks[g]] = coef[g]
    return Heatmap(heat)


def lime(oracle: Oracle, case: Case, grouping: FeatureGrouping,
         samples: int = 25, kernel_width: float = 0.25, ridge: float = 1e-6,
         seed: int = 0, baseline: float = 0.0) -> Heatmap:
    """LIME over groups: proximity-weighted ridge regression on coalitions.

    Proximity weight is exp(-(1 - |z|/G)^2 / width^2), so coalitions close to
    the full input count more. The all-ones coalition is always included.
    """
    image = case.image.data
    _check_grouping(grouping, image.shape)
    g_count = grouping.num_groups
    if g_count < 2:
        raise ExplainerError("lime needs at least 2 groups")
    cls, _ = _predicted_class_score(oracle, image)
    rng = np.random.default_rng(seed)

    if 2 ** g_count <= max(samples, 1):
        coalitions = ((np.arange(2 ** g_count)[:, None] >> np.arange(g_count)) & 1).astype(np.int8)
    else:
        rows = [np.ones(g_count, dtype=np.int8)]
        for _ in range(max(samples - 1, 0)):
            rows.append(rng.integers(0, 2, size=g_count).astype(np.int8))
        coalitions = np.stack(rows)
    distance = 1.0 - coalitions.sum(axis=1) / g_count
    weights = np.exp(-(distance ** 2) / (kernel_width ** 2))
    group_masks = grouping.masks()
    scores = _scores(oracle, _coalition_inputs(image, group_masks, coalitions, baseline), cls)
    coef = _weighted_ridge(coalitions, weights, scores, ridge)
    heat = np.zeros(image.shape, dtype=np.float64)
    for g in range(g_count):
        heat[group_masks[g]] = coef[g]
    return Heatmap(heat)


def feature_permutation(oracle: Oracle, cases: Sequence[Case],
                        grouping: FeatureGrouping, seed: int = 0) -> List[Heatmap]:
    """Permutation importance across a batch of cases.

    For each group, the group's content is shuffled across the batch with one
    seeded permutation; each case's attribution is its predicted-class score
    drop, written uniformly over the group.
    """
    if len(cases) < 2:
        raise ExplainerError("feature_permutation needs a batch of at least 2 cases")
    images = [c.image.data for c in cases]
    for img in images:
        _check_grouping(grouping, img.shape)
    rng = np.random.default_rng(seed)
    base_probs = []
    for start in range(0, len(images), MAX_BATCH):
        base_probs.append(oracle.predict(images[start:start + MAX_BATCH]))
    base_probs = np.concatenate(base_probs)
    classes = np.argmax(base_probs, axis=1)
    s0 = base_probs[np.arange(len(images)), classes]
    heats = [np.zeros(img.shape, dtype=np.float64) for img in images]
    group_masks = grouping.masks()
    for g in range(grouping.num_groups):
        perm = rng.permutation(len(images))
        mask = group_masks[g]
        permuted = []
        for i, src in enumerate(perm):
            pert = np.array(images[i], copy=True)
            pert[mask] = images[src][mask]
            permuted.append(pert)
        scores = np.empty(len(images))
        for start in range(0, len(images), MAX_BATCH):
            chunk = permuted[start:start + MAX_BATCH]
            probs = oracle.predict(chunk)
            scores[start:start + len(chunk)] = probs[np.arange(len(chunk)),
                                                     classes[start:start + len(chunk)]]
        for i in range(len(images)):
            heats[i][mask] = s0[i] - scores[i]
    return [Heatmap(h) for h in heats]


def uniform_heatmap(shape) -> Heatmap:
    """All-ones baseline heatmap (also constant across modalities)."""
    return Heatmap(np.ones(shape, dtype=np.float64))


def random_heatmap(shape, seed: int = 0) -> Heatmap:
    """Uniform-random baseline heatmap."""
    rng = np.random.default_rng(seed)
    return Heatmap(rng.random(shape))


# ---------------------------------------------------------------------------
# dataset-level driver: heatmap files plus a JSON index
# ---------------------------------------------------------------------------

def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from arbitrary string/int parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def heatmap_filename(case_id: str, method: str) -> str:
    return f"{case_id}__{method}.npy"


def _grouping_for(case: Case, config: ExplainerConfig) -> FeatureGrouping:
    if config.grouping == "grid":
        return segment_grid(case.image.data.shape, config.patch_size)
    if config.grouping == "mask_background":
        if case.masks is None:
            raise ExplainerError(f"case {case.id} has no masks for mask_background grouping")
        return segment_mask_background(case.masks.masks)
    raise ExplainerError(f"unknown grouping {config.grouping!r}")


def explain_case(oracle: Oracle, case: Case, method: str,
                 config: ExplainerConfig) -> Heatmap:
    """Run one per-case explainer (everything except feature_permutation)."""
    seed = stable_seed(config.seed, case.id, method)
    if method == "occlusion":
        return occlusion(oracle, case, config.window, config.stride, config.baseline)
    if method == "feature_ablation":
        return feature_ablation(oracle, case, _grouping_for(case, config), config.baseline)
    if method == "shapley_value_sampling":
        return shapley_value_sampling(oracle, case, _grouping_for(case, config),
                                      config.samples, config.baseline, seed)
    if method == "kernel_shap":
        return kernel_shap(oracle, case, _grouping_for(case, config), config.samples,
                           config.baseline, config.ridge, seed)
    if method == "lime":
        return lime(oracle, case, _grouping_for(case, config), config.samples,
                    config.kernel_width, config.ridge, seed, config.baseline)
    if method == "uniform":
        return uniform_heatmap(case.image.data.shape)
    if method == "random":
        return random_heatmap(case.image.data.shape, seed)
    raise ExplainerError(f"unknown method {method!r} (valid: {', '.join(METHODS)})")


def explain_dataset(oracle: Oracle, manifest: DatasetManifest, methods: Sequence[str],
                    config: ExplainerConfig, out_dir, jobs: int = 1,
                    record_timing: bool = True) -> Path:
    """Generate and store heatmaps for every (case, method); returns the index path."""
    for method in methods:
        if method not in METHODS:
            raise ExplainerError(f"unknown method {method!r} (valid: {', '.join(METHODS)})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}

    per_case_methods = [m for m in methods if m != "feature_permutation"]

    def run_case(case: Case):
        results = []
        for method in per_case_methods:
            t0 = time.perf_counter()
            heat = explain_case(oracle, case, method, config)
            seconds = time.perf_counter() - t0 if record_timing else 0.0
            results.append((method, heat, seconds))
        return case.id, results

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            case_results = dict(pool.map(run_case, manifest.cases))
    else:
        case_results = dict(run_case(c) for c in manifest.cases)

    for case in manifest.cases:
        for method, heat, seconds in case_results[case.id]:
            fname = heatmap_filename(case.id, method)
            write_array(out / fname, heat.data)
            entries[(case.id, method)] = {"case": case.id, "method": method,
                                          "file": fname, "seconds": seconds,
                                          "status": "ok"}

    if "feature_permutation" in methods:
        grouping = _grouping_for(manifest.cases[0], config)
        t0 = time.perf_counter()
        heats = feature_permutation(oracle, manifest.cases, grouping,
                                    stable_seed(config.seed, "feature_permutation"))
        total = time.perf_counter() - t0 if record_timing else 0.0
        per_case = total / len(manifest.cases)
        for case, heat in zip(manifest.cases, heats):
            fname = heatmap_filename(case.id, "feature_permutation")
            write_array(out / fname, heat.data)
            entries[(case.id, "feature_permutation")] = {
                "case": case.id, "method": "feature_permutation",
                "file": fname, "seconds": per_case, "status": "ok",
            }

    index = {
        "version": 1,
        "oracle": oracle.meta.name,
        "config": {
            "methods": list(methods),
            "baseline": config.baseline,
            "samples": config.samples,
            "window": config.window,
            "stride": config.stride,
            "patch_size": config.patch_size,
            "grouping": config.grouping,
            "kernel_width": config.kernel_width,
            "ridge": config.ridge,
            "seed": config.seed,
        },
        "entries": [entries[k] for k in sorted(entries)],
    }
    index_path = out / "index.json"
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index_path
