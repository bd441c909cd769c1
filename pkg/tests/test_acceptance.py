"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
The synthetic end-to-end criteria use the default 128-sized generator with
fixed seeds and the builtin T1C shape oracle.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mmxeval.ablation import ablation_curve, diff_auc
from mmxeval.cli import EXIT_OK, main
from mmxeval.data import FeatureMaskSet, Heatmap, write_manifest
from mmxeval.explainers import (
    feature_ablation,
    kernel_shap,
    lime,
    occlusion,
    random_heatmap,
    segment_grid,
    shapley_value_sampling,
    uniform_heatmap,
)
from mmxeval.metrics import (
    MiVector,
    estimated_mi,
    feature_portion,
    mi_correlation,
    msfi,
)
from mmxeval.oracle import LinearOracle, T1cShapeOracle, probe_mi
from mmxeval.postproc import normalize_joint, rectify
from mmxeval.shapley import CoalitionTable, normalize_mi, shapley_from_table
from mmxeval.stats import (
    fleiss_kappa,
    friedman,
    kendall_tau_b,
    krippendorff_alpha,
    mann_whitney_u,
    nemenyi_cd,
)
from mmxeval.synthgen import generate_dataset, generate_probe_sets

SEED = 20240601


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: Shapley exactness on random coalition tables
# ---------------------------------------------------------------------------

def test_criterion_1_shapley_exactness():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        values = rng.random(16)
        table = CoalitionTable(4, values)
        phi = shapley_from_table(table).values

        # efficiency
        worst = max(worst, abs(phi.sum() - (values[15] - values[0])))

        # dummy: rebuild with modality 3 contributing nothing
        dummy_vals = values.copy()
        for mask in range(16):
            if mask & 0b1000:
                dummy_vals[mask] = values[mask & 0b0111]
        phi_dummy = shapley_from_table(CoalitionTable(4, dummy_vals)).values
        worst = max(worst, abs(phi_dummy[3]))

        # symmetry: make modalities 0 and 1 interchangeable
        sym_vals = values.copy()
        for mask in range(16):
            swapped = (mask & 0b1100) | ((mask & 1) << 1) | ((mask >> 1) & 1)
            avg = 0.5 * (values[mask] + values[swapped])
            sym_vals[mask] = avg
        phi_sym = shapley_from_table(CoalitionTable(4, sym_vals)).values
        worst = max(worst, abs(phi_sym[0] - phi_sym[1]))

        # linearity against a second random table
        if trial < 200:
            other = rng.random(16)
            alpha, beta = rng.random(2)
            combo = shapley_from_table(CoalitionTable(4, alpha * values + beta * other)).values
            parts = (alpha * phi
                     + beta * shapley_from_table(CoalitionTable(4, other)).values)
            worst = max(worst, float(np.abs(combo - parts).max()))
    elapsed = time.perf_counter() - t0
    report("criterion 1 (Shapley axioms, 1000 tables)",
           worst < 1e-9 and elapsed < 1.0,
           f"worst deviation {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: ground-truth MI reproduction on the synthetic construction
# ---------------------------------------------------------------------------

def test_criterion_2_ground_truth_mi(tmp_path):
    t0 = time.perf_counter()
    dataset = generate_dataset(200, seed=SEED)
    data_dir = tmp_path / "data"
    write_manifest(dataset, data_dir)
    probe_t1c, probe_flair = generate_probe_sets(200, seed=SEED)
    probes = probe_mi(T1cShapeOracle(), probe_t1c, probe_flair)

    mi_path = tmp_path / "mi.json"
    code = main(["shapley", "--dataset", str(data_dir),
                 "--oracle", "builtin:t1c-shape", "--out", str(mi_path)])
    doc = json.loads(mi_path.read_text())
    phi_norm = doc["phi_normalized"]
    phi_raw = doc["phi_raw"]
    off_t1c = max(abs(phi_raw[m]) for m in (0, 2, 3))
    elapsed = time.perf_counter() - t0
    ok = (code == EXIT_OK
          and probes.acc_t1c >= 0.99
          and probes.acc_flair <= 0.05
          and phi_norm == [0.0, 1.0, 0.0, 0.0]
          and off_t1c <= 0.02
          and elapsed < 120.0)
    report("criterion 2 (ground-truth MI reproduction)", ok,
           f"acc_t1c={probes.acc_t1c:.3f}, acc_flair={probes.acc_flair:.3f}, "
           f"phi_norm={phi_norm}, off-T1C raw max {off_t1c:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: MSFI property suite (10,000 randomized trials)
# ---------------------------------------------------------------------------

def test_criterion_3_msfi_properties():
    rng = np.random.default_rng(SEED + 1)
    t0 = time.perf_counter()
    failures = []

    def rand_inputs(m_count):
        heat = rng.random((m_count, 3, 3)) * rng.uniform(0.1, 10.0)
        mask = (rng.random((m_count, 3, 3)) > rng.random()).astype(np.uint8)
        phi = MiVector(rng.random(m_count) + 1e-9)
        return heat, mask, phi

    for _ in range(2000):  # scale invariance at 1e-12
        heat, mask, phi = rand_inputs(int(rng.integers(1, 5)))
        c = float(rng.uniform(1e-4, 1e4))
        a = msfi(Heatmap(heat, rectified=True), FeatureMaskSet(mask), phi)
        b = msfi(Heatmap(c * heat, rectified=True), FeatureMaskSet(mask), phi)
        if abs(a - b) >= 1e-12:
            failures.append(f"scale invariance: {abs(a - b)}")

    for _ in range(2000):  # range [0, 1]
        heat, mask, phi = rand_inputs(int(rng.integers(1, 5)))
        v = msfi(Heatmap(heat, rectified=True), FeatureMaskSet(mask), phi)
        if not (0.0 <= v <= 1.0):
            failures.append(f"range: {v}")

    for _ in range(2000):  # monotone under mass transfer into the mask
        heat, mask, phi = rand_inputs(2)
        mask[:, 0, 0] = 1
        mask[:, 2, 2] = 0
        before = msfi(Heatmap(heat, rectified=True), FeatureMaskSet(mask), phi)
        moved = heat.copy()
        shift = moved[0, 2, 2] * float(rng.random())
        moved[0, 2, 2] -= shift
        moved[0, 0, 0] += shift
        after = msfi(Heatmap(moved, rectified=True), FeatureMaskSet(mask), phi)
        if after < before - 1e-12:
            failures.append(f"monotonicity: {before} -> {after}")

    for _ in range(2000):  # M=1 equivalence to FP at 1e-12
        heat, mask, _ = rand_inputs(1)
        h = Heatmap(heat, rectified=True)
        m = FeatureMaskSet(mask)
        a = msfi(h, m, MiVector(np.ones(1), normalized=True))
        b = feature_portion(h, m)
        if abs(a - b) >= 1e-12:
            failures.append(f"fp equivalence: {abs(a - b)}")

    for _ in range(2000):  # zero-mass modality contributes exactly 0
        heat, mask, _ = rand_inputs(2)
        heat[1] = 0.0
        mask[0] = 1
        phi = MiVector(np.array([1.0, 1.0]), normalized=True)
        v = msfi(Heatmap(heat, rectified=True), FeatureMaskSet(mask), phi)
        if abs(v - 0.5) >= 1e-12:
            failures.append(f"zero-denominator: {v}")

    elapsed = time.perf_counter() - t0
    report("criterion 3 (MSFI properties, 10000 trials)",
           not failures and elapsed < 10.0,
           f"{len(failures)} failures, {elapsed:.2f}s"
           + (f"; first: {failures[0]}" if failures else ""))


# ---------------------------------------------------------------------------
# criteria 4 and 5 share one synthetic experiment
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic_experiment(tmp_path_factory):
    t0 = time.perf_counter()
    dataset = generate_dataset(100, seed=SEED + 2)
    oracle = T1cShapeOracle()
    phi_raw = MiVector(np.array([0.0, 0.5, 0.0, 0.0]))
    phi_norm = normalize_mi(phi_raw)
    heatmaps = {"occlusion": {}, "feature_ablation": {}}
    for case in dataset.cases:
        heatmaps["occlusion"][case.id] = occlusion(oracle, case, window=8, stride=8)
        grouping = segment_grid(case.image.data.shape, 8)
        heatmaps["feature_ablation"][case.id] = feature_ablation(oracle, case, grouping)
    build_seconds = time.perf_counter() - t0
    return {
        "dataset": dataset,
        "oracle": oracle,
        "phi_raw": phi_raw,
        "phi_norm": phi_norm,
        "heatmaps": heatmaps,
        "build_seconds": build_seconds,
    }


def test_criterion_4_synthetic_end_to_end(synthetic_experiment):
    env = synthetic_experiment
    t0 = time.perf_counter()
    dataset = env["dataset"]
    details = []
    ok = True
    for method in ("occlusion", "feature_ablation"):
        msfis = []
        tau_one = 0
        for case in dataset.cases:
            heat = normalize_joint(rectify(env["heatmaps"][method][case.id]))
            msfis.append(msfi(heat, case.masks, env["phi_norm"]))
            tau = mi_correlation(estimated_mi(heat), env["phi_raw"])
            tau_one += int(tau == 1.0)
        mean_msfi = float(np.mean(msfis))
        tau_rate = tau_one / len(dataset.cases)
        details.append(f"{method}: MSFI {mean_msfi:.3f}, tau=1 on {tau_rate:.0%}")
        ok = ok and mean_msfi >= 0.5 and tau_rate >= 0.80

    # uniform heatmap baseline: MSFI equals the mean mask-area fraction
    uni_msfis = []
    mask_fractions = []
    weights = env["phi_norm"].values
    for case in dataset.cases:
        heat = normalize_joint(rectify(uniform_heatmap(case.image.data.shape)))
        uni_msfis.append(msfi(heat, case.masks, env["phi_norm"]))
        per_mod = case.masks.masks.reshape(4, -1).mean(axis=1)
        mask_fractions.append(float((weights * per_mod).sum() / weights.sum()))
    uni_gap = abs(float(np.mean(uni_msfis)) - float(np.mean(mask_fractions)))
    ok = ok and uni_gap <= 0.05
    details.append(f"uniform MSFI gap {uni_gap:.2e}")

    # modality-constant heatmap: estimated MI ties across modalities -> NaN
    rng = np.random.default_rng(SEED + 3)
    nan_count = 0
    for case in dataset.cases:
        spatial = rng.random(case.image.spatial_shape)
        shared = np.broadcast_to(spatial, case.image.data.shape)
        heat = normalize_joint(rectify(Heatmap(np.array(shared))))
        nan_count += int(math.isnan(mi_correlation(estimated_mi(heat), env["phi_raw"])))
    ok = ok and nan_count == len(dataset.cases)
    details.append(f"modality-constant NaN on {nan_count}/{len(dataset.cases)}")

    elapsed = env["build_seconds"] + (time.perf_counter() - t0)
    ok = ok and elapsed < 600.0
    report("criterion 4 (synthetic end-to-end)", ok,
           "; ".join(details) + f"; {elapsed:.0f}s")


def test_criterion_5_diff_auc(synthetic_experiment):
    env = synthetic_experiment
    t0 = time.perf_counter()
    dataset = env["dataset"]
    oracle = env["oracle"]
    random_curves = [
        ablation_curve(oracle, dataset, ordering="random", step=0.05, seed=SEED + s)
        for s in range(5)
    ]
    occl = {cid: rectify(h) for cid, h in env["heatmaps"]["occlusion"].items()}
    occl_curve = ablation_curve(oracle, dataset, occl, step=0.05)
    occl_diff = diff_auc(occl_curve, random_curves)

    random_diffs = []
    for s in range(5):
        heats = {c.id: rectify(random_heatmap(c.image.data.shape, seed=SEED + 50 + s))
                 for c in dataset.cases}
        curve = ablation_curve(oracle, dataset, heats, step=0.05)
        random_diffs.append(diff_auc(curve, random_curves))
    worst_random = max(abs(d) for d in random_diffs)
    all_diffs = random_diffs + [occl_diff]
    in_range = all(-1.0 <= d <= 1.0 for d in all_diffs)
    elapsed = time.perf_counter() - t0
    ok = occl_diff >= 0.1 and worst_random <= 0.05 and in_range and elapsed < 600.0
    report("criterion 5 (diffAUC sanity)", ok,
           f"occlusion diffAUC {occl_diff:.3f}, random-heatmap |diffAUC| max "
           f"{worst_random:.3f}, range ok {in_range}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: explainer oracle-equivalence on the builtin linear oracle
# ---------------------------------------------------------------------------

def test_criterion_6_linear_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED + 4)

    def linear_setup(g_count):
        shape = (g_count, 4, 4)
        weights = rng.uniform(0.0, 1.0, shape)
        image = rng.uniform(0.0, 1.0, shape).astype(np.float32)
        weights *= 0.25 / float((weights * image.astype(np.float64)).sum())
        oracle = LinearOracle(weights, bias=0.5, link="identity")
        grouping = segment_grid(shape, 4)  # one group per modality axis entry
        contrib = np.array([
            (weights * image.astype(np.float64))[grouping.group_map == g].sum()
            for g in range(grouping.num_groups)
        ])
        from tests.conftest import tiny_case
        return oracle, tiny_case(image), grouping, contrib

    details = []

    oracle, case, grouping, contrib = linear_setup(16)
    heat = feature_ablation(oracle, case, grouping)
    fa_err = max(abs(heat.data[grouping.group_map == g][0] - contrib[g])
                 for g in range(16))
    details.append(f"feature_ablation err {fa_err:.2e}")

    heat = shapley_value_sampling(oracle, case, grouping, samples=64, seed=SEED)
    svs_err = max(abs(heat.data[grouping.group_map == g][0] - contrib[g])
                  for g in range(16))
    details.append(f"svs err {svs_err:.2e}")

    heat = lime(oracle, case, grouping, samples=256, kernel_width=0.25,
                ridge=1e-10, seed=SEED)
    lime_err = max(abs(heat.data[grouping.group_map == g][0] - contrib[g])
                   for g in range(16))
    details.append(f"lime err {lime_err:.2e}")

    # kernel SHAP with exhaustive coalitions, checked against full enumeration
    oracle10, case10, grouping10, contrib10 = linear_setup(10)
    heat = kernel_shap(oracle10, case10, grouping10, samples=1024, ridge=1e-12,
                       seed=SEED)
    game = np.empty(1024)
    image10 = case10.image.data
    for mask_bits in range(1024):
        x = np.array(image10, copy=True)
        for g in range(10):
            if not mask_bits >> g & 1:
                x[grouping10.group_map == g] = 0.0
        game[mask_bits] = oracle10.predict([x])[0, 1]
    exact = shapley_from_table(CoalitionTable(10, game)).values
    ks_err = max(abs(heat.data[grouping10.group_map == g][0] - exact[g])
                 for g in range(10))
    details.append(f"kernel_shap err {ks_err:.2e}")

    elapsed = time.perf_counter() - t0
    ok = (fa_err < 1e-6 and svs_err <= 0.01 and ks_err < 1e-6
          and lime_err <= 0.05 and elapsed < 60.0)
    report("criterion 6 (linear-oracle equivalence)", ok,
           "; ".join(details) + f"; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 7: statistics hand values
# ---------------------------------------------------------------------------

def test_criterion_7_statistics():
    checks = []
    u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
    checks.append(("MWU exact p", abs(p - 0.1) < 1e-12))
    checks.append(("tau identical", abs(kendall_tau_b([1, 2, 3, 4], [5, 6, 7, 8]) - 1.0) < 1e-12))
    checks.append(("tau reversed", abs(kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]) + 1.0) < 1e-12))
    checks.append(("tau hand", abs(kendall_tau_b([1, 2, 3, 4], [2, 1, 3, 4]) - 2.0 / 3.0) < 1e-4))
    stat, _ = friedman([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    checks.append(("friedman", abs(stat - 4.0) < 1e-12))
    checks.append(("nemenyi", abs(nemenyi_cd(3, 2) - 2.343) < 1e-3))
    checks.append(("alpha perfect", krippendorff_alpha([[1, 2, 3], [1, 2, 3]], "interval") == 1.0))
    checks.append(("kappa perfect", abs(fleiss_kappa([[2, 0], [0, 2]]) - 1.0) < 1e-12))
    # definitional hand computations on fixed small tables, at 1e-9
    alpha = krippendorff_alpha([[1, 2, 3], [1, 3, 3]], level="interval")
    checks.append(("alpha hand table", abs(alpha - 24.0 / 29.0) < 1e-9))
    kappa = fleiss_kappa([[2, 0], [1, 1], [0, 2]])
    checks.append(("kappa hand table", abs(kappa - 1.0 / 3.0) < 1e-9))
    bad = [name for name, ok in checks if not ok]
    report("criterion 7 (statistics hand values)", not bad,
           f"{len(checks) - len(bad)}/{len(checks)} checks" +
           (f"; failing: {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# criterion 8: end-to-end determinism
# ---------------------------------------------------------------------------

def run_pipeline(root: Path, jobs: int) -> dict:
    data = root / "data"
    assert main(["synth", "--n", "8", "--seed", str(SEED), "--size", "64",
                 "--out", str(data)]) == EXIT_OK
    assert main(["shapley", "--dataset", str(data), "--oracle", "builtin:t1c-shape",
                 "--jobs", str(jobs), "--out", str(root / "mi.json")]) == EXIT_OK
    assert main(["explain", "--dataset", str(data), "--oracle", "builtin:t1c-shape",
                 "--methods", "feature_ablation,random,uniform", "--patch", "16",
                 "--seed", "11", "--jobs", str(jobs), "--no-timing",
                 "--out", str(root / "heat")]) == EXIT_OK
    assert main(["eval", "--dataset", str(data), "--heatmaps", str(root / "heat"),
                 "--mi", str(root / "mi.json"), "--oracle", "builtin:t1c-shape",
                 "--jobs", str(jobs), "--out", str(root / "metrics.csv")]) == EXIT_OK
    assert main(["ablate", "--dataset", str(data), "--heatmaps", str(root / "heat"),
                 "--oracle", "builtin:t1c-shape", "--methods", "feature_ablation,random",
                 "--step", "0.25", "--baseline-seeds", "2", "--seed", "4",
                 "--out-curves", str(root / "curves.csv"),
                 "--out-diff", str(root / "diff.json")]) == EXIT_OK
    assert main(["report", "--metrics", str(root / "metrics.csv"),
                 "--diff", str(root / "diff.json"), "--out", str(root / "report.md"),
                 "--out-csv", str(root / "aggregate.csv")]) == EXIT_OK
    digest = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest[str(path.relative_to(root))] = path.read_bytes()
    return digest


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    runs = {
        "run1-jobs1": run_pipeline(tmp_path / "r1", jobs=1),
        "run2-jobs1": run_pipeline(tmp_path / "r2", jobs=1),
        "run3-jobs8": run_pipeline(tmp_path / "r3", jobs=8),
    }
    baseline = runs["run1-jobs1"]
    mismatches = []
    for name, digest in runs.items():
        if set(digest) != set(baseline):
            mismatches.append(f"{name}: file set differs")
            continue
        for rel, blob in baseline.items():
            if digest[rel] != blob:
                mismatches.append(f"{name}: {rel}")
    elapsed = time.perf_counter() - t0
    report("criterion 8 (byte-identical pipeline)", not mismatches,
           f"{len(baseline)} files compared across reruns and jobs 1 vs 8, "
           f"{elapsed:.0f}s" + (f"; mismatches: {mismatches[:4]}" if mismatches else ""))
