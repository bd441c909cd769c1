import itertools

import numpy as np
import pytest

from mmxeval.metrics import DegenerateWeightsError, MiVector
from mmxeval.shapley import (
    CoalitionTable,
    characteristic_values,
    load_mi_json,
    mi_result_to_json,
    normalize_mi,
    save_mi_json,
    shapley_from_table,
)


def permutation_shapley(table: CoalitionTable) -> np.ndarray:
    """Independent oracle: average marginal contribution over all orderings."""
    m = table.num_modalities
    phi = np.zeros(m)
    perms = list(itertools.permutations(range(m)))
    for perm in perms:
        mask = 0
        for player in perm:
            before = table.value(mask)
            mask |= 1 << player
            phi[player] += table.value(mask) - before
    return phi / len(perms)


def random_table(rng, m=4) -> CoalitionTable:
    return CoalitionTable(m, rng.random(2 ** m))


def test_two_player_hand_example():
    # v(empty)=0.5, v({1})=0.9, v({2})=0.6, v(both)=1.0 -> phi=(0.4, 0.1)
    table = CoalitionTable(2, np.array([0.5, 0.9, 0.6, 1.0]))
    phi = shapley_from_table(table).values
    assert phi == pytest.approx([0.4, 0.1], abs=1e-12)


def test_constant_table_zero_phi(rng):
    table = CoalitionTable(3, np.full(8, 0.7))
    assert shapley_from_table(table).values == pytest.approx(np.zeros(3), abs=0)


def test_matches_permutation_oracle(rng):
    for _ in range(20):
        table = random_table(rng)
        phi = shapley_from_table(table).values
        assert phi == pytest.approx(permutation_shapley(table), abs=1e-12)


def test_efficiency(rng):
    for _ in range(50):
        table = random_table(rng)
        phi = shapley_from_table(table).values
        assert abs(phi.sum() - (table.value(15) - table.value(0))) < 1e-9


def test_dummy_player(rng):
    # modality 2 never changes v
    values = rng.random(8)
    full = np.empty(16)
    for mask in range(16):
        full[mask] = values[(mask & 0b11) | ((mask >> 1) & 0b100)]
    table = CoalitionTable(4, full)
    phi = shapley_from_table(table).values
    assert abs(phi[2]) < 1e-12


def test_symmetry(rng):
    # two modalities interchangeable in every coalition get equal phi
    base = rng.random(4)  # keyed by (count of {0,1} present, membership of 2)
    full = np.empty(8)
    for mask in range(8):
        count01 = (mask & 1) + ((mask >> 1) & 1)
        has2 = (mask >> 2) & 1
        full[mask] = base[count01 + 2 * has2] if count01 < 2 else base[1 + 2 * has2] * 1.5
    table = CoalitionTable(3, full)
    phi = shapley_from_table(table).values
    assert phi[0] == pytest.approx(phi[1], abs=1e-12)


def test_linearity(rng):
    a = random_table(rng)
    b = random_table(rng)
    alpha, beta = 0.3, 1.7
    combo = CoalitionTable(4, alpha * a.values + beta * b.values)
    lhs = shapley_from_table(combo).values
    rhs = alpha * shapley_from_table(a).values + beta * shapley_from_table(b).values
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_permutation_equivariance(rng):
    table = random_table(rng)
    perm = [2, 0, 3, 1]  # new index -> old index
    permuted = np.empty_like(table.values)
    for mask in range(16):
        old_mask = 0
        for new_bit in range(4):
            if mask >> new_bit & 1:
                old_mask |= 1 << perm[new_bit]
        permuted[mask] = table.value(old_mask)
    phi_orig = shapley_from_table(table).values
    phi_perm = shapley_from_table(CoalitionTable(4, permuted)).values
    assert phi_perm == pytest.approx(phi_orig[perm], abs=1e-12)


def test_incomplete_table_rejected():
    with pytest.raises(ValueError, match="entries"):
        CoalitionTable(3, np.ones(7))


def test_normalize_mi_single_positive():
    out = normalize_mi(MiVector(np.array([0.0, 0.5, 0.0, 0.0])))
    assert out.normalized
    assert np.array_equal(out.values, [0.0, 1.0, 0.0, 0.0])


def test_normalize_mi_clips_then_scales():
    out = normalize_mi(MiVector(np.array([0.2, 0.4, -0.1, 0.4])))
    assert out.values == pytest.approx([0.5, 1.0, 0.0, 1.0], abs=1e-12)


def test_normalize_mi_all_zero_rejected():
    with pytest.raises(DegenerateWeightsError):
        normalize_mi(MiVector(np.zeros(4)))


def test_characteristic_values_full_and_empty(small_dataset, t1c_oracle):
    table = characteristic_values(t1c_oracle, small_dataset)
    assert len(table.values) == 16
    # empty coalition: all-zero inputs -> default class 0 -> chance on balanced set
    assert table.value(0) == pytest.approx(0.5)
    from mmxeval.oracle import dataset_accuracy
    assert table.value(15) == pytest.approx(dataset_accuracy(t1c_oracle, small_dataset))


def test_characteristic_values_t1c_only_structure(small_dataset, t1c_oracle):
    table = characteristic_values(t1c_oracle, small_dataset)
    t1c_bit = 1 << 1
    for mask in range(16):
        if mask & t1c_bit:
            assert table.value(mask) == table.value(t1c_bit)
        else:
            assert table.value(mask) == pytest.approx(0.5)
    phi = shapley_from_table(table).values
    assert phi[[0, 2, 3]] == pytest.approx([0.0, 0.0, 0.0], abs=0)
    assert phi[1] == pytest.approx(table.value(15) - 0.5, abs=1e-12)


def test_characteristic_values_feature_region(small_dataset, t1c_oracle):
    table = characteristic_values(t1c_oracle, small_dataset, ablation="feature_region")
    # zeroing only the T1C tumor region leaves the background ellipse: still
    # a valid (round) blob, so excluded-T1C coalitions stay at chance
    assert table.value(0) == pytest.approx(0.5, abs=0.1)
    assert table.ablation == "feature_region"


def test_feature_region_requires_masks(small_dataset, t1c_oracle):
    from dataclasses import replace
    stripped = [replace(c, masks=None) for c in small_dataset.cases]
    from tests.conftest import tiny_manifest
    manifest = tiny_manifest(stripped, modalities=small_dataset.modalities)
    with pytest.raises(ValueError, match="masks"):
        characteristic_values(t1c_oracle, manifest, ablation="feature_region")


def test_parallel_jobs_identical(small_dataset, t1c_oracle):
    t1 = characteristic_values(t1c_oracle, small_dataset, jobs=1)
    t4 = characteristic_values(t1c_oracle, small_dataset, jobs=4)
    assert np.array_equal(t1.values, t4.values)


def test_oracle_failure_reports_partial_table(small_dataset, t1c_oracle):
    from mmxeval.oracle import OracleError

    class FlakyOracle:
        meta = t1c_oracle.meta

        def __init__(self):
            self.calls = 0

        def predict(self, inputs):
            self.calls += 1
            if self.calls > 3:
                raise OracleError("connection lost")
            return t1c_oracle.predict(inputs)

    with pytest.raises(OracleError) as excinfo:
        characteristic_values(FlakyOracle(), small_dataset)
    partial = excinfo.value.partial_values
    assert np.isnan(partial).any()          # never silently filled
    assert np.isfinite(partial).sum() >= 1  # completed coalitions preserved


def test_mi_json_round_trip(tmp_path, rng):
    table = random_table(rng)
    raw = shapley_from_table(table)
    shifted = MiVector(raw.values - raw.values.min() + 0.1)  # ensure positive
    norm = normalize_mi(shifted)
    doc = mi_result_to_json(table, shifted, norm, ("T1", "T1C", "T2", "FLAIR"), "test")
    path = tmp_path / "mi.json"
    save_mi_json(path, doc)
    back = load_mi_json(path)
    assert np.allclose(back["_raw"].values, shifted.values)
    assert np.allclose(back["_normalized"].values, norm.values)
    assert back["modalities"] == ["T1", "T1C", "T2", "FLAIR"]


def test_mi_json_malformed_rejected(tmp_path):
    path = tmp_path / "mi.json"
    path.write_text("{\"phi_raw\": [1, 2]}")
    with pytest.raises(ValueError, match="malformed"):
        load_mi_json(path)
