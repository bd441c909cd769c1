"""Nonparametric tests and agreement coefficients used in result analysis.

Everything here is definitional: rank statistics are computed from first
principles, Mann-Whitney p-values are exact (full enumeration via a counting
recurrence) for small samples, and the Nemenyi critical values come from the
standard studentized-range table (infinite df, divided by sqrt(2)).
"""

import math
from itertools import combinations
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import chi2

EXACT_MWU_LIMIT = 20  # pooled size at or below which the exact p is used


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties replaced by their midrank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sided Mann-Whitney U test.

    Returns (U, p) where U counts pairs won by the first sample (ties count
    half). The p-value is exact (enumeration over all labelings) when the
    pooled size is at most 20, otherwise a tie-corrected normal approximation
    with continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n, m = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u_a = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    mu = n * m / 2.0

    if n + m <= EXACT_MWU_LIMIT:
        p = _exact_mwu_p(ranks, n, u_a)
    else:
        # tie-corrected variance of U
        _, counts = np.unique(pooled, return_counts=True)
        nn = n + m
        tie_term = float(((counts ** 3 - counts)).sum()) / (nn * (nn - 1))
        sigma2 = n * m / 12.0 * ((nn + 1) - tie_term)
        if sigma2 <= 0:
            return u_a, 1.0
        z = (abs(u_a - mu) - 0.5) / math.sqrt(sigma2)
        z = max(z, 0.0)
        p = math.erfc(z / math.sqrt(2.0))
    return u_a, min(1.0, p)


def _exact_mwu_p(ranks: np.ndarray, n: int, u_obs: float) -> float:
    """Exact two-sided p by counting rank-sum multisets of size n.

    Uses a subset-sum recurrence over doubled midranks (integers), which is
    equivalent to enumerating all C(n+m, n) labelings.
    """
    doubled = np.rint(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    # ways[k][s] = number of k-subsets of ranks with doubled-sum s
    ways = [np.zeros(total + 1, dtype=np.float64) for _ in range(n + 1)]
    ways[0][0] = 1.0
    for r in doubled:
        for k in range(min(n, len(doubled)), 0, -1):
            ways[k][r:] += ways[k - 1][:total + 1 - r]
    counts = ways[n]
    n_total = counts.sum()
    offset = n * (n + 1)  # doubled rank sum -> doubled U: 2U = s - n(n+1)
    mu2 = n * (len(ranks) - n)  # doubled mean of U
    dev_obs = abs(2.0 * u_obs - mu2) - 1e-9
    sums = np.arange(total + 1)
    dev = np.abs(sums - offset - mu2)
    return float(counts[dev >= dev_obs].sum() / n_total)


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau-b rank correlation with tie correction.

    Returns NaN when either vector is entirely tied (zero denominator).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    n = x.size
    if n < 2:
        raise ValueError("need at least two observations")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    prod = sx[iu] * sy[iu]
    p_minus_q = float(prod.sum())
    n0 = n * (n - 1) / 2.0
    ties_x = float((sx[iu] == 0).sum())
    ties_y = float((sy[iu] == 0).sum())
    denom = (n0 - ties_x) * (n0 - ties_y)
    if denom <= 0:
        return float("nan")
    return p_minus_q / math.sqrt(denom)


def friedman(scores) -> Tuple[float, float]:
    """Friedman rank test over an (n subjects x k treatments) score matrix.

    Ranks within each subject use midranks for ties. Returns (chi2_F, p)
    with p from the chi-square distribution with k-1 degrees of freedom.
    """
    mat = np.asarray(scores, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2 or mat.shape[1] < 2:
        raise ValueError("need at least 2 subjects and 2 treatments")
    n, k = mat.shape
    ranks = np.vstack([_midranks(row) for row in mat])
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * float((rank_sums ** 2).sum()) - 3.0 * n * (k + 1)
    stat = max(stat, 0.0)
    return stat, float(chi2.sf(stat, k - 1))


# Critical values q_alpha(k) for the Nemenyi test (studentized range at
# infinite df divided by sqrt(2)); k = 2..20. Demsar's widely reproduced table.
_NEMENYI_Q = {
    0.05: (1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320,
           3.030879, 3.101730, 3.163684, 3.218654, 3.268004, 3.312739,
           3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
           3.543799),
    0.10: (1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732,
           2.779884, 2.854606, 2.919889, 2.977768, 3.029694, 3.076733,
           3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
           3.319233),
}


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    """Critical difference of mean ranks for the post-hoc Nemenyi test."""
    if alpha not in _NEMENYI_Q:
        raise ValueError(f"alpha must be one of {sorted(_NEMENYI_Q)}")
    if not (2 <= k <= 20):
        raise ValueError("k outside the embedded table range [2, 20]")
    if n < 1:
        raise ValueError("n must be positive")
    q = _NEMENYI_Q[alpha][k - 2]
    return q * math.sqrt(k * (k + 1) / (6.0 * n))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation; raises on zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float((dx * dx).sum())
    vy = float((dy * dy).sum())
    if vx == 0.0 or vy == 0.0:
        raise ValueError("pearson undefined for zero-variance input")
    return float((dx * dy).sum()) / math.sqrt(vx * vy)


def krippendorff_alpha(ratings, level: str = "nominal") -> float:
    """Krippendorff's alpha from a (raters x items) matrix with missing data.

    Missing entries are None or NaN. ``level`` selects the difference
    function: nominal (0/1 disagreement) or interval (squared difference).
    Computed via the coincidence-matrix formulation: alpha = 1 - D_o / D_e.
    """
    if level not in ("nominal", "interval"):
        raise ValueError("level must be 'nominal' or 'interval'")
    rows = [list(r) for r in ratings]
    if not rows:
        raise ValueError("empty ratings")
    n_items = len(rows[0])
    units = []
    for j in range(n_items):
        vals = []
        for row in rows:
            v = row[j]
            if v is None:
                continue
            fv = float(v)
            if math.isnan(fv):
                continue
            vals.append(fv)
        if len(vals) >= 2:
            units.append(vals)
    if not units:
        raise ValueError("no item has two or more ratings")

    if level == "nominal":
        delta = lambda u, v: 0.0 if u == v else 1.0
    else:
        delta = lambda u, v: (u - v) ** 2

    n_pairable = sum(len(u) for u in units)
    d_obs = 0.0
    for vals in units:
        m = len(vals)
        within = sum(delta(vi, vj) for vi, vj in combinations(vals, 2)) * 2.0
        d_obs += within / (m - 1)
    d_obs /= n_pairable

    all_vals = [v for u in units for v in u]
    d_exp = 0.0
    for i, vi in enumerate(all_vals):
        for vj in all_vals[i + 1:]:
            d_exp += 2.0 * delta(vi, vj)
    d_exp /= n_pairable * (n_pairable - 1)

    if d_exp == 0.0:
        return 1.0
    return 1.0 - d_obs / d_exp


def fleiss_kappa(counts) -> float:
    """Fleiss' kappa from an (items x categories) count table.

    Every item must have the same number of ratings (>= 2). Raises when
    expected agreement is 1 (all ratings in a single category).
    """
    mat = np.asarray(counts, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError("counts must be a 2-D items x categories table")
    row_sums = mat.sum(axis=1)
    r = row_sums[0]
    if r < 2 or not np.all(row_sums == r):
        raise ValueError("every item needs the same rater count >= 2")
    n_items = mat.shape[0]
    p_i = ((mat ** 2).sum(axis=1) - r) / (r * (r - 1))
    p_bar = float(p_i.mean())
    p_j = mat.sum(axis=0) / (n_items * r)
    p_e = float((p_j ** 2).sum())
    if p_e >= 1.0:
        raise ValueError("expected agreement is 1; kappa undefined")
    return (p_bar - p_e) / (1.0 - p_e)
