"""Aggregate per-case metric records into the summary table.

Produces a markdown table (mean +/- std per method and metric, significance
stars for the correct-vs-incorrect MSFI comparison, NaN counts mirrored as
"NaN" cells) plus a long-format CSV for external plotting. When several
methods share the full case set, a Friedman test over MSFI with the Nemenyi
critical difference is appended.
"""

import csv
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .metrics import MetricRecord, nan_mean_std
from .stats import friedman, mann_whitney_u, nemenyi_cd

STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


def significance_stars(p: float) -> str:
    if math.isnan(p):
        return "-"
    for threshold, stars in STAR_LEVELS:
        if p < threshold:
            return stars
    return "NS"


def _fmt_mean_std(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "NaN"
    return f"{mean:.3f}±{std:.3f}"


def _correctness_stars(records: List[MetricRecord]) -> str:
    correct = [r.msfi for r in records if r.correct is True and not math.isnan(r.msfi)]
    incorrect = [r.msfi for r in records if r.correct is False and not math.isnan(r.msfi)]
    if not correct or not incorrect:
        return "-"
    _, p = mann_whitney_u(correct, incorrect)
    return significance_stars(p)


def aggregate_report(records: Sequence[MetricRecord],
                     diff_aucs: Optional[Dict[str, float]] = None):
    """Per-method aggregate rows, ordered by descending mean MSFI."""
    by_method = defaultdict(list)
    for rec in records:
        by_method[rec.method].append(rec)
    rows = []
    for method, recs in by_method.items():
        ok = [r for r in recs if r.status != "missing"]
        msfi_mean, msfi_std, msfi_nan = nan_mean_std([r.msfi for r in ok])
        mi_mean, mi_std, mi_nan = nan_mean_std([r.mi_correlation for r in ok])
        fp_mean, fp_std, fp_nan = nan_mean_std([r.fp for r in ok])
        iou_mean, iou_std, _ = nan_mean_std([r.iou for r in ok])
        sec_mean, sec_std, _ = nan_mean_std([r.seconds for r in ok])
        rows.append({
            "method": method,
            "cases": len(recs),
            "missing": sum(1 for r in recs if r.status == "missing"),
            "msfi": (msfi_mean, msfi_std, msfi_nan),
            "stars": _correctness_stars(ok),
            "mi_correlation": (mi_mean, mi_std, mi_nan),
            "diff_auc": None if not diff_aucs else diff_aucs.get(method),
            "fp": (fp_mean, fp_std, fp_nan),
            "iou": (iou_mean, iou_std, 0),
            "seconds": (sec_mean, sec_std, 0),
        })
    rows.sort(key=lambda r: (-(r["msfi"][0] if not math.isnan(r["msfi"][0]) else -1.0),
                             r["method"]))
    return rows


def _msfi_matrix(records: Sequence[MetricRecord]):
    """Cases x methods MSFI matrix over cases scored by every method."""
    by_case = defaultdict(dict)
    methods = sorted({r.method for r in records})
    for r in records:
        if r.status != "missing" and not math.isnan(r.msfi):
            by_case[r.case_id][r.method] = r.msfi
    full_rows = [
        [vals[m] for m in methods]
        for _, vals in sorted(by_case.items())
        if all(m in vals for m in methods)
    ]
    return methods, np.asarray(full_rows, dtype=np.float64)


def render_markdown(rows, records: Sequence[MetricRecord]) -> str:
    lines = [
        "# Heatmap evaluation report",
        "",
        "Mean ± std per method; NaN cells are excluded from means and counted"
        " separately. Stat. sig. compares MSFI between correctly and incorrectly"
        " predicted cases (Mann-Whitney U): `*` p<0.05, `**` p<0.01, `***` p<0.001,"
        " `NS` not significant, `-` not testable.",
        "",
        "| Method | MSFI | Stat. Sig. | MI Correlation | diffAUC | FP | IoU | Speed (s) |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for row in rows:
        mi_mean, mi_std, mi_nan = row["mi_correlation"]
        mi_cell = _fmt_mean_std(mi_mean, mi_std)
        if mi_nan and not math.isnan(mi_mean):
            mi_cell += f" ({mi_nan} NaN)"
        diff_cell = "-" if row["diff_auc"] is None else f"{row['diff_auc']:.3f}"
        lines.append(
            "| {method} | {msfi} | {stars} | {mi} | {diff} | {fp} | {iou} | {sec} |".format(
                method=row["method"],
                msfi=_fmt_mean_std(*row["msfi"][:2]),
                stars=row["stars"],
                mi=mi_cell,
                diff=diff_cell,
                fp=_fmt_mean_std(*row["fp"][:2]),
                iou=_fmt_mean_std(*row["iou"][:2]),
                sec=_fmt_mean_std(*row["seconds"][:2]),
            )
        )
    methods, matrix = _msfi_matrix(records)
    if len(methods) >= 2 and matrix.shape[0] >= 2:
        stat, p = friedman(matrix)
        cd = nemenyi_cd(len(methods), matrix.shape[0])
        lines += [
            "",
            f"Friedman test over MSFI ({matrix.shape[0]} cases × {len(methods)} methods): "
            f"χ² = {stat:.3f}, p = {p:.3g}. "
            f"Nemenyi critical difference of mean ranks at α=0.05: {cd:.3f}.",
        ]
    lines.append("")
    return "\n".join(lines)


def write_aggregate_csv(path, rows) -> None:
    """Long-format aggregate CSV: method, metric, mean, std, nan_count."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "metric", "mean", "std", "nan_count"])
        for row in rows:
            for metric in ("msfi", "mi_correlation", "fp", "iou", "seconds"):
                mean, std, nan_count = row[metric]
                writer.writerow([
                    row["method"], metric,
                    "NaN" if math.isnan(mean) else repr(mean),
                    "NaN" if math.isnan(std) else repr(std),
                    nan_count,
                ])
            if row["diff_auc"] is not None:
                writer.writerow([row["method"], "diff_auc", repr(row["diff_auc"]), "", 0])
            writer.writerow([row["method"], "stars", row["stars"], "", ""])
