import math

import pytest

from mmxeval.metrics import MetricRecord
from mmxeval.report import (
    aggregate_report,
    render_markdown,
    significance_stars,
    write_aggregate_csv,
)


def records_for(method, msfi_values, correct_flags=None, mi=1.0):
    out = []
    for i, v in enumerate(msfi_values):
        out.append(MetricRecord(
            case_id=f"case_{i:04d}", method=method, msfi=v, mi_correlation=mi,
            fp=v * 0.9, iou=0.1, seconds=1.0,
            correct=None if correct_flags is None else correct_flags[i],
        ))
    return out


def test_star_thresholds():
    assert significance_stars(0.0005) == "***"
    assert significance_stars(0.004) == "**"
    assert significance_stars(0.04) == "*"
    assert significance_stars(0.2) == "NS"
    assert significance_stars(float("nan")) == "-"


def test_aggregate_basic():
    records = records_for("occlusion", [0.4, 0.6, 0.5])
    rows = aggregate_report(records)
    assert rows[0]["method"] == "occlusion"
    mean, std, nan_count = rows[0]["msfi"]
    assert mean == pytest.approx(0.5)
    assert nan_count == 0


def test_aggregate_nan_exclusion_and_count():
    records = records_for("lime", [0.2, float("nan"), 0.4],
                          mi=float("nan"))
    rows = aggregate_report(records)
    mean, _, nan_count = rows[0]["msfi"]
    assert mean == pytest.approx(0.3)
    assert nan_count == 1
    mi_mean, _, mi_nan = rows[0]["mi_correlation"]
    assert math.isnan(mi_mean) and mi_nan == 3


def test_aggregate_orders_by_msfi():
    records = records_for("weak", [0.1, 0.2]) + records_for("strong", [0.8, 0.9])
    rows = aggregate_report(records)
    assert [r["method"] for r in rows] == ["strong", "weak"]


def test_stars_from_correctness_grouping():
    # clearly separated groups: p from Mann-Whitney is small
    msfi = [0.9, 0.92, 0.95, 0.91, 0.94, 0.12, 0.1, 0.15, 0.11, 0.13]
    correct = [True] * 5 + [False] * 5
    rows = aggregate_report(records_for("occlusion", msfi, correct))
    assert rows[0]["stars"] in ("*", "**", "***")
    rows = aggregate_report(records_for("occlusion", msfi))
    assert rows[0]["stars"] == "-"


def test_missing_rows_counted():
    records = records_for("occlusion", [0.5, 0.6])
    records.append(MetricRecord("case_x", "occlusion", status="missing"))
    rows = aggregate_report(records)
    assert rows[0]["missing"] == 1
    assert rows[0]["msfi"][0] == pytest.approx(0.55)


def test_markdown_table_content():
    records = (records_for("occlusion", [0.5, 0.6, 0.7]) +
               records_for("lime", [0.1, 0.2, 0.3], mi=float("nan")))
    rows = aggregate_report(records, diff_aucs={"occlusion": 0.25})
    text = render_markdown(rows, records)
    assert "| occlusion |" in text
    assert "0.25" in text  # diffAUC cell
    assert "NaN" in text   # all-NaN MI correlation column for lime
    assert "Friedman" in text  # two methods share all three cases


def test_aggregate_csv(tmp_path):
    records = records_for("occlusion", [0.5, 0.6])
    rows = aggregate_report(records, diff_aucs={"occlusion": 0.2})
    path = tmp_path / "agg.csv"
    write_aggregate_csv(path, rows)
    text = path.read_text()
    assert "occlusion,msfi," in text
    assert "occlusion,diff_auc,0.2" in text
