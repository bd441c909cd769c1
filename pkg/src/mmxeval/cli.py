"""Command-line pipeline: synth -> shapley -> explain -> eval -> ablate -> report.

Each stage reads and writes files, so stages are independently cacheable and
externally produced heatmaps can enter at the eval stage. Exit codes: 0 on
success, 1 for usage errors, 2 for data errors, 3 for oracle/transport
failures. A JSON config file can pre-set any long flag (CLI flags win), and
the oracle timeout honors the MMXEVAL_ORACLE_TIMEOUT environment variable.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ablation as ablation_mod
from . import metrics as metrics_mod
from . import report as report_mod
from . import shapley as shapley_mod
from .data import ManifestError, load_manifest, write_manifest
from .explainers import METHODS, ExplainerConfig, ExplainerError, explain_dataset
from .metrics import DegenerateHeatmapError, DegenerateWeightsError, MetricRecord
from .npyio import ArrayIOError, read_array
from .oracle import OracleError, open_oracle, probe_mi, predict_dataset, serve_stdio, serve_tcp
from .postproc import RECTIFY_MODES, normalize_joint, rectify
from .data import Heatmap
from .synthgen import DEFAULT_P_FLAIR, DEFAULT_SIZE, generate_dataset, generate_probe_sets

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ORACLE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flag(p):
    p.add_argument("--config", default=None,
                   help="JSON file of default option values (flags override)")


def _apply_config(args, defaults: dict):
    """Resolve option values: explicit flag > config file > built-in default."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
    for key, hard_default in defaults.items():
        if getattr(args, key, None) is None:
            value = cfg.get(key, hard_default)
            setattr(args, key, value)
    return args


def build_parser() -> _Parser:
    parser = _Parser(prog="mmxeval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset (or probe pair)")
    p.add_argument("--n", type=int, required=True, help="number of cases (even)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--p-flair", dest="p_flair", type=float, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--tumor-only", action="store_true")
    p.add_argument("--probes", action="store_true",
                   help="emit probe_t1c/ and probe_flair/ instead of one dataset")
    p.add_argument("--out", required=True)
    _add_config_flag(p)

    p = sub.add_parser("shapley", help="ground-truth MI via exact modality Shapley values")
    p.add_argument("--dataset", required=True)
    p.add_argument("--oracle", default=None)
    p.add_argument("--ablation", choices=["whole-modality", "feature-region"], default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", required=True, help="output/cache JSON path")
    p.add_argument("--force", action="store_true", help="recompute even if --out exists")
    _add_config_flag(p)

    p = sub.add_parser("probe-mi", help="probe-dataset accuracies of an oracle")
    p.add_argument("--oracle", default=None)
    p.add_argument("--probe-t1c", dest="probe_t1c", required=True)
    p.add_argument("--probe-flair", dest="probe_flair", required=True)
    p.add_argument("--out", default=None, help="optional JSON output path")
    _add_config_flag(p)

    p = sub.add_parser("explain", help="generate heatmaps with perturbation explainers")
    p.add_argument("--dataset", required=True)
    p.add_argument("--oracle", default=None)
    p.add_argument("--methods", required=True,
                   help="comma-separated subset of: " + ", ".join(METHODS))
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--patch", dest="patch_size", type=int, default=None)
    p.add_argument("--grouping", choices=["grid", "mask-background"], default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--kernel-width", dest="kernel_width", type=float, default=None)
    p.add_argument("--ridge", type=float, default=None)
    p.add_argument("--baseline", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--no-timing", action="store_true",
                   help="record 0.0 seconds (for byte-reproducible pipelines)")
    _add_config_flag(p)

    p = sub.add_parser("eval", help="score heatmaps against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--heatmaps", required=True, help="directory from `mmxeval explain`")
    p.add_argument("--mi", required=True, help="MI JSON from `mmxeval shapley`")
    p.add_argument("--methods", default=None, help="comma-separated filter")
    p.add_argument("--metrics", dest="metric_names", default=None,
                   help="metrics to compute (default: msfi,mi_correlation,fp,iou)")
    p.add_argument("--rectify", dest="rectify_mode", choices=list(RECTIFY_MODES), default=None)
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float, default=None)
    p.add_argument("--oracle", default=None,
                   help="optional: fill correctness from fresh predictions")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", required=True, help="metrics CSV path")
    _add_config_flag(p)

    p = sub.add_parser("ablate", help="accuracy-vs-ablation curves and diffAUC")
    p.add_argument("--dataset", required=True)
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--oracle", default=None)
    p.add_argument("--methods", default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--baseline-seeds", dest="baseline_seeds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rectify", dest="rectify_mode", choices=list(RECTIFY_MODES), default=None)
    p.add_argument("--out-curves", dest="out_curves", required=True)
    p.add_argument("--out-diff", dest="out_diff", required=True)
    _add_config_flag(p)

    p = sub.add_parser("report", help="aggregate metric CSVs into a markdown report")
    p.add_argument("--metrics", nargs="+", required=True, help="metric CSV file(s)")
    p.add_argument("--diff", default=None, help="diffAUC JSON from `mmxeval ablate`")
    p.add_argument("--out", required=True, help="markdown output path")
    p.add_argument("--out-csv", dest="out_csv", default=None, help="aggregate CSV path")
    _add_config_flag(p)

    p = sub.add_parser("serve", help="serve a builtin oracle over the wire protocol")
    p.add_argument("--oracle", default=None)
    p.add_argument("--stdio", action="store_true")
    p.add_argument("--tcp", default=None, help="HOST:PORT to listen on")
    p.add_argument("--max-connections", dest="max_connections", type=int, default=None)
    _add_config_flag(p)

    return parser


def _parse_methods(text, valid=METHODS):
    """Split a comma list; when ``valid`` is given, reject unknown names."""
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if not methods:
        raise UsageError("no methods given")
    if valid is not None:
        for m in methods:
            if m not in valid:
                raise UsageError(f"unknown method {m!r}; valid methods: {', '.join(valid)}")
    return methods


def cmd_synth(args) -> int:
    _apply_config(args, {"seed": 0, "p_flair": DEFAULT_P_FLAIR, "size": DEFAULT_SIZE})
    if args.n < 2 or args.n % 2:
        raise UsageError(f"--n must be an even number >= 2, got {args.n}")
    out = Path(args.out)
    if args.probes:
        probe_t1c, probe_flair = generate_probe_sets(args.n, args.seed, args.size)
        p1 = write_manifest(probe_t1c, out / "probe_t1c")
        p2 = write_manifest(probe_flair, out / "probe_flair")
        print(p1)
        print(p2)
    else:
        manifest = generate_dataset(args.n, args.seed, args.p_flair, args.size,
                                    args.tumor_only)
        print(write_manifest(manifest, out))
    return EXIT_OK


def cmd_shapley(args) -> int:
    _apply_config(args, {"oracle": "builtin:t1c-shape", "ablation": "whole-modality",
                         "jobs": 1})
    out = Path(args.out)
    if out.exists() and not args.force:
        doc = shapley_mod.load_mi_json(out)  # cache hit: no oracle calls
        print(out)
        print(json.dumps({"phi_raw": doc["phi_raw"],
                          "phi_normalized": doc["phi_normalized"]}))
        return EXIT_OK
    dataset = load_manifest(args.dataset)
    ablation = args.ablation.replace("-", "_")
    with open_oracle(args.oracle) as oracle:
        table = shapley_mod.characteristic_values(oracle, dataset, ablation,
                                                  jobs=args.jobs)
        raw = shapley_mod.shapley_from_table(table)
        normalized = shapley_mod.normalize_mi(raw)
        doc = shapley_mod.mi_result_to_json(table, raw, normalized,
                                            dataset.modalities, oracle.meta.name)
    out.parent.mkdir(parents=True, exist_ok=True)
    shapley_mod.save_mi_json(out, doc)
    print(out)
    print(json.dumps({"phi_raw": doc["phi_raw"], "phi_normalized": doc["phi_normalized"]}))
    return EXIT_OK


def cmd_probe_mi(args) -> int:
    _apply_config(args, {"oracle": "builtin:t1c-shape"})
    probe_t1c = load_manifest(args.probe_t1c)
    probe_flair = load_manifest(args.probe_flair)
    with open_oracle(args.oracle) as oracle:
        result = probe_mi(oracle, probe_t1c, probe_flair)
    doc = {"acc_t1c": result.acc_t1c, "acc_flair": result.acc_flair}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(doc))
    return EXIT_OK


def cmd_explain(args) -> int:
    _apply_config(args, {
        "oracle": "builtin:t1c-shape", "window": 8, "stride": 4, "patch_size": 8,
        "grouping": "grid", "samples": 25, "kernel_width": 0.25, "ridge": 1e-6,
        "baseline": 0.0, "seed": 0, "jobs": 1,
    })
    methods = _parse_methods(args.methods)
    dataset = load_manifest(args.dataset)
    config = ExplainerConfig(
        baseline=args.baseline, samples=args.samples, window=args.window,
        stride=args.stride, patch_size=args.patch_size,
        grouping=args.grouping.replace("-", "_"), kernel_width=args.kernel_width,
        ridge=args.ridge, seed=args.seed,
    )
    with open_oracle(args.oracle) as oracle:
        index_path = explain_dataset(oracle, dataset, methods, config, args.out,
                                     jobs=args.jobs,
                                     record_timing=not args.no_timing)
    print(index_path)
    return EXIT_OK


def _load_heatmap_index(heatmap_dir: Path) -> dict:
    index_path = heatmap_dir / "index.json"
    if index_path.is_file():
        with open(index_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict) or "entries" not in doc:
            raise ManifestError(f"malformed heatmap index: {index_path}")
        return doc
    entries = []
    for path in sorted(heatmap_dir.glob("*__*.npy")):
        case_id, _, method = path.stem.rpartition("__")
        entries.append({"case": case_id, "method": method, "file": path.name,
                        "seconds": float("nan"), "status": "ok"})
    if not entries:
        raise ManifestError(f"no heatmap index or *__*.npy files in {heatmap_dir}")
    return {"version": 1, "entries": entries}


EVAL_METRICS = ("msfi", "mi_correlation", "fp", "iou")


def cmd_eval(args) -> int:
    _apply_config(args, {"rectify_mode": "clip_negative", "iou_threshold": 0.5,
                         "jobs": 1, "oracle": None, "methods": None,
                         "metric_names": ",".join(EVAL_METRICS)})
    selected = _parse_methods(args.metric_names, valid=EVAL_METRICS)
    mi_doc = shapley_mod.load_mi_json(args.mi)  # fail fast on a malformed MI file
    phi_raw = mi_doc["_raw"]
    phi_norm = mi_doc["_normalized"]
    dataset = load_manifest(args.dataset)
    if len(phi_raw) != len(dataset.modalities):
        raise ManifestError(
            f"MI file has {len(phi_raw)} modalities, dataset has {len(dataset.modalities)}"
        )
    heatmap_dir = Path(args.heatmaps)
    index = _load_heatmap_index(heatmap_dir)
    methods = None if args.methods is None else set(_parse_methods(args.methods, valid=None))
    entries = [e for e in index["entries"]
               if methods is None or e["method"] in methods]
    if not entries:
        raise ManifestError("no heatmap entries match the requested methods")

    correctness = {}
    if any(c.prediction is not None for c in dataset.cases):
        correctness = {c.id: c.correct for c in dataset.cases}
    elif args.oracle:
        with open_oracle(args.oracle) as oracle:
            preds = predict_dataset(oracle, dataset)
        correctness = {c.id: bool(p == c.label)
                       for c, p in zip(dataset.cases, preds)}

    cases = {c.id: c for c in dataset.cases}
    wanted_methods = sorted({e["method"] for e in entries})
    by_key = {(e["case"], e["method"]): e for e in entries}

    def eval_case(case_id: str):
        case = cases[case_id]
        rows = []
        for method in wanted_methods:
            entry = by_key.get((case_id, method))
            rec = MetricRecord(case_id=case_id, method=method,
                               correct=correctness.get(case_id))
            rows.append(rec)
            if entry is None or not (heatmap_dir / entry["file"]).is_file():
                rec.status = "missing"
                continue
            raw = read_array(heatmap_dir / entry["file"])
            if raw.shape != case.image.data.shape:
                raise ManifestError(
                    f"heatmap {entry['file']}: shape {raw.shape} != case shape "
                    f"{case.image.data.shape}"
                )
            heat = normalize_joint(rectify(Heatmap(raw), args.rectify_mode))
            rec.seconds = float(entry.get("seconds", float("nan")))
            if "mi_correlation" in selected:
                est = metrics_mod.estimated_mi(heat)
                rec.mi_correlation = metrics_mod.mi_correlation(est, phi_raw)
            if case.masks is not None:
                if "msfi" in selected:
                    rec.msfi = metrics_mod.msfi(heat, case.masks, phi_norm)
                if "fp" in selected:
                    try:
                        rec.fp = metrics_mod.feature_portion(heat, case.masks)
                    except DegenerateHeatmapError:
                        rec.status = "degenerate"
                if "iou" in selected:
                    rec.iou = metrics_mod.iou(heat, case.masks, args.iou_threshold)
        return case_id, rows

    ordered_ids = sorted(cases)
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            by_case = dict(pool.map(eval_case, ordered_ids))
    else:
        by_case = dict(eval_case(cid) for cid in ordered_ids)
    records = [rec for cid in ordered_ids for rec in by_case[cid]]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_records(args.out, records)
    print(args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    _apply_config(args, {"oracle": "builtin:t1c-shape", "step": 0.05,
                         "baseline_seeds": 5, "seed": 0,
                         "rectify_mode": "clip_negative", "methods": None})
    if not (0.0 < float(args.step) <= 0.5):
        raise UsageError(f"--step must be in (0, 0.5], got {args.step}")
    if args.baseline_seeds < 1:
        raise UsageError("--baseline-seeds must be >= 1")
    dataset = load_manifest(args.dataset)
    heatmap_dir = Path(args.heatmaps)
    index = _load_heatmap_index(heatmap_dir)
    methods = None if args.methods is None else set(_parse_methods(args.methods, valid=None))
    by_method = {}
    for entry in index["entries"]:
        if methods is not None and entry["method"] not in methods:
            continue
        by_method.setdefault(entry["method"], {})[entry["case"]] = entry["file"]
    if not by_method:
        raise ManifestError("no heatmap entries match the requested methods")

    with open_oracle(args.oracle) as oracle:
        random_curves = [
            ablation_mod.ablation_curve(oracle, dataset, ordering="random",
                                        step=args.step, seed=args.seed + i)
            for i in range(args.baseline_seeds)
        ]
        curves = {f"random:{args.seed + i}": c for i, c in enumerate(random_curves)}
        diffs = {}
        for method in sorted(by_method):
            files = by_method[method]
            heatmaps = {}
            for case in dataset.cases:
                if case.id not in files:
                    raise ManifestError(f"method {method}: no heatmap for case {case.id}")
                raw = read_array(heatmap_dir / files[case.id])
                heatmaps[case.id] = rectify(Heatmap(raw), args.rectify_mode)
            curve = ablation_mod.ablation_curve(oracle, dataset, heatmaps,
                                                ordering="heatmap_desc", step=args.step)
            curves[method] = curve
            diffs[method] = {
                "auc": ablation_mod.auc(curve),
                "diff_auc": ablation_mod.diff_auc(curve, random_curves),
            }
    doc = {
        "random_auc_mean": float(np.mean([ablation_mod.auc(c) for c in random_curves])),
        "random_seeds": [args.seed + i for i in range(args.baseline_seeds)],
        "step": args.step,
        "methods": diffs,
    }
    Path(args.out_curves).parent.mkdir(parents=True, exist_ok=True)
    ablation_mod.write_curves_csv(args.out_curves, curves)
    with open(args.out_diff, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(args.out_diff)
    return EXIT_OK


def cmd_report(args) -> int:
    _apply_config(args, {})
    records = []
    for path in args.metrics:
        records.extend(metrics_mod.read_records(path))
    if not records:
        raise ManifestError("metric CSV input contains no records")
    diff_aucs = None
    if args.diff:
        with open(args.diff, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        diff_aucs = {m: v["diff_auc"] for m, v in doc.get("methods", {}).items()}
    rows = report_mod.aggregate_report(records, diff_aucs)
    markdown = report_mod.render_markdown(rows, records)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(markdown)
    if args.out_csv:
        report_mod.write_aggregate_csv(args.out_csv, rows)
    print(args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    _apply_config(args, {"oracle": "builtin:t1c-shape", "max_connections": None})
    oracle = open_oracle(args.oracle)
    if args.tcp:
        host, _, port = args.tcp.rpartition(":")
        if not host or not port.isdigit():
            raise UsageError(f"--tcp wants HOST:PORT, got {args.tcp!r}")

        def announce(bound_port):
            print(f"listening on {host}:{bound_port}", flush=True)

        serve_tcp(oracle, host, int(port), ready_callback=announce,
                  max_connections=args.max_connections)
    else:
        serve_stdio(oracle)
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "shapley": cmd_shapley,
    "probe-mi": cmd_probe_mi,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExplainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ManifestError, ArrayIOError, DegenerateWeightsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
