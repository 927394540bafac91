"""Command-line entry point: ingest, train, evaluate, score, report, synth.

Anything that affects results comes from the JSON run config; flags select
commands and paths. Exit codes: 0 ok, 3 I/O, 4 schema, 5 config, 6 training.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import sys
from pathlib import Path

from . import __version__
from .cascade import (
    CascadeModel,
    build_phase2_dataset,
    load_bundle,
    load_cascade,
    project_alert_volume,
    save_bundle,
    save_cascade,
    score_batch,
    write_alerts,
)
from .ensemble import predict_proba
from .errors import ConfigError, IOFailure, SchemaError, TriageError
from .flow_model import (
    ColumnConfig,
    dataset_summary,
    export_csv,
    load_dataset,
    parse_column_config,
    read_features,
)
from .metrics import evaluate_scores, metrics_row, read_metrics_csv, write_curves, write_metrics_csv
from .pipeline import MODEL_KINDS, RunConfig, load_run_config, train_phase
from .preprocess import CleaningRules, clean
from .synth import default_spec, generate, load_spec, save_spec


MODEL_LABELS = {"forest": "Random Forest", "gbt-xgb": "XGBoost-like GBT", "gbt-lgbm": "LightGBM-like GBT"}


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc.seed = args.seed
    return rc


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_sidecar(out: Path, command: str, **extra):
    meta = {"command": command, "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "version": __version__, **extra}
    _write_json(out / "run_meta.json", meta)


def _load_dataset(rc: RunConfig):
    if not rc.dataset:
        raise ConfigError("config has no 'dataset' path")
    cols = rc.column_config()
    return load_dataset(rc.dataset, cols), cols


def cmd_ingest(args) -> int:
    rc = _run_config(args)
    out = _out_dir(args)
    ds, _ = _load_dataset(rc)
    summary = dataset_summary(ds)
    (out / "summary.csv").write_text(summary.format())
    c = rc.cleaning
    rules = CleaningRules.for_schema(ds.schema, c.get("duration"), c.get("packet_counts"), c.get("flags"))
    crit = None if rc.critical_features is None else [ds.schema.index(n) for n in rc.critical_features]
    cleaned, report = clean(ds, crit, rules)
    _write_json(out / "cleaning.json", {
        "input_rows": len(ds), "retained": report.retained,
        "dropped_missing": report.dropped_missing,
        "dropped_negative_duration": report.dropped_negative_duration,
        "dropped_invalid_flags": report.dropped_invalid_flags,
        "features": ds.n_features,
    })
    (out / "summary_clean.csv").write_text(dataset_summary(cleaned).format())
    print(summary.format(), end="")
    print(f"cleaning: {len(ds)} -> {report.retained} rows")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    if args.phase is None or args.model is None:
        raise ConfigError("train needs --phase and --model")
    out = _out_dir(args)
    ds, cols = _load_dataset(rc)
    res = train_phase(ds, args.phase, args.model, rc, columns_text=cols.to_text())

    _write_json(out / "config.resolved.json", {**rc.to_dict(), "phase": args.phase, "model": args.model})
    save_bundle(res.bundle, out / "bundle.bin")
    write_metrics_csv(out / "train_metrics.csv", [metrics_row(args.model, res.train_metrics)])
    _write_json(out / "training_log.json", {"phase": args.phase, "model": args.model, **res.sizes})
    names = res.bundle.artifacts.retained_names
    order = sorted(range(len(names)), key=lambda k: (-res.importance[k], k))
    with (out / "importance.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "importance"])
        for r, k in enumerate(order, 1):
            w.writerow([r, names[k], f"{res.importance[k]:.6f}"])
    test_cols = export_csv(res.test_set, out / "test.csv", cols)
    (out / "test_columns.cfg").write_text(test_cols.to_text())

    if args.phase == 2 and rc.phase1_bundle:
        p1 = load_bundle(rc.phase1_bundle)
        save_cascade(CascadeModel(p1, res.bundle, provenance=str(rc.dataset)), out / "cascade.bin")
    _write_sidecar(out, "train", train_seconds=res.seconds)
    print(f"phase {args.phase} {args.model}: train {res.sizes['train']} / test {res.sizes['test']} "
          f"({res.seconds:.2f}s) -> {out / 'bundle.bin'}")
    return 0


def cmd_evaluate(args) -> int:
    if not args.bundle or not args.input:
        raise ConfigError("evaluate needs --bundle and --input")
    out = _out_dir(args)
    bundle = load_bundle(args.bundle)
    cols = parse_column_config(bundle.columns) if bundle.columns else ColumnConfig()
    if args.columns:
        cols = parse_column_config(Path(args.columns).read_text())
    ds = load_dataset(args.input, cols)
    if ds.schema.feature_names != bundle.feature_names:
        have, want = set(ds.schema.feature_names), set(bundle.feature_names)
        raise SchemaError("input schema does not match bundle; missing: "
                          f"{sorted(want - have)}; unexpected: {sorted(have - want)}")
    if bundle.phase == 2:
        ds = build_phase2_dataset(ds)
    scores = predict_proba(bundle.model, bundle.artifacts.transform(ds))
    report, cs = evaluate_scores(ds.y, scores, bundle.threshold)
    name = args.model or bundle.model.kind
    write_metrics_csv(out / "metrics.csv", [metrics_row(name, report)])
    write_curves(out, cs)
    cm = report.cm
    (out / "confusion.csv").write_text(f"tp,tn,fp,fn\n{cm.tp},{cm.tn},{cm.fp},{cm.fn}\n")
    print(f"accuracy {report.accuracy:.4f} precision {report.precision:.4f} recall {report.recall:.4f} "
          f"f1 {report.f1:.4f} auc {report.roc_auc:.4f}  (TP {cm.tp} TN {cm.tn} FP {cm.fp} FN {cm.fn})")
    return 0


def cmd_score(args) -> int:
    if not args.cascade or not args.input:
        raise ConfigError("score needs --cascade and --input")
    out = _out_dir(args)
    cm = load_cascade(args.cascade)
    cols = parse_column_config(cm.phase1.columns) if cm.phase1.columns else ColumnConfig()
    X, ids = read_features(args.input, cm.feature_names, cols.id_columns or ("Flow ID",))
    records, summary = score_batch(cm, X, ids=ids)
    write_alerts(out / "alerts.csv", records)
    with (out / "tier_summary.csv").open("w") as fh:
        fh.write("tier,count,rate\n")
        for tier, n in summary.counts.items():
            fh.write(f"{tier},{n},{summary.rates[tier]:.6f}\n")
    print(" ".join(f"{k}={v}" for k, v in summary.counts.items()) + f" total={summary.total}")
    return 0


def _md_table(header, rows) -> list:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return lines


def render_report(run: Path) -> str:
    lines = [f"# Run report: {run.name}", ""]
    cfg = {}
    if (run / "config.resolved.json").exists():
        cfg = json.loads((run / "config.resolved.json").read_text())
    timing = ""
    if (run / "run_meta.json").exists():
        t = json.loads((run / "run_meta.json").read_text()).get("train_seconds")
        timing = "" if t is None else f"{t:.2f}"
    metrics_path = run / "metrics.csv"
    if not metrics_path.exists():
        metrics_path = run / "train_metrics.csv"
        lines.append("_No test-set evaluation found; showing training-set metrics._")
        lines.append("")
    rows = []
    if metrics_path.exists():
        for m in read_metrics_csv(metrics_path):
            label = MODEL_LABELS.get(cfg.get("model", m["model"]), m["model"])
            rows.append([label] + [f"{float(m[k]):.4f}" if m[k] else "" for k in
                                   ("accuracy", "precision", "recall", "f1", "roc_auc")] + [timing])
        lines.append("## Performance")
        lines += _md_table(["Model", "Acc", "Prec", "Rec", "F1", "AUC", "Time(s)"], rows)
        lines.append("")
        m = read_metrics_csv(metrics_path)[0]
        lines.append("## Error analysis")
        lines += _md_table(["TP", "TN", "FP", "FN"], [[m["tp"], m["tn"], m["fp"], m["fn"]]])
        lines.append("")
    else:
        lines += ["_No metrics files found._", ""]

    missing_curves = [n for n in ("roc.csv", "pr.csv") if not (run / n).exists()]
    if missing_curves:
        lines += [f"_Curve files not present: {', '.join(missing_curves)}._", ""]

    imp_path = run / "importance.csv"
    if imp_path.exists():
        with imp_path.open(newline="") as fh:
            imp = list(csv.DictReader(fh))
        total = sum(float(r["importance"]) for r in imp)
        top = imp[:20]
        lines.append("## Top-20 feature importance")
        lines += _md_table(["Rank", "Feature", "Importance"],
                           [[r["rank"], r["feature"], r["importance"]] for r in top])
        lines.append("")
        lines.append(f"Top-20 share {sum(float(r['importance']) for r in top):.3f}; "
                     f"all {len(imp)} features sum to {total:.3f}.")
        lines.append("")
    else:
        lines += ["_No importance file found._", ""]

    if metrics_path.exists():
        m = read_metrics_csv(metrics_path)[0]
        fp, tn = int(m["fp"]), int(m["tn"])
        fpr = fp / (fp + tn) if fp + tn else 0.0
        daily = cfg.get("daily_flows", 1_000_000)
        frac = cfg.get("i2p_fraction", 0.012)
        p = project_alert_volume(fpr, float(m["recall"]), daily, frac)
        lines.append("## Alert-volume projection")
        lines.append(f"Assuming {daily:,} flows/day with I2P fraction {frac}:")
        lines.append("")
        lines += _md_table(["False alerts/day", "True alerts/day", "Missed flows/day"],
                           [[f"{p.false_alerts_per_day:.1f}", f"{p.true_alerts_per_day:.1f}",
                             f"{p.missed_flows_per_day:.1f}"]])
        lines.append("")
    return "\n".join(lines)


def cmd_report(args) -> int:
    run = Path(args.run or args.out)
    if not run.is_dir():
        raise IOFailure(f"run directory {run} does not exist")
    text = render_report(run)
    (run / "report.md").write_text(text)
    print(text)
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = load_spec(args.spec) if args.spec else default_spec()
    seed = 42 if args.seed is None else args.seed
    s = generate(spec, args.n, seed)
    cols = export_csv(s.dataset, out / "flows.csv")
    (out / "columns.cfg").write_text(cols.to_text())
    save_spec(spec, out / "spec.json")
    with (out / "oracle.csv").open("w") as fh:
        fh.write("flow_id,true_class,posterior_i2p,posterior_exfil\n")
        for i in range(len(s.dataset)):
            fh.write(f"{s.dataset.ids[i]},{spec.classes[s.true_class[i]]},"
                     f"{float(s.posterior[i])!r},{float(s.posterior_exfil[i])!r}\n")
    print(f"wrote {args.n} synthetic flows to {out / 'flows.csv'}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
    "score": cmd_score, "report": cmd_report, "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="i2ptriage", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    common(sub.add_parser("ingest", help="load a dataset, summarize classes, report cleaning"))
    sp = sub.add_parser("train", help="train one phase bundle")
    common(sp)
    sp.add_argument("--phase", type=int, choices=(1, 2))
    sp.add_argument("--model", choices=MODEL_KINDS)
    sp = sub.add_parser("evaluate", help="score a labelled file with a bundle")
    common(sp)
    sp.add_argument("--bundle")
    sp.add_argument("--input")
    sp.add_argument("--columns", help="column config for --input (defaults to the bundle's)")
    sp.add_argument("--model", help="name for the metrics row")
    sp = sub.add_parser("score", help="run the cascade over flows and write alerts")
    common(sp)
    sp.add_argument("--cascade")
    sp.add_argument("--input")
    sp = sub.add_parser("report", help="render a markdown report for a run directory")
    common(sp, out_required=False)
    sp.add_argument("--run", help="run directory (defaults to --out)")
    sp = sub.add_parser("synth", help="write a synthetic flow dataset with oracle posteriors")
    common(sp)
    sp.add_argument("--spec", help="generator spec JSON (defaults to the built-in spec)")
    sp.add_argument("--n", type=int, default=20000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report" and not (args.run or args.out):
        print("error: report needs --run or --out", file=sys.stderr)
        return ConfigError.exit_code
    try:
        return COMMANDS[args.command](args)
    except TriageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IOFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
