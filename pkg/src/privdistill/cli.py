"""Command-line entry points: run / sweep / compare / attack / report.

The experiment-level API (`ExperimentConfig`, `run_experiment`,
`run_tradeoff_sweep`, `compare_defenses`) is re-exported here so this module
is the single orchestration surface.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import DEFENSES, ExperimentConfig, load_config, parse_config  # noqa: F401
from .dataio import build_attack_set, load_dataset_splits
from .errors import ConfigError, DataError
from .experiment import (  # noqa: F401
    ExperimentReport,
    compare_defenses,
    run_experiment,
    run_tradeoff_sweep,
)
from .mia import attack_scores, auc_roc, roc_to_json, scores_to_csv
from .nets import UnetGenerator, load_checkpoint


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, args.out, n_workers=args.workers, cache_dir=args.cache)
    agg = report.aggregate
    print(f"defense={cfg.defense.name} seeds_ok={agg['n_ok']}/{cfg.n_seeds}")
    for key in ("auc", "nkid", "gap", "overlap"):
        if agg.get(key):
            print(f"  {key:8s} mean={agg[key]['mean']:.4f} std={agg[key]['std']:.4f}")
    print(f"report written to {Path(args.out) / 'report.json'}")
    return 0 if agg["n_ok"] == cfg.n_seeds else 1


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values: list = []
    for chunk in args.values.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        values.append(chunk if args.knob == "defense" else float(chunk))
    points = run_tradeoff_sweep(
        cfg, args.knob, values, args.out, n_workers=args.workers, cache_dir=args.cache
    )
    for p in points:
        if p["status"] == "ok":
            print(f"{args.knob}={p['value']}: auc={p['auc_mean']:.4f} nkid={p['nkid_mean']:.4f}")
        else:
            print(f"{args.knob}={p['value']}: FAILED ({p['error']})")
    print(f"sweep written to {Path(args.out) / 'tradeoff.csv'}")
    return 0 if all(p["status"] == "ok" for p in points) else 1


def _cmd_compare(args) -> int:
    cfgs = [load_config(p.strip()) for p in args.configs.split(",") if p.strip()]
    result = compare_defenses(cfgs, args.out, n_workers=args.workers, cache_dir=args.cache)
    print(f"{'defense':10s} {'auc':>8s} {'nkid':>8s} {'gap':>8s}")
    for row in result["rows"]:
        print(
            f"{row['defense']:10s} {row['auc_mean']:8.4f} {row['nkid_mean']:8.4f} "
            f"{row['gap_mean']:8.4f}"
        )
    if "akd_vs_dmp" in result:
        pair = result["akd_vs_dmp"]
        print(
            f"akd vs dmp: nkid {pair['nkid_akd']:.4f} vs {pair['nkid_dmp']:.4f} "
            f"(auc difference {pair['auc_difference']:.4f})"
        )
    return 0


def _cmd_attack(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, UnetGenerator):
        raise ConfigError("attack needs a generator checkpoint")
    splits = load_dataset_splits(args.dataset)
    eval_set = build_attack_set(splits, args.seed)
    records = attack_scores(model, eval_set, args.seed, args.draws)
    roc = auc_roc(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores_to_csv(records, out / "attack_scores.csv")
    roc_to_json(roc, out / "roc.json")
    print(f"attack auc={roc.auc:.4f} over {len(records)} records")
    print(f"scores written to {out / 'attack_scores.csv'}")
    return 0


def _cmd_report(args) -> int:
    report_path = Path(args.in_dir) / "report.json"
    if not report_path.exists():
        raise DataError(f"no report.json under {args.in_dir}")
    payload = json.loads(report_path.read_text())
    if args.format == "json":
        text = json.dumps(payload, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text)
        return 0
    fieldnames = ["seed_index", "status", "auc", "nkid", "kid_raw", "gap", "overlap", "proxy_auc"]
    rows = [{k: seed.get(k, "") for k in fieldnames} for seed in payload.get("seeds", [])]
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(target, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            target.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privdistill",
        description="Membership-privacy benchmark for paired image-translation models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment config end to end")
    run_p.add_argument("--config", required=True, help="JSON experiment config")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    run_p.add_argument("--cache", default=None, help="checkpoint cache directory")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="sweep a knob and emit tradeoff points")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--knob", required=True, choices=["sigma", "defense"])
    sweep_p.add_argument("--values", required=True, help="comma-separated knob values")
    sweep_p.add_argument("--out", required=True)
    sweep_p.add_argument("--workers", type=int, default=1)
    sweep_p.add_argument("--cache", default=None)
    sweep_p.set_defaults(func=_cmd_sweep)

    compare_p = sub.add_parser("compare", help="rank several defense configs")
    compare_p.add_argument("--configs", required=True, help="comma-separated config paths")
    compare_p.add_argument("--out", default=None)
    compare_p.add_argument("--workers", type=int, default=1)
    compare_p.add_argument("--cache", default=None)
    compare_p.set_defaults(func=_cmd_compare)

    attack_p = sub.add_parser("attack", help="attack a checkpoint against a dataset folder")
    attack_p.add_argument("--checkpoint", required=True)
    attack_p.add_argument("--dataset", required=True)
    attack_p.add_argument("--out", default="attack_out")
    attack_p.add_argument("--seed", type=int, default=0)
    attack_p.add_argument("--draws", type=int, default=1)
    attack_p.set_defaults(func=_cmd_attack)

    report_p = sub.add_parser("report", help="re-emit a report as json or csv")
    report_p.add_argument("--in", dest="in_dir", required=True)
    report_p.add_argument("--format", choices=["json", "csv"], default="json")
    report_p.add_argument("--out", default=None)
    report_p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
