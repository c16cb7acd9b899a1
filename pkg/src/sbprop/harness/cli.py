"""Command-line entry point.

Subcommands: ``gen-data``, ``run``, ``compare``, ``audit-memory``,
``audit-grad``.  Configs are JSON with unknown keys rejected; outputs are
UTF-8 CSV files with fixed column order and ``.`` decimal separators.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..checks import op_gradient_checks, sbp_oracle_checks
from ..errors import SbpropError
from .data import gen_synthetic_dataset, nearest_motif_oracle_accuracy
from .experiment import (
    ExperimentConfig,
    RunRecord,
    audit_block_memory,
    audit_stt_memory,
    audit_time_ratio,
    compare_runs,
    run_experiment,
)


def _parse_ratios(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _cmd_gen_data(args) -> int:
    params = {
        "n_samples": args.n_samples,
        "frames": args.frames,
        "frame_shape": tuple(int(v) for v in args.frame_shape.split(",")),
        "n_classes": args.classes,
        "noise": args.noise,
        "seed": args.seed,
    }
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
        unknown = set(raw) - set(params)
        if unknown:
            raise SbpropError(f"unknown gen-data config keys: {sorted(unknown)}")
        raw["frame_shape"] = tuple(raw.get("frame_shape", params["frame_shape"]))
        params.update(raw)
    ds = gen_synthetic_dataset(**params)
    out = Path(args.out)
    ds.save(out)
    print(f"wrote {out} ({ds.n_samples} clips, {ds.frames} frames, "
          f"{ds.meta['n_classes']} classes, hash {ds.content_hash()[:16]})")
    if args.check_oracle:
        acc = nearest_motif_oracle_accuracy(ds)
        print(f"nearest-motif oracle accuracy: {acc:.3f}")
    return 0


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    if args.keep_ratio is not None:
        cfg.sbp["keep_ratio"] = args.keep_ratio
    if args.sampler is not None:
        cfg.sbp["sampler"] = args.sampler
    if args.boundary is not None:
        cfg.sbp["boundary"] = args.boundary
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    record = run_experiment(cfg)
    print(f"mode={record.mode} keep_ratio={record.keep_ratio} "
          f"val_acc={record.final_val_acc:.4f} cached={record.cached_elements} "
          f"status={record.status}")
    if cfg.out:
        print(f"wrote {Path(cfg.out) / 'summary.csv'}")
    return 0 if record.status == "ok" else 1


def _cmd_compare(args) -> int:
    records = [RunRecord.read_summary(p) for p in args.summaries]
    rows = compare_runs(records, out_path=args.out)
    for row in rows:
        print(f"{row['mode']:>15} r={row['keep_ratio']:<6} "
              f"acc={row['final_val_acc']:.4f} "
              f"space={row['space_ratio_measured']:.4f} "
              f"time={row['time_ratio_measured']:.4f}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_audit_memory(args) -> int:
    ratios = _parse_ratios(args.keep_ratio)
    rows = []
    if args.family in ("transformer", "all"):
        rows += audit_block_memory(args.heads, args.head_dim, args.tokens, ratios,
                                   seed=args.seed)
    if args.family in ("stt", "all"):
        rows += audit_stt_memory(ratios, seed=args.seed)
    if args.family in ("time", "all"):
        rows += audit_time_ratio(ratios, seed=args.seed)
    ok = True
    for row in rows:
        conforms = row["rel_dev"] < 0.10
        ok &= conforms
        print(f"{row['family']:>17} r={row['keep_ratio']:<6} "
              f"measured={row['measured']:.4f} predicted={row['predicted']:.4f} "
              f"dev={100 * row['rel_dev']:.2f}% -> {'PASS' if conforms else 'FAIL'}")
    if args.out:
        import csv

        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            cols = ["family", "keep_ratio", "measured", "predicted", "rel_dev"]
            w.writerow(cols)
            for row in rows:
                w.writerow([row[c] for c in cols])
        print(f"wrote {args.out}")
    return 0 if ok else 1


def _cmd_audit_grad(args) -> int:
    ok = True
    for res in op_gradient_checks(trials=args.trials, seed=args.seed):
        ok &= res.passed
        print(f"op {res.name:>16}: rel_err={res.error:.3e} "
              f"(tol {res.tolerance:g}) -> {'PASS' if res.passed else 'FAIL'}")
    for res in sbp_oracle_checks(n_configs=args.configs, seed=args.seed):
        ok &= res.passed
        print(f"oracle {res.name}: rel_err={res.error:.3e} "
              f"(tol {res.tolerance:g}) -> {'PASS' if res.passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbprop",
        description="Sampled-backward training experiments and audits")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the temporal-motif dataset")
    p.add_argument("--config", type=str, default=None, help="JSON with generator keys")
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--frame-shape", type=str, default="1,6,8", help="C,H,W")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--check-oracle", action="store_true",
                   help="also report the nearest-motif oracle accuracy")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--mode", type=str, default=None)
    p.add_argument("--keep-ratio", type=float, default=None)
    p.add_argument("--sampler", type=str, default=None)
    p.add_argument("--boundary", type=int, default=None)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("compare", help="tabulate runs against the e2e baseline")
    p.add_argument("summaries", nargs="+", help="summary.csv paths")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("audit-memory", help="measured vs predicted cache/time ratios")
    p.add_argument("--family", choices=["transformer", "stt", "time", "all"],
                   default="all")
    p.add_argument("--keep-ratio", type=str, default="0.125,0.25,0.5")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--tokens", type=int, default=392)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=_cmd_audit_memory)

    p = sub.add_parser("audit-grad", help="finite-difference and oracle checks")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--configs", type=int, default=5)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(fn=_cmd_audit_grad)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SbpropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
