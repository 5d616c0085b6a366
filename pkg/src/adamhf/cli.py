"""Command line entry point: ``python3 -m adamhf <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .dataio import generate_synthetic, read_manifest
from .numerics import ConfigurationError, precision
from .runner import (FoldReport, bench_missing, evaluate, flops_report, load_model, train, write_bench, write_flops,
                     write_fold_outputs)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "dataset", None):
        changes["dataset"] = args.dataset
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes)


def _manifest(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigurationError("no dataset given (use --dataset or dataset= in the config)")
    return read_manifest(cfg.dataset)


def cmd_gen_data(args) -> int:
    out = args.out or "data/synthetic"
    m = generate_synthetic(out, n_samples=args.n_samples, d=args.d, t_bins=args.t_bins, noise=args.noise,
                           seed=args.seed or 0)
    censored = sum(r.c for r in m.rows)
    print(f"wrote {len(m.rows)} samples to {out} ({censored} censored)")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    reports = train(cfg, _manifest(cfg))
    write_fold_outputs(cfg.out, reports)
    Path(cfg.out, "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    for rep in reports:
        print(f"fold {rep.fold_index}: c_index_harrell={rep.c_index_harrell} status={rep.status}")
    print(Path(cfg.out, "summary.csv").read_text(encoding="utf-8"), end="")
    return 0


def _trained_folds(cfg: RunConfig):
    folds = sorted(Path(cfg.out).glob("fold_*/model.npz"))
    if not folds:
        raise ConfigurationError(f"no trained folds under {cfg.out}; run `train` first")
    return folds


def cmd_eval(args) -> int:
    cfg = _config(args)
    samples = _manifest(cfg).load_all()
    for path in _trained_folds(cfg):
        model = load_model(cfg, path)
        ids = (path.parent / "valid_ids.txt").read_text(encoding="utf-8").split()
        ev = evaluate(model, [samples[i] for i in ids], args.mode, 0.0, cfg.n_s, cfg.seed)
        p = f"{ev.log_rank.p_value:.4g}" if ev.log_rank else "undefined"
        print(f"{path.parent.name} {args.mode}: c_index_harrell={ev.c_index_harrell} "
              f"c_index_paper={ev.c_index_paper:.4f} log_rank_p={p}")
    return 0


def cmd_bench_missing(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg)
    reports = None
    if args.retrain or not list(Path(cfg.out).glob("fold_*/model.npz")):
        reports = train(cfg, manifest)
        write_fold_outputs(cfg.out, reports)
    else:
        reports = []
        for path in _trained_folds(cfg):
            ids = (path.parent / "valid_ids.txt").read_text(encoding="utf-8").split()
            rep = FoldReport(int(path.parent.name.split("_")[1]), [], None, float("nan"), None, [], 0, ids)
            rep.model = load_model(cfg, path)
            reports.append(rep)
    rows = bench_missing(cfg, manifest, reports)
    write_bench(Path(cfg.out) / "bench_missing.csv", rows)
    for r in rows:
        extra = f" +/- {r.std_harrell:.4f}" if r.std_harrell is not None else ""
        print(f"{r.mode:14s} {r.fold:5s} {r.c_index_harrell:.4f}{extra}")
    return 0


def cmd_flops(args) -> int:
    cfg = _config(args)
    rows = flops_report(cfg, args.n_p)
    write_flops(Path(cfg.out) / "flops.csv", rows)
    print(f"{'id':8s} {'w/o ATSA':>8s} {'w/o PREE':>8s} {'w/o LMF':>8s} {'flops':>14s}")
    for r in rows:
        print(f"{r['id']:8s} {r['wo_atsa']:8d} {r['wo_pree']:8d} {r['wo_lmf']:8d} {r['flops']:14,d}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_grad_check

    with precision(64):
        reports = model_grad_check(seed=args.seed or 0)
    worst = max(r.max_relative_error for r in reports.values())
    failed = [name for name, r in reports.items() if not r.passed]
    for name, r in sorted(reports.items()):
        print(f"{name:60s} {r.max_relative_error:.2e} {'ok' if r.passed else 'FAIL'}")
    print(f"{len(reports)} blocks, worst relative error {worst:.2e}, {len(failed)} failed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adamhf", description="Adaptive multimodal hierarchical fusion "
                                     "for survival prediction on synthetic data.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--t-bins", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "5-fold training"),
                                 ("eval", cmd_eval, "evaluate trained folds"),
                                 ("bench-missing", cmd_bench_missing, "missing-modality benchmark")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset", help="dataset directory containing manifest.csv")
        p.add_argument("--epochs", type=int)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--mode", choices=("full", "geno_missing", "patho_missing"), default="full")
        if name == "bench-missing":
            p.add_argument("--retrain", action="store_true")

    p = sub.add_parser("flops", parents=[common], help="forward-pass FLOPs per ablation")
    p.add_argument("--n-p", type=int, default=256)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
