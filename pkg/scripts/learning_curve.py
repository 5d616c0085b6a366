"""Train all folds on a fresh synthetic cohort and print per-epoch validation C-index.

    python3 scripts/learning_curve.py --n-samples 200 --epochs 20 --out runs/curve
"""
import argparse
import time
from pathlib import Path

import numpy as np

from adamhf.config import RunConfig
from adamhf.dataio import generate_synthetic
from adamhf.model import assemble_model
from adamhf.runner import evaluate, train, write_fold_outputs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-samples", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/curve")
    args = ap.parse_args()

    out = Path(args.out)
    manifest = generate_synthetic(out / "data", n_samples=args.n_samples, seed=args.seed)
    cfg = RunConfig(seed=args.seed, epochs=args.epochs, out=str(out))
    start = time.perf_counter()
    reports = train(cfg, manifest)
    elapsed = time.perf_counter() - start
    write_fold_outputs(out, reports)

    samples = manifest.load_all()
    untrained = assemble_model(cfg)
    base = np.mean([evaluate(untrained, [samples[i] for i in r.valid_ids], "full", 0.0, cfg.n_s,
                             cfg.seed).c_index_harrell for r in reports])
    print(f"untrained mean c-index {base:.4f}")
    print("epoch  " + "  ".join(f"fold{r.fold_index}" for r in reports) + "   mean")
    for e in range(args.epochs):
        vals = [r.epochs[e].c_index_harrell if e < len(r.epochs) else float("nan") for r in reports]
        vals = [float("nan") if v is None else v for v in vals]
        print(f"{e:5d}  " + "  ".join(f"{v:.3f}" for v in vals) + f"  {np.nanmean(vals):.3f}")
    print(f"trained mean c-index {np.mean([r.c_index_harrell for r in reports]):.4f} in {elapsed:.0f}s")


if __name__ == "__main__":
    main()
