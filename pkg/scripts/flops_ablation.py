"""Forward-pass FLOPs for each ablation variant over a range of bag sizes.

    python3 scripts/flops_ablation.py --n-p 64 128 256 512
"""
import argparse

from adamhf.config import RunConfig
from adamhf.runner import FLOPS_VARIANTS, flops_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-p", type=int, nargs="+", default=[64, 128, 256, 512])
    ap.add_argument("--rank", type=int, default=4)
    args = ap.parse_args()

    cfg = RunConfig(rank_r=args.rank)
    names = {row_id: "+".join(sorted(ab)) or "none" for row_id, ab in FLOPS_VARIANTS}
    print(f"{'n_p':>5s} " + " ".join(f"{names[i]:>18s}" for i, _ in FLOPS_VARIANTS) + "   full/all")
    for n_p in args.n_p:
        rows = {r["id"]: r["flops"] for r in flops_report(cfg, n_p)}
        cells = " ".join(f"{rows[i]:>18,d}" for i, _ in FLOPS_VARIANTS)
        print(f"{n_p:5d} {cells}   {rows['AdaMHF'] / rows['1']:.3f}")


if __name__ == "__main__":
    main()
