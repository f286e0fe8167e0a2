"""Seed-averaged ablation grids on synthetic data (MGEI x HDSS, text content, patch sizes)."""
import argparse
import time

from ferformer.data import synth_splits
from ferformer.evaluation import AblationGrid, run_ablation
from ferformer.suite import ABLATION, ABLATION_SEEDS

GRIDS = {"mgei-hdss": AblationGrid.mgei_hdss, "text": AblationGrid.text_modes, "patch": AblationGrid.patch_sizes}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", choices=sorted(GRIDS), default="mgei-hdss")
    ap.add_argument("--seeds", default=",".join(map(str, ABLATION_SEEDS)))
    ap.add_argument("--epochs", type=int, default=ABLATION.epochs)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    base = ABLATION.replace(epochs=args.epochs)
    if args.grid == "patch":
        base = base.replace(text_mode="phrase")
    grid = GRIDS[args.grid](tuple(int(s) for s in args.seeds.split(",")))
    t0 = time.time()
    rows = run_ablation(grid, base, lambda s: synth_splits(base, s), args.out,
                        progress=lambda f, s, a: print(f"  {f} seed={s}: {100 * a:.2f}%", flush=True))
    for r in rows:
        label = ", ".join(f"{k}={v}" for k, v in r.items() if k not in ("accuracy", "per_seed", "config_diff"))
        per_seed = " ".join(f"{100 * a:.1f}" for a in r["per_seed"])
        print(f"{label}: {100 * r['accuracy']:.2f}%  [{per_seed}]")
    print(f"wrote {args.out} in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
