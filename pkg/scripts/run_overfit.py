"""Memorise a 56-image synthetic set with the tiny model and report the loss curve."""
import argparse
import time

from ferformer.data import synth_generate
from ferformer.evaluation import evaluate
from ferformer.suite import OVERFIT
from ferformer.trainer import fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=OVERFIT.epochs)
    ap.add_argument("--log", default=None, help="optional metrics CSV")
    args = ap.parse_args()
    cfg = OVERFIT.replace(epochs=args.epochs)
    ds = synth_generate(cfg.seed, cfg.per_class, cfg.num_classes, cfg.noise_level, cfg.ambiguity_rate)
    t0 = time.time()
    rep = fit(ds, cfg, log_path=args.log)
    for row in rep.rows[:: max(1, len(rep.rows) // 10)] + rep.rows[-1:]:
        print(f"epoch {row['epoch']:>3}  L={row['L']:.4f}  L_text={row['L_text']:.4f}  "
              f"L_image={row['L_image']:.4f}  train_acc={row['train_acc']:.3f}")
    print(f"final train accuracy {evaluate(ds, rep.model).accuracy:.3f} in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
