"""Command-line entry point: ``ferformer <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import FERFormerError

log = logging.getLogger("ferformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="key=value config file")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--checkpoint", default=d, help="checkpoint file to write (train) or read")
    p.add_argument("--data-dir", dest="data_dir", default=d, help="dataset root with manifest.txt")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ferformer", description="Multi-granularity transformer for expression recognition")
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("train", parents=[common], help="train on <data-dir>/train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="metrics CSV path (default: metrics.csv next to the checkpoint)")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")

    p = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix")
    p.add_argument("--split", default="test")
    p.add_argument("--head", choices=["image", "text", "fused"])
    p.add_argument("--confusion", help="write the confusion matrix CSV here")
    p.add_argument("--dump-errors", dest="dump_errors", help="write misclassified (id,truth,prediction) CSV")

    p = sub.add_parser("predict", parents=[common], help="classify image files")
    p.add_argument("images", nargs="+")
    p.add_argument("--head", choices=["image", "text", "fused"])

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset folder")
    p.add_argument("--out", help="output folder (default: --data-dir)")
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--classes", type=int, dest="num_classes")
    p.add_argument("--noise-level", dest="noise_level", type=float)
    p.add_argument("--ambiguity-rate", dest="ambiguity_rate", type=float)

    p = sub.add_parser("export-features", parents=[common], help="steering-token features + PCA CSVs")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default="features.csv")

    p = sub.add_parser("ablate", parents=[common], help="train an ablation grid")
    p.add_argument("--grid", choices=["mgei-hdss", "text", "patch"], required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", default="ablation.csv")
    return parser


def _config(args) -> Config:
    from .config import parse_overrides

    cfg = load_config(args.config) if args.config else Config()
    if args.set:
        cfg = parse_overrides(args.set, cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command} requires {flags}")


def cmd_train(args) -> int:
    from .data import load_split
    from .trainer import fit

    _need(args, "data_dir")
    cfg = _config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    log_path = Path(args.log) if args.log else (ckpt.with_name("metrics.csv") if ckpt else Path("metrics.csv"))
    train = load_split(args.data_dir, "train")
    resume = ckpt if args.resume and ckpt is not None and ckpt.exists() else None
    if args.resume and resume is None:
        raise UsageError("--resume needs an existing --checkpoint")
    t0 = time.time()
    report = fit(train, cfg, log_path=log_path, checkpoint_path=ckpt, resume=resume, epochs=args.epochs)
    final = report.final
    if final:
        print(f"epochs={report.state.epoch} L={final['L']:.5f} train_acc={final['train_acc']:.4f} "
              f"time={time.time() - t0:.1f}s")
    else:
        print("epochs=0 (no training rows)")
    for note in report.notes:
        print("note:", note)
    return 0


def _load_model(args):
    from .trainer import load_checkpoint

    _need(args, "checkpoint")
    model, _, _ = load_checkpoint(args.checkpoint)
    return model


def cmd_eval(args) -> int:
    from .data import load_split
    from .evaluation import evaluate, write_confusion, write_errors

    _need(args, "data_dir", "checkpoint")
    model = _load_model(args)
    ds = load_split(args.data_dir, args.split)
    res = evaluate(ds, model, args.head)
    print(f"accuracy={res.accuracy:.4f} ({int(np.trace(res.confusion))}/{res.total})")
    width = max(len(n) for n in ds.class_names)
    print(" " * width + " " + " ".join(f"{n[:6]:>6}" for n in ds.class_names))
    for name, row in zip(ds.class_names, res.confusion):
        print(f"{name:>{width}} " + " ".join(f"{v:>6d}" for v in row))
    if args.confusion:
        write_confusion(res.confusion, ds.class_names, args.confusion)
    if args.dump_errors:
        n = write_errors(ds, res.predictions, args.dump_errors)
        print(f"wrote {n} misclassified samples to {args.dump_errors}")
    return 0


def cmd_predict(args) -> int:
    from . import tensor as T
    from .data import decode_image
    from .head import predict

    model = _load_model(args)
    head = args.head or model.cfg.head
    for path in args.images:
        img = decode_image(Path(path))
        with T.no_grad():
            out = model(img[None])
        k = int(predict(out, head)[0])
        print(f"{path},{model.class_names[k]},{out.P_il[0, k]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .suite import gradient_suite

    t0 = time.time()
    rows = gradient_suite(args.precision)
    print(f"{'check':<28} {'max_rel_err':>12} {'tol':>8}  result")
    for name, rep in rows:
        print(f"{name:<28} {rep.max_rel_err:>12.3e} {rep.tol:>8.0e}  {'pass' if rep.passed else 'FAIL'}")
    ok = all(rep.passed for _, rep in rows)
    print(f"{'all passed' if ok else 'FAILURES'} in {time.time() - t0:.1f}s")
    return 0 if ok else 2


def cmd_synth(args) -> int:
    from .data import write_synthetic

    cfg = _config(args)
    changes = {k: getattr(args, k) for k in ("per_class", "test_per_class", "num_classes", "noise_level",
                                             "ambiguity_rate") if getattr(args, k) is not None}
    cfg = cfg.replace(**changes)
    out = args.out or args.data_dir
    if not out:
        raise UsageError("synth requires --out or --data-dir")
    manifest = write_synthetic(out, cfg)
    print(f"wrote {cfg.num_classes * cfg.per_class} train / {cfg.num_classes * cfg.test_per_class} test "
          f"samples ({', '.join(manifest.class_names)}) to {out}")
    return 0


def cmd_export(args) -> int:
    from .data import load_split
    from .evaluation import export_features

    _need(args, "data_dir", "checkpoint")
    model = _load_model(args)
    ds = load_split(args.data_dir, args.split)
    out = Path(args.out)
    _, _, var = export_features(ds, model, out)
    print(f"wrote {len(ds)} feature rows to {out} and PCA to {out.with_name(out.stem + '_pca.csv')} "
          f"(variances {var[0]:.4g}, {var[1] if len(var) > 1 else 0:.4g})")
    return 0


def cmd_ablate(args) -> int:
    from .data import load_split, synth_splits
    from .evaluation import AblationGrid, run_ablation

    cfg = _config(args)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    grid = {"mgei-hdss": AblationGrid.mgei_hdss, "text": AblationGrid.text_modes,
            "patch": AblationGrid.patch_sizes}[args.grid](seeds)
    if args.data_dir:
        train, test = load_split(args.data_dir, "train"), load_split(args.data_dir, "test")

        def data(seed):
            return train, test
    else:
        def data(seed):
            return synth_splits(cfg, seed)

    rows = run_ablation(grid, cfg, data, args.out,
                        progress=lambda f, s, a: print(f"  {f} seed={s} acc={a:.4f}", flush=True))
    for r in rows:
        label = ", ".join(f"{k}={v}" for k, v in r.items() if k not in ("accuracy", "per_seed", "config_diff"))
        print(f"{label}: {100 * r['accuracy']:.2f}%")
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth, "export-features": cmd_export, "ablate": cmd_ablate}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "ferformer: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        from .trainer import thread_limit

        with thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (FERFormerError, OSError, KeyError, ValueError, IndexError) as exc:
        print(f"ferformer: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
