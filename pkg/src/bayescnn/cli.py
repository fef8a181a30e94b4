"""Command line entry point: ``bayescnn {train,eval,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .exceptions import ContractError, FormatError, ConsistencyError, NumericalError, ShapeError
from .models import ARCHITECTURES
from .trainer import DATASET_CLASSES, MODES, TrainConfig, evaluate, noise_sweep, train
from .uncertainty import NORMALIZERS

log = logging.getLogger("bayescnn")


def _gammas(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad gamma list {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("gammas must be a nonempty list of nonnegative numbers")
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="bayescnn", description="Bayesian CNNs with variational inference.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = TrainConfig()
    p = sub.add_parser("train", help="train a model and write metrics.csv and checkpoint.bcnn")
    p.add_argument("--arch", choices=ARCHITECTURES, default=defaults.arch)
    p.add_argument("--dataset", choices=sorted(DATASET_CLASSES), default=defaults.dataset)
    p.add_argument("--data-dir", default=defaults.data_dir)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--mc-samples", type=int, default=defaults.mc_samples)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--mode", choices=MODES, default=defaults.mode)
    p.add_argument("--train-n", type=int, default=0, help="training subset size (0 = all)")
    p.add_argument("--val-n", type=int, default=0, help="validation subset size (0 = all)")
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--eval-T", type=int, default=defaults.eval_T, help="passes for the per-epoch uncertainty")
    p.add_argument("--checkpoint-every", type=int, default=defaults.checkpoint_every)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="accuracy and uncertainty of a checkpoint; writes uncertainty.csv")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", choices=sorted(DATASET_CLASSES))
    p.add_argument("--data-dir")
    p.add_argument("--T", type=int, default=25)
    p.add_argument("--normalizer", choices=NORMALIZERS, default="softplus_n")
    p.add_argument("--n", type=int, default=0, help="number of test images (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--map", action="store_true", help="use posterior means only")
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("sweep", help="uncertainty under additive pixel noise; writes sweep.csv")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--gammas", type=_gammas, default=[0.0, 0.1, 0.2, 0.3])
    p.add_argument("--T", type=int, default=25)
    p.add_argument("--dataset", choices=sorted(DATASET_CLASSES))
    p.add_argument("--data-dir")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    return parser


def _run(args):
    if args.command == "train":
        config = TrainConfig(
            arch=args.arch, dataset=args.dataset, data_dir=args.data_dir, epochs=args.epochs,
            batch_size=args.batch_size, learning_rate=args.lr, mc_samples=args.mc_samples,
            weight_decay=args.weight_decay, seed=args.seed, eval_T=args.eval_T, train_n=args.train_n,
            val_n=args.val_n, mode=args.mode, checkpoint_every=args.checkpoint_every,
        )  # fmt: skip
        path, rows = train(config, args.out, resume=args.resume)
        last = rows[-1]
        print(f"epoch {last.epoch}: val_acc={last.val_acc:.4f} aleatoric={last.val_aleatoric:.6g} "
              f"epistemic={last.val_epistemic:.6g} -> {path}")  # fmt: skip
    elif args.command == "eval":
        res = evaluate(
            args.checkpoint, dataset=args.dataset, T=args.T, normalizer=args.normalizer,
            data_dir=args.data_dir, n=args.n, seed=args.seed, stochastic=not args.map, out_dir=args.out,
        )  # fmt: skip
        print(f"accuracy={res.accuracy:.4f} aleatoric={res.aleatoric:.6g} epistemic={res.epistemic:.6g} n={res.n}")
    else:
        rows = noise_sweep(
            args.checkpoint, gammas=args.gammas, T=args.T, dataset=args.dataset,
            data_dir=args.data_dir, n=args.n, seed=args.seed, out_dir=args.out,
        )  # fmt: skip
        for gamma, ale, epi in rows:
            print(f"gamma={gamma:g} aleatoric={ale:.6g} epistemic={epi:.6g}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except (ContractError, FormatError, ConsistencyError, ShapeError, NumericalError, OSError) as exc:
        print(f"bayescnn {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
