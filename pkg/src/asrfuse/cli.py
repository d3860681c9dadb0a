"""Command-line entry point.

Subcommands mirror the pipeline stages: synth, pretrain, hypgen, train,
eval, ablate, compare-strong, report. All randomness hangs off --seed; the
data root comes from --data-root, the ASRFUSE_DATA environment variable, or
./asrfuse-data, in that order.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as P
from .training import PretrainBudget, TrainingDiverged


def _p(msg: str) -> None:
    print(msg, flush=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="asrfuse",
        description="Hypothesis-to-transcript error correction with a frozen "
                    "LM fused to an acoustic encoder through small adapters.")
    ap.add_argument("--data-root", default=None,
                    help="base directory for corpora, models, and runs "
                         f"(default: ${P.DATA_ROOT_ENV} or ./asrfuse-data)")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic corpus with splits")
    sp.add_argument("--out", default="corpus/main")
    sp.add_argument("--mode", choices=("structured", "diverse"), default="structured")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise-sigma", type=float, default=0.4)
    sp.add_argument("--n-train", type=int, default=P.DEFAULT_SPLITS["train"])
    sp.add_argument("--n-val", type=int, default=P.DEFAULT_SPLITS["val"])
    sp.add_argument("--n-test", type=int, default=P.DEFAULT_SPLITS["test"])

    sp = sub.add_parser("pretrain", help="train and freeze the base models")
    sp.add_argument("--corpus", default="corpus/main")
    sp.add_argument("--out", default="models/main")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lm-docs", type=int, default=None)
    sp.add_argument("--lm-epochs", type=int, default=None)
    sp.add_argument("--strong-epochs", type=int, default=None)
    sp.add_argument("--weak-epochs", type=int, default=None)
    sp.add_argument("--weak-frac", type=float, default=None)

    sp = sub.add_parser("hypgen", help="sample an n-best manifest for a split")
    sp.add_argument("--corpus", default="corpus/main")
    sp.add_argument("--models", default="models/main")
    sp.add_argument("--run", default="runs/main")
    sp.add_argument("--split", choices=("train", "val", "test"), required=True)
    sp.add_argument("--source", choices=("weak", "strong"), default="weak")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=40)
    sp.add_argument("--k", type=int, default=200)
    sp.add_argument("--n-select", type=int, default=15)
    sp.add_argument("--length-normalize", action="store_true",
                    help="rank hypotheses by per-token average log-prob")

    sp = sub.add_parser("train", help="train fusion adapters on a manifest")
    sp.add_argument("--corpus", default="corpus/main")
    sp.add_argument("--models", default="models/main")
    sp.add_argument("--run", default="runs/main")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ablation", choices=P.ABLATIONS, default=None)
    sp.add_argument("--no-masking", action="store_true",
                    help="shorthand for --ablation no-masking")
    sp.add_argument("--source", choices=("weak", "strong"), default="weak")
    sp.add_argument("--label", default=None)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--epochs", type=int, default=25)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--micro-batch", type=int, default=8)
    sp.add_argument("--patience", type=int, default=5)
    sp.add_argument("--override", action="store_true",
                    help="allow hyperparameters outside the pinned recipe")

    sp = sub.add_parser("eval", help="decode a split and report metrics")
    sp.add_argument("--run", default="runs/main")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--label", default=P.STANDARD_LABEL)
    sp.add_argument("--per-utterance", action="store_true",
                    help="average per-utterance WERs instead of pooling edits")
    sp.add_argument("--details", action="store_true")

    sp = sub.add_parser("ablate", help="standard + all ablations at one budget")
    sp.add_argument("--corpus", default="corpus/main")
    sp.add_argument("--models", default="models/main")
    sp.add_argument("--run", default="runs/ablate")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--epochs", type=int, default=2)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--micro-batch", type=int, default=8)
    sp.add_argument("--override", action="store_true")

    sp = sub.add_parser("compare-strong",
                        help="weak- vs strong-sourced hypotheses, side by side")
    sp.add_argument("--corpus", default="corpus/main")
    sp.add_argument("--models", default="models/main")
    sp.add_argument("--run", default="runs/compare")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--epochs", type=int, default=2)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--micro-batch", type=int, default=8)
    sp.add_argument("--count", type=int, default=40)
    sp.add_argument("--override", action="store_true")

    sp = sub.add_parser("report", help="render a run directory's artifacts")
    sp.add_argument("--run", default="runs/main")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    root = P.resolve_data_root(args.data_root)
    try:
        if args.command == "synth":
            out = P.run_synth(root, args.out, mode=args.mode, seed=args.seed,
                              noise_sigma=args.noise_sigma,
                              n_train=args.n_train, n_val=args.n_val,
                              n_test=args.n_test)
        elif args.command == "pretrain":
            overrides = {k: v for k, v in (
                ("lm_docs", args.lm_docs), ("lm_epochs", args.lm_epochs),
                ("strong_epochs", args.strong_epochs),
                ("weak_epochs", args.weak_epochs),
                ("weak_frac", args.weak_frac)) if v is not None}
            budget = PretrainBudget(**overrides)
            out = P.run_pretrain(root, args.corpus, args.out, seed=args.seed,
                                 budget=budget, log=_p)
        elif args.command == "hypgen":
            out = P.run_hypgen(root, args.corpus, args.models, args.run,
                               split=args.split, source=args.source,
                               seed=args.seed, count=args.count, k=args.k,
                               n_select=args.n_select,
                               length_normalize=args.length_normalize, log=_p)
        elif args.command == "train":
            ablation = args.ablation
            if args.no_masking:
                if ablation not in (None, "no-masking"):
                    raise P.PipelineError(
                        "--no-masking conflicts with --ablation " + ablation)
                ablation = "no-masking"
            out = P.run_train(root, args.corpus, args.models, args.run,
                              seed=args.seed, ablation=ablation,
                              source=args.source, label=args.label,
                              learning_rate=args.lr, epochs=args.epochs,
                              batch_size=args.batch_size,
                              micro_batch=args.micro_batch,
                              patience=args.patience, override=args.override,
                              log=_p)
        elif args.command == "eval":
            out = P.run_eval(root, args.run, split=args.split, label=args.label,
                             per_utterance=args.per_utterance,
                             collect_details=args.details, log=_p)
        elif args.command == "ablate":
            out = P.run_ablate(root, args.corpus, args.models, args.run,
                               seed=args.seed, learning_rate=args.lr,
                               epochs=args.epochs, batch_size=args.batch_size,
                               micro_batch=args.micro_batch,
                               override=args.override, log=_p)
        elif args.command == "compare-strong":
            out = P.run_compare_strong(root, args.corpus, args.models, args.run,
                                       seed=args.seed, learning_rate=args.lr,
                                       epochs=args.epochs,
                                       batch_size=args.batch_size,
                                       micro_batch=args.micro_batch,
                                       count=args.count,
                                       override=args.override, log=_p)
        elif args.command == "report":
            print(P.run_report(root, args.run))
            return 0
        else:  # pragma: no cover - argparse enforces the choices
            raise P.PipelineError(f"unknown command {args.command!r}")
    except (P.PipelineError, TrainingDiverged, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
