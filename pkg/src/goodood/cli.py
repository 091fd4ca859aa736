"""Command-line entry point: ``goodood <subcommand> [--config PATH] [--seed N] [--out DIR] [--force]``.

Exit codes: 0 success, 1 usage error, 2 missing artifact, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

SUBCOMMANDS = ("init", "gen-data", "train-diffusion", "train-classifier", "sample-ood",
               "finetune", "eval", "report", "run")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON (default: <out>/config.json if present)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", type=Path, help="override the run directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="goodood", description="Guided OOD synthesis pipeline on 2-D toy data")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("init", parents=[common], help="write a config with all defaults")
    sub.add_parser("gen-data", parents=[common], help="generate ID splits and OOD test sets")
    tr = sub.add_parser("train-diffusion", parents=[common], help="train the conditional denoiser")
    tr.add_argument("--T", type=int)
    tr.add_argument("--beta-1", type=float)
    tr.add_argument("--beta-T", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    sub.add_parser("train-classifier", parents=[common], help="train the ID classifier and embedding bank")
    sub.add_parser("sample-ood", parents=[common], help="balanced-grid guided OOD sampling")
    sub.add_parser("finetune", parents=[common], help="outlier-exposure fine-tuning")
    ev = sub.add_parser("eval", parents=[common], help="OOD detection reports")
    ev.add_argument("--model", choices=(*pipeline.MODELS, "all"), default="all")
    ev.add_argument("--score", choices=(*pipeline.SCORES, "all"), default="all")
    sub.add_parser("report", parents=[common], help="print and save the comparison summary")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    return p


def resolve_config(args) -> RunConfig:
    path = args.config
    if path is None and args.out is not None and (args.out / "config.json").exists():
        path = args.out / "config.json"
    cfg = RunConfig.load(path) if path is not None else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if getattr(args, "command", None) == "train-diffusion":
        d = cfg.diffusion
        for attr, val in (("T", args.T), ("beta_1", args.beta_1), ("beta_T", args.beta_T),
                          ("epochs", args.epochs), ("lr", args.lr)):
            if val is not None:
                setattr(d, attr, val)
    return cfg


def dispatch(args, cfg: RunConfig) -> None:
    cmd = args.command
    if cmd == "init":
        path = args.config or Path(cfg.out_dir) / "config.json"
        pipeline.init_config(cfg, path, args.force)
        print(f"wrote {path}")
    elif cmd == "gen-data":
        n = pipeline.gen_data(cfg, args.force)
        print(f"wrote {n['train']} train / {n['val']} val points and OOD test sets to {cfg.out_dir}/data")
    elif cmd == "train-diffusion":
        losses = pipeline.train_diffusion(cfg, args.force)
        print(f"denoiser trained, final loss {losses[-1]:.5f}")
    elif cmd == "train-classifier":
        rows = pipeline.train_classifier(cfg, args.force)
        print(f"classifier trained, val acc {rows[-1]['val_acc']:.4f}")
    elif cmd == "sample-ood":
        m = pipeline.sample_ood(cfg, args.force)
        for target, t in m["targets"].items():
            print(f"{target}: {t['n_configs']} configs, {t['generated_total']}/{t['planned_total']} "
                  f"samples, {t['aborted_total']} aborted")
    elif cmd == "finetune":
        rows = pipeline.finetune(cfg, args.force)
        last = rows[-1] if rows else {}
        print(f"fine-tuned {len(rows)} epochs, val acc {last.get('val_acc', float('nan')):.4f}")
    elif cmd == "eval":
        models = pipeline.MODELS if args.model == "all" else (args.model,)
        score_names = pipeline.SCORES if args.score == "all" else (args.score,)
        table = pipeline.evaluate(cfg, models, score_names, args.force)
        for r in table:
            print(f"{r['model']:<11} {r['test_set']:<17} {r['score']:<8} "
                  f"FPR95 {100 * r['fpr95']:6.2f}  AUROC {100 * r['auroc']:6.2f}  ID acc {100 * r['id_acc']:6.2f}")
    elif cmd == "report":
        print(pipeline.format_table(pipeline.report(cfg)))
    elif cmd == "run":
        print(pipeline.format_table(pipeline.run_all(cfg, args.force)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        dispatch(args, cfg)
    except pipeline.MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.OutputExistsError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
