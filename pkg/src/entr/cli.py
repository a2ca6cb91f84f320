"""Command-line entry point: ``entr <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, echo_config, parse_config, validate
from .data import save_image_folder, split
from .errors import ConfigError, EntrError, IngestionError, ReportError, SpecError
from .experiment import (checkpoint_name, dataset_name, execute_cell, load_datasets, record_name,
                         run_experiment, sha256_file)
from .model import ResNetConfig, build_resnet, load_checkpoint, save_checkpoint, set_frozen
from .optim import lr_find
from .regimes import REGIME_KINDS, batch_loss, cycle_batches, pretrain_source
from .report import write_report
from .synthetic import generate_synthetic

log = logging.getLogger("entr")

EXIT_OK, EXIT_USAGE, EXIT_RUN = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="entr", description="Progressive image-resizing training experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment config file (TOML); defaults apply when omitted")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--time-unit", choices=("wall", "mac"), help="time unit T for standardized accuracy")

    sp = sub.add_parser("synth", help="write the configured synthetic dataset as an image folder")
    common(sp, "destination directory")

    sp = sub.add_parser("lr-find", help="run the learning-rate range test and write lrfind.csv")
    common(sp, "output directory for lrfind.csv")
    sp.add_argument("--model", help="model variant (default: first configured model)")
    sp.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh network")

    sp = sub.add_parser("train", help="run a single (model, regime, seed) cell")
    common(sp, "output directory")
    sp.add_argument("--model", help="model variant (default: first configured model)")
    sp.add_argument("--regime", choices=REGIME_KINDS, help="regime (default: first configured regime)")

    sp = sub.add_parser("experiment", help="run the full model x regime x seed grid")
    common(sp, "output directory (default: experiment.output)")
    sp.add_argument("--parallel", type=int, help="worker processes for grid cells")

    sp = sub.add_parser("report", help="tabulate records and draw fig4.svg / fig5.svg")
    sp.add_argument("run_dir", help="directory holding run-*.record files")
    sp.add_argument("--out", help="destination (default: run_dir)")
    sp.add_argument("--time-unit", choices=("wall", "mac"), help="time unit (default: the records' own)")
    return p


def _load_config(args) -> ExperimentConfig:
    config = parse_config(Path(args.config)) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "time_unit", None):
        changes["time_unit"] = args.time_unit
    if getattr(args, "parallel", None) is not None:
        changes["parallel"] = args.parallel
    if getattr(args, "out", None):
        changes["output"] = args.out
    if changes:
        config = dataclasses.replace(config, **changes)
        validate(config)
    return config


def cmd_synth(args) -> int:
    config = _load_config(args)
    syn = config.dataset.synthetic
    seed = args.seed if args.seed is not None else syn.target_seed
    dataset = generate_synthetic(syn.spec(), seed)
    out = Path(args.out or "synthetic")
    save_image_folder(dataset, out)
    print(f"wrote {len(dataset)} images in {dataset.num_classes} classes to {out}")
    return EXIT_OK


def cmd_lr_find(args) -> int:
    config = _load_config(args)
    seed = config.seeds[0]
    variant = args.model or config.models[0]
    target, _ = load_datasets(config)
    train, _ = split(target, config.dataset.train_fraction, config.dataset.split_seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_resnet(ResNetConfig.from_variant(variant, target.num_classes,
                                                       config.budget.head_dropout, target.channels), seed)
    set_frozen(model, ("early", "late", "head"), False)
    rng = np.random.default_rng(seed)
    pipe = config.pipeline
    batches = cycle_batches(train, config.dataset.max_resolution, config.budget.batch_size, seed, pipe.policy)
    result = lr_find(model, batches, lambda m, b: batch_loss(m, b, rng),
                     pipe.lr_find_lo, pipe.lr_find_hi, pipe.lr_find_steps,
                     momentum=pipe.momentum, weight_decay=pipe.weight_decay)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "lrfind.csv")
    print(f"suggested lr {result.suggested_lr!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    variant = args.model or config.models[0]
    regime = args.regime or config.regimes[0]
    seed = config.seeds[0]
    out = Path(config.output)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "effective-config.toml").write_text(echo_config(config))
    target, source = load_datasets(config)
    ckpt = out / "checkpoints" / checkpoint_name(variant, seed)
    if not ckpt.exists():
        cfg = ResNetConfig.from_variant(variant, source.num_classes, config.budget.head_dropout, source.channels)
        pre = pretrain_source(cfg, source, config.pretrain.epochs, seed, config.pretrain.lr,
                              config.budget.batch_size, config.dataset.max_resolution, config.pipeline)
        save_checkpoint(pre.model, ckpt)
    path = out / record_name(variant, regime, seed)
    rec = execute_cell(config, target, ckpt, sha256_file(ckpt), variant, regime, seed, path)
    print(f"{dataset_name(config)} {variant} {regime} seed {seed}: sub-total {rec.subtotal_accuracy:.4f} "
          f"total {rec.total_accuracy:.4f} T {rec.T():.6g} A_s_total {rec.A_s_total:.6g}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _load_config(args)
    result = run_experiment(config)
    ok = len(result.cells) - len(result.failures)
    print(f"{ok}/{len(result.cells)} cells complete in {result.out_dir}")
    for c in result.failures:
        print(f"failed: {c.model} {c.regime} seed {c.seed}: {c.error}", file=sys.stderr)
    return EXIT_RUN if result.failures else EXIT_OK


def cmd_report(args) -> int:
    report = write_report(args.run_dir, args.out, args.time_unit)
    for model, regime in sorted(report.best_regime.items()):
        print(f"{model}: best regime by mean A_s_total is {regime}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "lr-find": cmd_lr_find,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SpecError) as exc:
        print(f"entr: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ReportError, IngestionError) as exc:
        print(f"entr: {exc}", file=sys.stderr)
        return EXIT_RUN
    except EntrError as exc:
        print(f"entr: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
