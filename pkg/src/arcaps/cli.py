"""Command-line entry point.

Subcommands: train, eval, analyze-align, analyze-perturb, count-params,
selftest. Exit codes: 0 success, 1 usage/configuration error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as cfgmod, netpbm, selftest
from .data import load_cifar10, load_idx
from .errors import ComputationError, ConfigurationError, InputDataError
from .model import count_parameters
from .train import evaluate, load_model, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def _build_parser():
    parser = _Parser(prog="arcaps", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="path to a section.key = value config file")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--epochs", type=int, help="override train.epochs")
        p.add_argument("--batch-size", type=int, help="override train.batch_size")
        p.add_argument("--out-dir", help="override train.out_dir")
        p.add_argument("--workers", type=int, help="override train.workers")
        p.add_argument("--samples", type=int, help="override analyze.samples")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint to load")

    common(sub.add_parser("train", help="train a model and checkpoint the best epoch"))
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test set"),
           checkpoint=True)
    common(sub.add_parser("analyze-align",
                          help="alignment-ratio tables, cosine histograms, baselines"),
           checkpoint=True)
    common(sub.add_parser("analyze-perturb",
                          help="per-dimension perturbation reconstruction grids"),
           checkpoint=True)
    common(sub.add_parser("count-params", help="print the parameter-count breakdown"))
    common(sub.add_parser("selftest", help="gradient checks and oracle comparisons"))
    return parser


def _load_run_config(args):
    cfg = cfgmod.RunConfig()
    if args.config:
        cfg = cfgmod.parse_file(args.config)
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "out_dir": args.out_dir, "workers": args.workers, "samples": args.samples,
    }
    lines = []
    for attr, value in overrides.items():
        if value is not None:
            key = cfgmod._ATTR_TO_KEY[attr]
            lines.append(f"{key} = {value}")
    if lines:
        cfg = cfgmod.parse_lines(lines, base=cfg, source="<flags>")
    return cfg


def _dataset(cfg: cfgmod.RunConfig, split):
    root = Path(cfg.resolved_data_dir())
    if cfg.kind == "mnist":
        if split == "train":
            return load_idx(root / cfg.train_images, root / cfg.train_labels, "train")
        return load_idx(root / cfg.test_images, root / cfg.test_labels, "test")
    if split == "train":
        paths = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
        paths = [p for p in paths if p.exists()] or [root / "data_batch_1.bin"]
        return load_cifar10(paths, "train")
    return load_cifar10(root / "test_batch.bin", "test")


def _pad_dataset(ds, cfg):
    if not cfg.pad_to:
        return ds
    from .data import pad_dataset

    return pad_dataset(ds, cfg.pad_to, cfg.pad_to)


def _echo_config(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfgmod.serialize(cfg), encoding="utf-8")


def _cmd_train(args):
    cfg = _load_run_config(args)
    _echo_config(cfg, cfg.out_dir)
    dataset = _dataset(cfg, "train")
    run = train(cfg, dataset, progress=print)
    print(f"best validation error {run.best_val_error:.4f} "
          f"(epoch {run.best_epoch}); checkpoints in {cfg.out_dir}")
    return EXIT_OK


def _cmd_eval(args):
    cfg = _load_run_config(args)
    model, ckpt_cfg, _ = load_model(args.checkpoint)
    data_cfg = cfg if args.config else ckpt_cfg
    dataset = _pad_dataset(_dataset(data_cfg, "test"), ckpt_cfg)
    result = evaluate(model, dataset, data_cfg.batch_size)
    print(f"accuracy {result.accuracy:.4f}")
    print(f"loss total {result.total_loss:.6f} margin {result.margin_loss:.6f} "
          f"recon {result.recon_loss:.6f}")
    print("confusion rows=true cols=predicted:")
    for row in result.confusion:
        print(" ".join(f"{v:6d}" for v in row))
    return EXIT_OK


def _cmd_analyze_align(args):
    cfg = _load_run_config(args)
    model, ckpt_cfg, _ = load_model(args.checkpoint)
    data_cfg = cfg if args.config else ckpt_cfg
    out = Path(cfg.out_dir if args.out_dir or args.config else ckpt_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _pad_dataset(_dataset(data_cfg, "test"), ckpt_cfg)
    samples = args.samples if args.samples is not None else data_cfg.samples

    report = analysis.alignment_experiment(
        model, dataset, samples, data_cfg.families, seed=data_cfg.seed)
    (out / "alignment_ratios.csv").write_text(report.to_csv(), encoding="utf-8")

    hists = analysis.cosine_histogram(report)
    for pair, (centers, counts, _) in hists.items():
        lines = ["bin_center,count"]
        lines += [f"{c:.4f},{n}" for c, n in zip(centers, counts)]
        (out / f"cosine_{pair}.csv").write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")

    d = model.config.out_dim
    mean, std = analysis.random_baseline(dim=d, vectors=5, trials=1000,
                                         seed=data_cfg.seed)
    fit_mean, fit_std = analysis.random_baseline_fitted(
        dim=d, vectors=5, trials=1000, seed=data_cfg.seed)
    (out / "random_baseline.csv").write_text(
        "baseline,mean,std\n"
        f"reference_recipe,{mean:.6f},{std:.6f}\n"
        f"fitted_procedure,{fit_mean:.6f},{fit_std:.6f}\n",
        encoding="utf-8")

    overall = report.overall_mean()
    print(f"mean alignment ratio over {samples} samples: {overall:.4f}")
    print(f"random baseline (reference recipe, D={d}): {mean:.4f} +- {std:.4f}")
    print(f"random baseline (fitted procedure, D={d}): {fit_mean:.4f} +- {fit_std:.4f}")
    print(f"tables in {out}")
    return EXIT_OK


def _cmd_analyze_perturb(args):
    cfg = _load_run_config(args)
    model, ckpt_cfg, _ = load_model(args.checkpoint)
    data_cfg = cfg if args.config else ckpt_cfg
    out = Path(cfg.out_dir if args.out_dir or args.config else ckpt_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _pad_dataset(_dataset(data_cfg, "test"), ckpt_cfg)

    dims = data_cfg.dimensions or tuple(range(model.config.out_dim))
    mc = model.config
    written = 0
    for class_id in range(mc.classes):
        hits = np.nonzero(dataset.labels == class_id)[0]
        if hits.size == 0:
            continue
        image = dataset.images[int(hits[0])]
        for dim in dims:
            sweep = analysis.perturb_and_decode(model, image, dim, label=class_id)
            strip = analysis.sweep_strip(
                sweep, mc.input_width, mc.input_height, mc.input_channels)
            netpbm.write_image(out / f"perturb_class{class_id}_dim{dim}.pgm"
                               if mc.input_channels == 1
                               else out / f"perturb_class{class_id}_dim{dim}.ppm",
                               strip)
            written += 1
    print(f"wrote {written} perturbation grids to {out}")
    return EXIT_OK


def _cmd_count_params(args):
    cfg = _load_run_config(args)
    total, rows = count_parameters(cfg.model_config())
    width = max(len(name) for name, _ in rows)
    for name, n in rows:
        print(f"{name:<{width}}  {n:>12,d}")
    print(f"{'total':<{width}}  {total:>12,d}")
    return EXIT_OK


def _cmd_selftest(args):
    failures = selftest.run(report=print)
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze-align": _cmd_analyze_align,
    "analyze-perturb": _cmd_analyze_perturb,
    "count-params": _cmd_count_params,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputDataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ComputationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    raise SystemExit(main())
