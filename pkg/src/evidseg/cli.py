"""Command-line entry point: ``evidseg <command> [flags]``.

Exit codes: 0 success, 1 check failure, 2 config/usage error, 3 I/O error,
4 data-contract violation.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck, nn_engine, ood_metrics, synthetic_data
from .config import ConfigError, RunConfig, load_config
from .dirichlet_core import DirichletParams
from .losses import kl_to_prior_pixel

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    try:
        return load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc


def _load_data(path):
    try:
        return synthetic_data.load_dataset(path)
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        raise CliError(EXIT_IO, f"cannot load dataset: {exc}") from exc
    except synthetic_data.DatasetFormatError as exc:
        raise CliError(EXIT_IO, f"corrupt dataset: {exc}") from exc


def _load_net(path):
    try:
        return nn_engine.load_checkpoint(Path(path))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}") from exc
    except nn_engine.CheckpointError as exc:
        raise CliError(EXIT_IO, f"bad checkpoint: {exc}") from exc


def _mkdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from exc
    return out


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    data_cfg = cfg.data
    if args.seed is not None:
        data_cfg = replace(data_cfg, seed=args.seed)
    out = _mkdir(args.out)
    try:
        splits = synthetic_data.generate_dataset(data_cfg, out, workers=args.workers)
    except synthetic_data.GenerationError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from exc
    print(f"wrote {len(splits.train)} train / {len(splits.eval)} eval samples to {out} "
          f"(config hash {splits.manifest['config_hash']})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = _load_data(args.data)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if splits.num_classes != cfg.model.num_classes:
        raise CliError(
            EXIT_DATA,
            f"dataset has {splits.num_classes} classes but the model config expects {cfg.model.num_classes}",
        )
    if not splits.train:
        raise CliError(EXIT_DATA, f"{args.data} has no training split")
    images, labels, masks = synthetic_data.stack(splits.train)
    out = _mkdir(args.out)
    try:
        (out / "run_config.ini").write_text(cfg.echo())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write run config: {exc}") from exc
    try:
        # single BLAS thread keeps reductions in a fixed order
        with threadpool_limits(limits=1):
            result = nn_engine.train(images, labels, train_cfg, cfg.model, out, ood_masks=masks)
    except nn_engine.DataContractError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write training output: {exc}") from exc
    if result.log:
        print(f"iteration {result.log[-1][0]}: loss {result.log[-1][1].total:.6f}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def _methods(text: str | None, default) -> tuple[str, ...]:
    if text is None:
        return tuple(default)
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    if not names:
        raise CliError(EXIT_USAGE, f"--methods is empty; valid: {', '.join(sorted(ood_metrics.METHODS))}")
    bad = [m for m in names if m not in ood_metrics.METHODS]
    if bad:
        raise CliError(
            EXIT_USAGE, f"unknown method(s) {', '.join(bad)}; valid: {', '.join(sorted(ood_metrics.METHODS))}"
        )
    return names


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    methods = _methods(args.methods, cfg.methods)
    if args.workers < 1:
        raise CliError(EXIT_USAGE, "--workers must be >= 1")
    net = _load_net(args.checkpoint)
    splits = _load_data(args.data)
    try:
        reports = ood_metrics.evaluate(net, splits.eval, methods, cfg.thresholds, args.workers, cfg.ece_bins)
    except ood_metrics.MetricError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    table = ood_metrics.format_report(reports)
    if args.out:
        try:
            Path(args.out).write_text(table)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write report: {exc}") from exc
    sys.stdout.write(table)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise CliError(EXIT_USAGE, f"--trials must be >= 1, got {args.trials}")
    result = gradcheck.run_grad_check(args.trials, 0 if args.seed is None else args.seed)
    for name, err in result.max_rel_error.items():
        print(f"{name:12s} max_rel_error={err:.3e}")
    for line in result.failures:
        print(f"FAIL {line}")
    print(f"{'PASS' if result.passed else 'FAIL'}: {result.trials} trials, tolerance {gradcheck.REL_TOL:g}")
    return EXIT_OK if result.passed else EXIT_CHECK


KL_TABLE_ALPHAS = ((1, 1), (2, 1), (5, 1), (20, 1), (1, 1, 1), (2, 1, 1), (10, 1, 1), (3, 3, 3), (50, 1, 1, 1, 1))


def cmd_kl_table(args) -> int:
    priors = [float(v) for v in args.prior.split(",")]
    if not priors or any(not (a > 0) for a in priors):
        raise CliError(EXIT_USAGE, "--prior values must be > 0")
    print("\t".join(["alpha"] + [f"a0={a:g}" for a in priors]))
    for alpha in KL_TABLE_ALPHAS:
        params = DirichletParams.from_alpha(alpha)
        row = [f"{kl_to_prior_pixel(params, a0):.6f}" for a0 in priors]
        print("\t".join([",".join(str(a) for a in alpha)] + row))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    net = _load_net(args.checkpoint)
    if args.image is not None:
        try:
            raw = ood_metrics.read_pgm(args.image) if args.image.endswith(".pgm") else np.load(args.image)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_IO, f"cannot read image: {exc}") from exc
        image = np.asarray(raw, dtype=np.float32)
        if image.ndim == 2:
            # grayscale PGM input, replicated to three channels
            image = np.repeat((image / image.max() if image.max() > 0 else image)[None], 3, axis=0)
    else:
        splits = _load_data(args.data)
        if not 0 <= args.index < len(splits.eval):
            raise CliError(EXIT_USAGE, f"--index {args.index} out of range for {len(splits.eval)} eval images")
        image = splits.eval[args.index].image
    if image.shape[0] != net.config.in_channels:
        raise CliError(EXIT_DATA, f"image has {image.shape[0]} channels, network expects {net.config.in_channels}")
    belief = nn_engine.predict(net, image)
    try:
        ood_metrics.write_pgm16(args.out, belief.uncertainty)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write heatmap: {exc}") from exc
    print(f"wrote {args.out} (mean uncertainty {float(belief.uncertainty.mean()):.6f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evidseg", description="Evidential segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the shapes dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score the eval split")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--methods")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="compare analytic and numeric loss gradients")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("kl-table", help="print KL to the symmetric prior for a few concentrations")
    p.add_argument("--prior", default="1,0.25")
    p.set_defaults(func=cmd_kl_table)

    p = sub.add_parser("heatmap", help="export an uncertainty map as 16-bit PGM")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--index", type=int, help="eval image index (needs --data)")
    src.add_argument("--image", help=".npy (3,H,W) array or .pgm file")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "index", None) is not None and args.data is None:
        print("error: --index requires --data", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
