"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files and configs), 3 numerical failure (divergence, infeasible constraint,
unsound certificate).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adapt import NothingToAdaptError, adapt_dp_to_l2
from .certify import CSV_COLUMNS, UnsoundCertificateError, pgd_attack
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .constrain import InfeasibleConstraintError, format_layer_reports
from .data import IdxError
from .layers import ShapeError
from .pipeline import (
    certify_stage,
    constrain_stage,
    emit_report,
    finetune_stage,
    load_dataset,
    pretrain,
    read_reports,
)
from .train import TrainingDiverged, accuracy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lipprox")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--in", dest="inp", type=Path, help="input checkpoint (report: CSV file)")
    common.add_argument("--out", type=Path, help="output path")
    common.add_argument("--eps", type=float, help="l2 radius (default from the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lipprox", description="Lipschitz-bound reduction and certification.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    helps = {
        "pretrain": "train a standard network and save a checkpoint",
        "adapt": "replace dot-product attention by L2 attention",
        "constrain": "lower the Lipschitz bound of every weight matrix",
        "finetune": "cross-entropy fine-tuning of a checkpoint",
        "certify": "clean, PGD and certified accuracy as a CSV row",
        "attack": "PGD accuracy; optionally save adversarial inputs (.npy)",
        "report": "print the rows of a CSV report",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.pretrain.seed = args.seed
        cfg.dataset.seed = args.seed
    return cfg


def _need(args, name):
    value = getattr(args, name)
    if value is None:
        flag = "--in" if name == "inp" else f"--{name}"
        raise UsageError(f"{args.command}: {flag} is required")
    return value


def _load(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _run(args) -> int:
    cmd = args.command
    if cmd == "report":
        path = _need(args, "inp")
        if not path.exists():
            raise FileNotFoundError(f"report not found: {path}")
        print(",".join(CSV_COLUMNS))
        for rep in read_reports(path):
            print(rep.to_csv_line(), end="")
        return EXIT_OK

    cfg = _config(args)
    if cmd == "pretrain":
        out = _need(args, "out")
        _, info = pretrain(cfg, checkpoint=out)
        print(f"clean_acc={info['clean_acc']!r}\nlipschitz={info['lipschitz']!r}\ncheckpoint={out}")
        return EXIT_OK

    net = _load(_need(args, "inp"))
    if cmd == "adapt":
        out = _need(args, "out")
        (xtr, _), _ = load_dataset(cfg.dataset)
        adapted, losses = adapt_dp_to_l2(net, xtr, cfg.adapt.epochs, cfg.adapt.lr, seed=cfg.pretrain.seed)
        save_checkpoint(adapted, out)
        print(f"distill_loss_initial={losses[0]!r}\ndistill_loss_final={losses[-1]!r}\ncheckpoint={out}")
        return EXIT_OK

    data = load_dataset(cfg.dataset)
    if cmd == "constrain":
        out = _need(args, "out")
        new, report = constrain_stage(net, cfg, data, finetune=False)
        save_checkpoint(new, out)
        print(format_layer_reports(report["layers"]))
        print(f"lipschitz_source={report['lipschitz_source']!r}\n"
              f"lipschitz_constrained={report['lipschitz_constrained']!r}\ncheckpoint={out}")
        return EXIT_OK
    if cmd == "finetune":
        out = _need(args, "out")
        tuned, info = finetune_stage(net, cfg, data)
        save_checkpoint(tuned, out)
        print(f"clean_acc={accuracy(tuned, *data[1])!r}\nlipschitz_before={info['lipschitz_before']!r}\n"
              f"lipschitz_after={info['lipschitz_after']!r}\ncheckpoint={out}")
        return EXIT_OK
    eps = cfg.evaluate.eps if args.eps is None else args.eps
    if eps < 0:
        raise UsageError("--eps must be nonnegative")
    if cmd == "certify":
        out = _need(args, "out")
        report = certify_stage(net, cfg, data, eps=eps, model=args.inp.stem)
        emit_report(report, out)
        print(report.to_kv())
        return EXIT_OK
    # attack
    _, (xte, yte) = data
    if cfg.evaluate.samples > 0:
        xte, yte = xte[: cfg.evaluate.samples], yte[: cfg.evaluate.samples]
    adv = pgd_attack(net, xte, yte, eps, cfg.evaluate.pgd_steps, restarts=cfg.evaluate.restarts,
                     seed=cfg.pretrain.seed)
    if args.out is not None:
        np.save(args.out, adv)
    print(f"eps={eps!r}\nclean_acc={accuracy(net, xte, yte)!r}\npgd_acc={accuracy(net, adv, yte)!r}")
    return EXIT_OK


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except UsageError as exc:
        print(f"lipprox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError, CheckpointError, IdxError, ConfigError,
            ShapeError, NothingToAdaptError) as exc:
        print(f"lipprox: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, InfeasibleConstraintError, UnsoundCertificateError, FloatingPointError) as exc:
        print(f"lipprox: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
