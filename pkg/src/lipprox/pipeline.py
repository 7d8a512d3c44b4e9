"""Experiment stages: data, pretraining, constraining, certification, reports."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .certify import CSV_COLUMNS, CertReport, evaluate
from .checkpoint import save_checkpoint
from .config import DatasetConfig, ExperimentConfig, ModelConfig
from .constrain import certvit_network, fine_tune
from .data import load_mnist_idx, synth_blobs, train_test_split
from .layers import Network, network_lipschitz
from .numerics import GELU_LIPSCHITZ_ROUNDED
from .train import accuracy, build_conv, build_mlp, build_toy_vit, sgd_epochs

log = logging.getLogger(__name__)

__all__ = [
    "load_dataset",
    "build_model",
    "pretrain",
    "constrain_stage",
    "finetune_stage",
    "certify_stage",
    "run_experiment",
    "emit_report",
    "read_reports",
]


def load_dataset(cfg: DatasetConfig):
    """``((x_train, y_train), (x_test, y_test))``; MNIST images are ``(1, 28, 28)``."""
    if cfg.kind == "blobs":
        x, y = synth_blobs(cfg.seed, cfg.n, cfg.classes, cfg.dim, cfg.spread)
        n_test = min(cfg.n_test, len(x) // 2)
        return train_test_split(x, y, n_test, cfg.split_seed)
    x, y = load_mnist_idx(cfg.images, cfg.labels)
    x = x[:, None]
    if cfg.test_images:
        xt, yt = load_mnist_idx(cfg.test_images, cfg.test_labels)
        return (x[: cfg.n_train], y[: cfg.n_train]), (xt[: cfg.n_test, None], yt[: cfg.n_test])
    (xtr, ytr), (xte, yte) = train_test_split(x, y, min(cfg.n_test, len(x) // 2), cfg.split_seed)
    return (xtr[: cfg.n_train], ytr[: cfg.n_train]), (xte, yte)


def build_model(cfg: ModelConfig, input_shape, num_classes: int, seed: int) -> Network:
    if cfg.kind == "mlp":
        return build_mlp(input_shape, cfg.hidden, num_classes, seed)
    if cfg.kind == "conv":
        return build_conv(input_shape, cfg.channels, cfg.hidden, num_classes, seed)
    return build_toy_vit(input_shape, cfg.patch, cfg.layers, cfg.embed_dim, cfg.heads, cfg.mlp_ratio,
                         num_classes, seed, attention=cfg.attention)


def _num_classes(cfg: ExperimentConfig, y) -> int:
    return cfg.dataset.classes if cfg.dataset.kind == "blobs" else 10


def _gelu_constant(cfg: ExperimentConfig) -> Optional[float]:
    return GELU_LIPSCHITZ_ROUNDED if cfg.constrain.gelu == "rounded" else None


def pretrain(cfg: ExperimentConfig, data=None, checkpoint: Optional[Path] = None):
    """Standard cross-entropy training from a seeded initialisation.

    Saves a checkpoint when ``checkpoint`` is given and returns the network
    with a summary dict (final clean accuracy and bound).
    """
    (xtr, ytr), (xte, yte) = data if data is not None else load_dataset(cfg.dataset)
    p = cfg.pretrain
    net = build_model(cfg.model, xtr.shape[1:], _num_classes(cfg, ytr), p.seed)
    history = sgd_epochs(net, xtr, ytr, p.epochs, p.lr, p.batch_size, p.momentum, p.seed)
    net.provenance = "pretrain"
    info = {
        "loss": history[-1]["loss"] if history else float("nan"),
        "clean_acc": accuracy(net, xte, yte),
        "lipschitz": network_lipschitz(net, _gelu_constant(cfg)),
    }
    log.info("pretrained %s: clean accuracy %.4f, Lipschitz bound %.6g", net.name, info["clean_acc"],
             info["lipschitz"])
    if checkpoint is not None:
        save_checkpoint(net, checkpoint)
    return net, info


def constrain_stage(net: Network, cfg: ExperimentConfig, data, finetune: bool = True):
    """Constrain every matrix from traces of the training inputs, then fine-tune."""
    (xtr, ytr), _ = data
    c = cfg.constrain
    n = c.trace_samples if c.trace_samples > 0 else len(xtr)
    new, report = certvit_network(net, xtr[:n], c.algorithm(), T=c.T)
    new.provenance = (net.provenance + "+constrain").lstrip("+")
    if finetune and c.finetune_epochs > 0:
        new, report["finetune"] = finetune_stage(new, cfg, data)
        report["lipschitz_final"] = network_lipschitz(new)
    return new, report


def finetune_stage(net: Network, cfg: ExperimentConfig, data):
    (xtr, ytr), _ = data
    c = cfg.constrain
    tuned, info = fine_tune(net, xtr, ytr, c.finetune_epochs, c.finetune_lr, c.finetune_batch,
                            c.finetune_momentum, seed=cfg.pretrain.seed)
    tuned.provenance = (net.provenance + "+finetune").lstrip("+")
    return tuned, info


def certify_stage(net: Network, cfg: ExperimentConfig, data, eps: Optional[float] = None,
                  model: Optional[str] = None) -> CertReport:
    _, (xte, yte) = data
    e = cfg.evaluate
    if e.samples > 0:
        xte, yte = xte[: e.samples], yte[: e.samples]
    L = network_lipschitz(net, _gelu_constant(cfg))
    return evaluate(net, xte, yte, e.eps if eps is None else eps, steps=e.pgd_steps, restarts=e.restarts,
                    n_pairs=e.n_pairs, seed=cfg.pretrain.seed, model=model, lipschitz=L)


def run_experiment(cfg: ExperimentConfig, data=None, report_path=None):
    """Pretrain, certify the source, constrain plus fine-tune, certify again.

    Returns ``(source, constrained, reports, details)`` where ``reports``
    holds the source and constrained :class:`CertReport` rows; they are also
    appended to ``report_path`` when given.
    """
    data = data if data is not None else load_dataset(cfg.dataset)
    source, pre_info = pretrain(cfg, data)
    rep_src = certify_stage(source, cfg, data, model=f"{cfg.model.kind}-standard")
    constrained, con_info = constrain_stage(source, cfg, data)
    rep_con = certify_stage(constrained, cfg, data, model=f"{cfg.model.kind}-constrained")
    if report_path is not None:
        emit_report(rep_src, report_path)
        emit_report(rep_con, report_path)
    return source, constrained, [rep_src, rep_con], {"pretrain": pre_info, "constrain": con_info}


def emit_report(report: CertReport, path) -> None:
    """Append one CSV row, writing the header first if the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(CSV_COLUMNS)
        w.writerow(report.csv_row())


def read_reports(path) -> list[CertReport]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: not a report file (header {header})")
        return [CertReport.from_csv_row(row) for row in reader]
