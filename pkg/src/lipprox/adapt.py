"""Replacing dot-product attention by L2 attention through logit distillation."""

from __future__ import annotations

import logging
import math

import numpy as np

from .layers import DPMHA, L2MHA, Network, Residual
from .numerics import make_rng

log = logging.getLogger(__name__)

__all__ = ["NothingToAdaptError", "l2_from_dp", "adapt_dp_to_l2"]


class NothingToAdaptError(ValueError):
    pass


def l2_from_dp(layer: DPMHA) -> L2MHA:
    """Initial L2 layer: ``w_qk`` from the query matrix, ``w_o`` copied.

    The value matrix is the least-squares solution that makes the L2 value
    path ``w_v' W^T W / sqrt(d)`` match the original ``w_v``.
    """
    H, d, D = layer.w_q.shape
    w_qk = np.array(layer.w_q, dtype=np.float64)
    w_v = np.empty((H, d, D))
    for h in range(H):
        gram = w_qk[h].T @ w_qk[h]
        w_v[h] = math.sqrt(d) * np.asarray(layer.w_v[h], dtype=np.float64) @ np.linalg.pinv(gram)
    return L2MHA(w_qk, w_v, np.array(layer.w_o, dtype=np.float64))


def _replace(layers, prefix, out):
    for k, layer in enumerate(layers):
        path = f"{prefix}{k}"
        if isinstance(layer, DPMHA):
            layers[k] = l2_from_dp(layer)
            out.append(path)
        elif isinstance(layer, Residual):
            _replace(layer.inner, f"{path}.", out)


def _distill_loss(student: Network, x, target, batch_size):
    total = 0.0
    for i in range(0, len(x), batch_size):
        diff = student.forward(x[i : i + batch_size]) - target[i : i + batch_size]
        total += float(np.sum(diff * diff))
    return total / x.shape[0]


def adapt_dp_to_l2(net: Network, data, epochs: int = 50, lr: float = 0.01, batch_size: int = 64,
                   momentum: float = 0.9, clip: float = 1.0, seed: int = 0):
    """Swap every DP attention layer for an L2 one and train only those.

    All other parameters are frozen. The loss is the mean over samples of the
    squared logit difference to the original network. Returns the adapted
    network and the per-epoch loss (index 0 is the loss before training).
    The gradient of the trainable parameters is rescaled to global norm at
    most ``clip``: the tied query/key path has steep curvature early on.
    """
    x = np.asarray(data, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    student = net.copy()
    replaced: list[str] = []
    _replace(student.layers, "", replaced)
    if not replaced:
        raise NothingToAdaptError("nothing to adapt")
    student.provenance = (net.provenance + "+adapt").lstrip("+")
    trainable = tuple(p + "." for p in replaced)

    target = np.concatenate([net.forward(x[i : i + 1000]) for i in range(0, len(x), 1000)])
    rng = make_rng(seed)
    losses = [_distill_loss(student, x, target, 1000)]
    velocity = {}
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            out, caches = student.forward_cached(x[idx])
            dout = 2.0 * (out - target[idx]) / len(idx)
            _, grads = student.backward(dout, caches)
            grads = {k: g for k, g in grads.items() if k.startswith(trainable)}
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            factor = clip / gnorm if gnorm > clip else 1.0
            params = student.named_params()
            for name, g in grads.items():
                g = g * factor
                v = momentum * velocity.get(name, 0.0) + g
                velocity[name] = v
                student.set_param(name, params[name].astype(np.float64) - lr * v)
        loss = _distill_loss(student, x, target, 1000)
        if not math.isfinite(loss):
            raise FloatingPointError(f"distillation loss became non-finite in epoch {epoch}")
        if loss > losses[-1]:
            log.warning("distillation loss increased in epoch %d: %.6g -> %.6g", epoch, losses[-1], loss)
        losses.append(loss)
    return student, losses
