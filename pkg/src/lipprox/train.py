"""Model builders and the cross-entropy training loop."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .layers import (
    DPMHA,
    L2MHA,
    Activation,
    Conv2D,
    Flatten,
    Linear,
    Network,
    PatchEmbed,
    Residual,
    TokenMeanPool,
)
from .numerics import make_rng

__all__ = [
    "TrainingDiverged",
    "softmax_cross_entropy",
    "accuracy",
    "predict",
    "sgd_epochs",
    "build_mlp",
    "build_conv",
    "build_toy_vit",
]


_F32_MAX = float(np.finfo(np.float32).max)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good=None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history or []


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def predict(net: Network, x, batch_size: int = 1000) -> np.ndarray:
    x = np.asarray(x)
    out = [net.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1)


def accuracy(net: Network, x, y, batch_size: int = 1000) -> float:
    if len(x) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(net, x, batch_size) == np.asarray(y)))


def sgd_epochs(net: Network, x, y, epochs: int, lr: float, batch_size: int = 128,
               momentum: float = 0.9, seed: int = 0, track_accuracy: bool = False,
               param_filter=None) -> list[dict]:
    """Mini-batch SGD with heavy-ball momentum, updating ``net`` in place.

    Raises :class:`TrainingDiverged` (carrying a copy of the last finite
    weights) if the loss stops being finite.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    rng = make_rng(seed)
    velocity = {}
    history = []
    for epoch in range(epochs):
        snapshot = net.copy()
        order = rng.permutation(len(x))
        total, seen = 0.0, 0
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            logits, caches = net.forward_cached(x[idx])
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", snapshot, history)
            _, grads = net.backward(dlogits, caches)
            params = net.named_params()
            for name, g in grads.items():
                if param_filter is not None and not param_filter(name):
                    continue
                v = momentum * velocity.get(name, 0.0) + g
                velocity[name] = v
                new = params[name].astype(np.float64) - lr * v
                if not np.all(np.abs(new) <= _F32_MAX):  # also catches NaN
                    raise TrainingDiverged(f"non-finite weights in epoch {epoch}", snapshot, history)
                net.set_param(name, new)
            total += loss * len(idx)
            seen += len(idx)
        rec = {"epoch": epoch, "loss": total / seen}
        if track_accuracy:
            rec["accuracy"] = accuracy(net, x, y)
        history.append(rec)
    return history


def _he(rng, fan_out, fan_in):
    return rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)


def build_mlp(input_shape: Sequence[int], hidden: Sequence[int], num_classes: int, seed: int = 0,
              activation: str = "relu", name: str = "mlp") -> Network:
    rng = make_rng(seed)
    layers = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [Linear(_he(rng, h, width), np.zeros(h)), Activation(activation)]
        width = h
    layers.append(Linear(_he(rng, num_classes, width) * math.sqrt(0.5), np.zeros(num_classes)))
    return Network(layers, tuple(input_shape), num_classes, name=name, seed=seed, provenance="init")


def build_conv(input_shape: Sequence[int], channels: Sequence[int], hidden: Sequence[int],
               num_classes: int, seed: int = 0, name: str = "conv") -> Network:
    """Conv stack in the 4C3F pattern: pairs of (3x3 stride 1, 4x4 stride 2) convs."""
    rng = make_rng(seed)
    layers = []
    c_in = input_shape[0]
    for k, c_out in enumerate(channels):
        ksize, stride = (3, 1) if k % 2 == 0 else (4, 2)
        fan_in = c_in * ksize * ksize
        w = rng.standard_normal((c_out, c_in, ksize, ksize)) * math.sqrt(2.0 / fan_in)
        layers += [Conv2D(w, np.zeros(c_out), stride=stride, padding=1), Activation("relu")]
        c_in = c_out
    layers.append(Flatten())
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    width = shape[0]
    for h in hidden:
        layers += [Linear(_he(rng, h, width), np.zeros(h)), Activation("relu")]
        width = h
    layers.append(Linear(_he(rng, num_classes, width) * math.sqrt(0.5), np.zeros(num_classes)))
    return Network(layers, tuple(input_shape), num_classes, name=name, seed=seed, provenance="init")


def build_toy_vit(input_shape: Sequence[int], patch: int, depth: int, dim: int, heads: int,
                  mlp_ratio: int, num_classes: int, seed: int = 0, attention: str = "l2",
                  name: Optional[str] = None) -> Network:
    """Patch embedding, ``depth`` x (attention block, MLP block), mean pool, head.

    Blocks are residual; there is no normalisation layer.
    """
    if dim % heads:
        raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
    rng = make_rng(seed)
    if len(input_shape) == 1:
        n_tokens, pdim = input_shape[0] // patch, patch
    else:
        C, H, W = input_shape
        n_tokens, pdim = (H // patch) * (W // patch), C * patch * patch
    d = dim // heads
    layers = [PatchEmbed(rng.standard_normal((dim, pdim)) / math.sqrt(pdim), np.zeros(dim),
                         0.02 * rng.standard_normal((n_tokens, dim)), patch)]

    def proj():
        return rng.standard_normal((heads, d, dim)) / math.sqrt(dim)

    hidden = dim * mlp_ratio
    for _ in range(depth):
        if attention == "l2":
            attn = L2MHA(proj(), proj(), rng.standard_normal((dim, dim)) / math.sqrt(dim))
        elif attention == "dp":
            attn = DPMHA(proj(), proj(), proj(), rng.standard_normal((dim, dim)) / math.sqrt(dim))
        else:
            raise ValueError(f"unknown attention {attention!r}")
        layers.append(Residual([attn]))
        layers.append(Residual([
            Linear(rng.standard_normal((hidden, dim)) / math.sqrt(dim), np.zeros(hidden)),
            Activation("gelu"),
            Linear(rng.standard_normal((dim, hidden)) / math.sqrt(hidden) * 0.5, np.zeros(dim)),
        ]))
    layers += [TokenMeanPool(), Linear(rng.standard_normal((num_classes, dim)) / math.sqrt(dim), np.zeros(num_classes))]
    return Network(layers, tuple(input_shape), num_classes, name=name or f"vit-{attention}", seed=seed,
                   provenance="init")
