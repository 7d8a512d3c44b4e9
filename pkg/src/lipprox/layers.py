"""Layer types, batched forward/backward passes and Lipschitz accounting.

Every layer consumes a batch ``x`` of shape ``(B, *in_shape)``. Parameters are
float32 arrays; forward and backward passes compute in float64. ``forward``
returns ``(out, cache)`` and ``backward(dout, cache)`` returns ``(dx, grads)``
with ``grads`` keyed by parameter name.

Attention layers act on token matrices ``(N, D)``; the norm used for Lipschitz
statements is the Euclidean norm of the flattened array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import lambertw

from .numerics import gelu, gelu_derivative, gelu_lipschitz_constant, spectral_norm

__all__ = [
    "ShapeError",
    "Layer",
    "Linear",
    "Conv2D",
    "Activation",
    "Flatten",
    "TokenMeanPool",
    "PatchEmbed",
    "L2MHA",
    "DPMHA",
    "Residual",
    "Network",
    "ACTIVATION_KINDS",
    "l2_attention_forward",
    "l2_attention_weights",
    "dp_attention_forward",
    "layer_lipschitz",
    "network_lipschitz",
    "l2_attention_lipschitz",
    "conv_matrix",
]

ACTIVATION_KINDS = ("relu", "gelu", "identity")

# Relative slack on power-iteration estimates so the bound stays an upper bound.
_BOUND_SLACK = 1e-7
_SN_ITERS = 1000
_SN_TOL = 1e-13


class ShapeError(ValueError):
    """Input does not match what a layer expects."""


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


class Layer:
    kind = "layer"

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def set_param(self, name: str, value) -> None:
        current = self.params()
        if name not in current:
            raise KeyError(f"{self.kind} has no parameter {name!r}")
        if np.shape(value) != current[name].shape:
            raise ShapeError(f"{name}: expected shape {current[name].shape}, got {np.shape(value)}")
        setattr(self, name, _f32(value))


@dataclass(eq=False)
class Linear(Layer):
    """``y = W x + b`` on the last axis (per token for token matrices)."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "linear"

    def __post_init__(self):
        self.weight = _f32(self.weight)
        self.bias = _f32(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"linear: bad parameter shapes {self.weight.shape}, {self.bias.shape}")

    def out_shape(self, in_shape):
        if in_shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear expects last dim {self.weight.shape[1]}, got {in_shape}")
        return tuple(in_shape[:-1]) + (self.weight.shape[0],)

    def forward(self, x):
        x = _f64(x)
        return x @ _f64(self.weight).T + _f64(self.bias), x

    def backward(self, dout, x):
        W = _f64(self.weight)
        xf = x.reshape(-1, x.shape[-1])
        df = dout.reshape(-1, dout.shape[-1])
        return dout @ W, {"weight": df.T @ xf, "bias": df.sum(axis=0)}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


def _im2col(x, kh, kw, stride, padding):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


@dataclass(eq=False)
class Conv2D(Layer):
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def __post_init__(self):
        self.weight = _f32(self.weight)
        self.bias = _f32(self.bias)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv2d: bad parameter shapes {self.weight.shape}, {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")

    def out_shape(self, in_shape):
        O, C, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != C:
            raise ShapeError(f"conv2d expects ({C}, H, W), got {in_shape}")
        Ho = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        Wo = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"conv2d kernel larger than padded input {in_shape}")
        return (O, Ho, Wo)

    def forward(self, x):
        x = _f64(x)
        O, C, kh, kw = self.weight.shape
        cols, Ho, Wo = _im2col(x, kh, kw, self.stride, self.padding)
        out = cols @ _f64(self.weight).reshape(O, -1).T + _f64(self.bias)
        out = out.transpose(0, 2, 1).reshape(x.shape[0], O, Ho, Wo)
        return out, (x.shape, cols, Ho, Wo)

    def backward(self, dout, cache):
        shape, cols, Ho, Wo = cache
        B, C, H, W = shape
        O, _, kh, kw = self.weight.shape
        s, p = self.stride, self.padding
        dm = dout.reshape(B, O, Ho * Wo).transpose(0, 2, 1)
        dW = np.einsum("bpo,bpk->ok", dm, cols).reshape(self.weight.shape)
        db = dm.sum(axis=(0, 1))
        dcols = (dm @ _f64(self.weight).reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
        return dx, {"weight": dW, "bias": db}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass(eq=False)
class Activation(Layer):
    act: str = "relu"
    kind = "activation"

    def __post_init__(self):
        if self.act not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.act!r}")

    def forward(self, x):
        x = _f64(x)
        if self.act == "relu":
            return np.maximum(x, 0.0), x
        if self.act == "gelu":
            return gelu(x), x
        return x, x

    def backward(self, dout, x):
        if self.act == "relu":
            return dout * (x > 0), {}
        if self.act == "gelu":
            return dout * gelu_derivative(x), {}
        return dout, {}


@dataclass(eq=False)
class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        x = _f64(x)
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), {}


@dataclass(eq=False)
class TokenMeanPool(Layer):
    """Average over the token axis: ``(N, D) -> (D,)``."""

    kind = "meanpool"

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"meanpool expects (N, D), got {in_shape}")
        return (in_shape[1],)

    def forward(self, x):
        x = _f64(x)
        return x.mean(axis=1), x.shape

    def backward(self, dout, shape):
        return np.broadcast_to(dout[:, None, :] / shape[1], shape).copy(), {}


def _patchify(x, in_shape, patch):
    B = x.shape[0]
    if len(in_shape) == 1:
        return x.reshape(B, in_shape[0] // patch, patch)
    C, H, W = in_shape
    x = x.reshape(B, C, H // patch, patch, W // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // patch) * (W // patch), C * patch * patch)


def _unpatchify(d, in_shape, patch):
    B = d.shape[0]
    if len(in_shape) == 1:
        return d.reshape(B, in_shape[0])
    C, H, W = in_shape
    d = d.reshape(B, H // patch, W // patch, C, patch, patch)
    return d.transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)


@dataclass(eq=False)
class PatchEmbed(Layer):
    """Non-overlapping patches, a shared linear projection, plus positions.

    Works on images ``(C, H, W)`` with square patches or on flat vectors
    ``(L,)`` cut into chunks of ``patch`` entries.
    """

    weight: np.ndarray  # (D, patch_dim)
    bias: np.ndarray  # (D,)
    pos: np.ndarray  # (N, D)
    patch: int = 1
    kind = "patch_embed"

    def __post_init__(self):
        self.weight = _f32(self.weight)
        self.bias = _f32(self.bias)
        self.pos = _f32(self.pos)
        if self.pos.ndim != 2 or self.pos.shape[1] != self.weight.shape[0]:
            raise ShapeError("patch_embed: positional table must be (N, D)")

    def n_tokens(self, in_shape) -> int:
        if len(in_shape) == 1:
            if in_shape[0] % self.patch:
                raise ShapeError(f"patch {self.patch} does not divide length {in_shape[0]}")
            return in_shape[0] // self.patch
        C, H, W = in_shape
        if H % self.patch or W % self.patch:
            raise ShapeError(f"patch {self.patch} does not divide image {in_shape}")
        return (H // self.patch) * (W // self.patch)

    def out_shape(self, in_shape):
        n = self.n_tokens(in_shape)
        pdim = self.patch if len(in_shape) == 1 else in_shape[0] * self.patch**2
        if pdim != self.weight.shape[1] or n != self.pos.shape[0]:
            raise ShapeError(f"patch_embed does not fit input {in_shape}")
        return (n, self.weight.shape[0])

    def forward(self, x):
        x = _f64(x)
        in_shape = x.shape[1:]
        patches = _patchify(x, in_shape, self.patch)
        out = patches @ _f64(self.weight).T + _f64(self.bias) + _f64(self.pos)
        return out, (in_shape, patches)

    def backward(self, dout, cache):
        in_shape, patches = cache
        df = dout.reshape(-1, dout.shape[-1])
        grads = {
            "weight": df.T @ patches.reshape(-1, patches.shape[-1]),
            "bias": df.sum(axis=0),
            "pos": dout.sum(axis=0),
        }
        dx = _unpatchify(dout @ _f64(self.weight), in_shape, self.patch)
        return dx, grads

    def params(self):
        return {"weight": self.weight, "bias": self.bias, "pos": self.pos}


def _softmax(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=-1, keepdims=True)


def _softmax_backward(P, dP):
    return P * (dP - (dP * P).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class L2MHA(Layer):
    """Multi-head self-attention with L2 distance scores and tied query/key.

    Per head ``h`` with shared projection ``W = w_qk[h]`` (``d x D``, ``d = D/H``)
    the queries and keys are both ``q_i = W x_i``. Scores are
    ``-||q_i - q_j||^2 / sqrt(d)``, softmaxed over ``j``. Values go through the
    same projection, ``f_i = W^T sum_j P_ij q_j / sqrt(d)``, and then
    ``w_v[h]`` (``d x D``). Heads are concatenated and mixed by ``w_o``.
    Routing the value path through ``W`` is what makes the map Lipschitz.
    """

    w_qk: np.ndarray  # (H, d, D)
    w_v: np.ndarray  # (H, d, D)
    w_o: np.ndarray  # (D, D)
    kind = "l2mha"

    def __post_init__(self):
        self.w_qk = _f32(self.w_qk)
        self.w_v = _f32(self.w_v)
        self.w_o = _f32(self.w_o)
        H, d, D = self.w_qk.shape
        if D % H or d != D // H:
            raise ValueError(f"model dim {D} not divisible into {H} heads of size {d}")
        if self.w_v.shape != (H, d, D) or self.w_o.shape != (D, D):
            raise ShapeError("l2mha: inconsistent parameter shapes")

    @property
    def heads(self) -> int:
        return self.w_qk.shape[0]

    @property
    def dim(self) -> int:
        return self.w_qk.shape[2]

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.dim:
            raise ShapeError(f"l2mha expects (N, {self.dim}), got {in_shape}")
        return in_shape

    def forward(self, x):
        x = _f64(x)
        H, d, D = self.w_qk.shape
        scale = 1.0 / math.sqrt(d)
        heads = []
        cache = []
        for h in range(H):
            W = _f64(self.w_qk[h])
            Q = x @ W.T
            diff = Q[:, :, None, :] - Q[:, None, :, :]
            P = _softmax(-scale * np.einsum("bijk,bijk->bij", diff, diff))
            G = P @ Q
            F = (G @ W) * scale
            heads.append(F @ _f64(self.w_v[h]).T)
            cache.append((Q, P, G, F))
        concat = np.concatenate(heads, axis=-1)
        return concat @ _f64(self.w_o).T, (x, concat, cache)

    def backward(self, dout, cache):
        x, concat, per_head = cache
        H, d, D = self.w_qk.shape
        scale = 1.0 / math.sqrt(d)
        dw_o = dout.reshape(-1, D).T @ concat.reshape(-1, D)
        dconcat = dout @ _f64(self.w_o)
        dx = np.zeros_like(x)
        dw_qk = np.zeros(self.w_qk.shape)
        dw_v = np.zeros(self.w_v.shape)
        for h in range(H):
            W = _f64(self.w_qk[h])
            Q, P, G, F = per_head[h]
            dV = dconcat[..., h * d : (h + 1) * d]
            dw_v[h] = np.einsum("bnk,bnD->kD", dV, F)
            dF = dV @ _f64(self.w_v[h])
            dG = (dF @ W.T) * scale
            dW = np.einsum("bnk,bnD->kD", G, dF) * scale
            dP = dG @ np.swapaxes(Q, 1, 2)
            dQ = np.swapaxes(P, 1, 2) @ dG
            dS = _softmax_backward(P, dP)
            sym = dS + np.swapaxes(dS, 1, 2)
            tot = dS.sum(axis=2) + dS.sum(axis=1)
            dQ += -2.0 * scale * (tot[..., None] * Q - sym @ Q)
            dx += dQ @ W
            dW += np.einsum("bnk,bnD->kD", dQ, x)
            dw_qk[h] = dW
        return dx, {"w_qk": dw_qk, "w_v": dw_v, "w_o": dw_o}

    def params(self):
        return {"w_qk": self.w_qk, "w_v": self.w_v, "w_o": self.w_o}


@dataclass(eq=False)
class DPMHA(Layer):
    """Standard scaled dot-product multi-head attention (not Lipschitz)."""

    w_q: np.ndarray  # (H, d, D)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (D, D)
    kind = "dpmha"

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            setattr(self, name, _f32(getattr(self, name)))
        H, d, D = self.w_q.shape
        if D % H or d != D // H:
            raise ValueError(f"model dim {D} not divisible into {H} heads of size {d}")
        if self.w_k.shape != self.w_q.shape or self.w_v.shape != self.w_q.shape or self.w_o.shape != (D, D):
            raise ShapeError("dpmha: inconsistent parameter shapes")

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q.shape[2]

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.dim:
            raise ShapeError(f"dpmha expects (N, {self.dim}), got {in_shape}")
        return in_shape

    def forward(self, x):
        x = _f64(x)
        H, d, D = self.w_q.shape
        scale = 1.0 / math.sqrt(d)
        heads, cache = [], []
        for h in range(H):
            Q = x @ _f64(self.w_q[h]).T
            K = x @ _f64(self.w_k[h]).T
            V = x @ _f64(self.w_v[h]).T
            P = _softmax(scale * Q @ np.swapaxes(K, 1, 2))
            heads.append(P @ V)
            cache.append((Q, K, V, P))
        concat = np.concatenate(heads, axis=-1)
        return concat @ _f64(self.w_o).T, (x, concat, cache)

    def backward(self, dout, cache):
        x, concat, per_head = cache
        H, d, D = self.w_q.shape
        scale = 1.0 / math.sqrt(d)
        grads = {k: np.zeros(v.shape) for k, v in self.params().items()}
        grads["w_o"] = dout.reshape(-1, D).T @ concat.reshape(-1, D)
        dconcat = dout @ _f64(self.w_o)
        dx = np.zeros_like(x)
        for h in range(H):
            Q, K, V, P = per_head[h]
            dO = dconcat[..., h * d : (h + 1) * d]
            dP = dO @ np.swapaxes(V, 1, 2)
            dV = np.swapaxes(P, 1, 2) @ dO
            dS = _softmax_backward(P, dP) * scale
            dQ = dS @ K
            dK = np.swapaxes(dS, 1, 2) @ Q
            for name, dM in (("w_q", dQ), ("w_k", dK), ("w_v", dV)):
                grads[name][h] = np.einsum("bnk,bnD->kD", dM, x)
                dx += dM @ _f64(getattr(self, name)[h])
        return dx, grads

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass(eq=False)
class Residual(Layer):
    """``x + branch(x)`` where the branch is an ordered list of layers."""

    inner: list = field(default_factory=list)
    kind = "residual"

    def out_shape(self, in_shape):
        shape = in_shape
        for k, layer in enumerate(self.inner):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"residual branch layer {k}: {exc}") from None
        if tuple(shape) != tuple(in_shape):
            raise ShapeError(f"residual branch maps {in_shape} to {shape}")
        return in_shape

    def forward(self, x):
        x = _f64(x)
        h = x
        caches = []
        for layer in self.inner:
            h, c = layer.forward(h)
            caches.append(c)
        return x + h, caches

    def backward(self, dout, caches):
        grads = {}
        d = dout
        for k in reversed(range(len(self.inner))):
            d, g = self.inner[k].backward(d, caches[k])
            for name, val in g.items():
                grads[f"{k}.{name}"] = val
        return dout + d, grads

    def params(self):
        out = {}
        for k, layer in enumerate(self.inner):
            for name, val in layer.params().items():
                out[f"{k}.{name}"] = val
        return out

    def set_param(self, name, value):
        k, rest = name.split(".", 1)
        self.inner[int(k)].set_param(rest, value)


def l2_attention_forward(p: L2MHA, X) -> np.ndarray:
    """Apply an L2 attention layer to one token matrix ``(N, D)``."""
    X = _f64(X)
    if X.ndim != 2:
        raise ShapeError("expected a token matrix (N, D)")
    p.out_shape(X.shape)
    return p.forward(X[None])[0][0]


def l2_attention_weights(p: L2MHA, X) -> np.ndarray:
    """Row-stochastic attention matrices ``(H, N, N)`` for a token matrix."""
    X = _f64(X)
    p.out_shape(X.shape)
    _, (_, _, cache) = p.forward(X[None])
    return np.stack([c[1][0] for c in cache])


def dp_attention_forward(p: DPMHA, X) -> np.ndarray:
    X = _f64(X)
    if X.ndim != 2:
        raise ShapeError("expected a token matrix (N, D)")
    p.out_shape(X.shape)
    return p.forward(X[None])[0][0]


@dataclass(eq=False)
class Network:
    layers: list
    input_shape: tuple
    num_classes: int
    name: str = "net"
    seed: int = 0
    provenance: str = ""

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = self.layer_shapes()
        if self.layers and tuple(shapes[-1]) != (self.num_classes,):
            raise ShapeError(f"network output {shapes[-1]} does not match {self.num_classes} classes")

    def layer_shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the output shape."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.out_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return shapes

    def _batch(self, x):
        x = _f64(x)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                             f"expected input {self.input_shape}, got {x.shape}")
        return x, False

    def forward(self, x, trace: bool = False):
        """Logits for one input or a batch.

        With ``trace=True`` also returns the list of ``(input, output)`` pairs
        recorded for each top-level layer.
        """
        xb, single = self._batch(x)
        records = []
        shapes = self.layer_shapes()
        h = xb
        for i, layer in enumerate(self.layers):
            if h.shape[1:] != shapes[i]:
                raise ShapeError(f"layer {i} ({layer.kind}): expected {shapes[i]}, got {h.shape[1:]}")
            out, _ = layer.forward(h)
            if trace:
                records.append((h, out))
            h = out
        if single:
            h = h[0]
        return (h, records) if trace else h

    __call__ = forward

    def forward_cached(self, xb):
        """Batched forward pass keeping every cache for :meth:`backward`."""
        xb = _f64(xb)
        if xb.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0: expected input {self.input_shape}, got {xb.shape[1:]}")
        caches = []
        h = xb
        for layer in self.layers:
            h, c = layer.forward(h)
            caches.append(c)
        return h, caches

    def backward(self, dlogits, caches):
        """Returns the input gradient and parameter gradients keyed by path."""
        grads = {}
        d = _f64(dlogits)
        for i in reversed(range(len(self.layers))):
            d, g = self.layers[i].backward(d, caches[i])
            for name, val in g.items():
                grads[f"{i}.{name}"] = val
        return d, grads

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, val in layer.params().items():
                out[f"{i}.{name}"] = val
        return out

    def set_param(self, path: str, value) -> None:
        i, rest = path.split(".", 1)
        self.layers[int(i)].set_param(rest, value)

    def iter_layers(self, prefix: str = "") -> Iterator[tuple[str, Layer]]:
        """Depth-first ``(path, layer)`` pairs including residual branches."""
        for i, layer in enumerate(self.layers):
            yield from _iter_layer(f"{prefix}{i}", layer)

    def copy(self) -> "Network":
        from copy import deepcopy

        return deepcopy(self)


def _iter_layer(path, layer):
    yield path, layer
    if isinstance(layer, Residual):
        for k, sub in enumerate(layer.inner):
            yield from _iter_layer(f"{path}.{k}", sub)


def conv_matrix(layer: Conv2D, in_shape: Sequence[int]) -> np.ndarray:
    """Explicit matrix of the bias-free convolution acting on ``in_shape``."""
    n_in = int(np.prod(in_shape))
    basis = np.eye(n_in).reshape((n_in,) + tuple(in_shape))
    nobias = Conv2D(layer.weight, np.zeros_like(layer.bias), layer.stride, layer.padding)
    cols, _ = nobias.forward(basis)
    return cols.reshape(n_in, -1).T


def _sn_upper(M) -> float:
    return spectral_norm(M, iters=_SN_ITERS, tol=_SN_TOL) * (1.0 + _BOUND_SLACK)


def _token_softmax_constant(n_tokens: int) -> float:
    """Lipschitz constant of ``Q -> softmax(-dist^2/s) Q`` on ``n_tokens`` rows.

    Obtained from a Schur-test bound on the block Jacobian. With
    ``c = W0((N-1)/e)`` (principal Lambert W), every softmax row satisfies
    ``sum_j P_ij ||q_i - q_j||^2 <= c * s`` so block row sums are at most
    ``1 + 8c`` and block column sums at most
    ``N + 4c + 2(N-1)(1/e + sqrt(c/(2e)))``. The result does not depend on
    the temperature ``s``.
    """
    n = int(n_tokens)
    if n <= 1:
        return 1.0
    c = float(lambertw((n - 1) / math.e).real)
    row = 1.0 + 8.0 * c
    col = n + 4.0 * c + 2.0 * (n - 1) * (1.0 / math.e + math.sqrt(c / (2.0 * math.e)))
    return math.sqrt(row * col)


def l2_attention_lipschitz(layer: L2MHA, n_tokens: int) -> float:
    """Upper bound for an :class:`L2MHA` layer on ``n_tokens`` tokens.

    ``||w_o|| * sqrt(sum_h (L_N ||w_qk[h]||^2 ||w_v[h]|| / sqrt(d))^2)`` where
    ``L_N`` is :func:`_token_softmax_constant`.
    """
    H, d, D = layer.w_qk.shape
    L = _token_softmax_constant(n_tokens)
    per_head = [
        L * _sn_upper(layer.w_qk[h]) ** 2 * _sn_upper(layer.w_v[h]) / math.sqrt(d) for h in range(H)
    ]
    return _sn_upper(layer.w_o) * math.sqrt(sum(v * v for v in per_head))


def layer_lipschitz(layer: Layer, in_shape: Optional[Sequence[int]] = None,
                    gelu_constant: Optional[float] = None) -> float:
    """Upper bound on the l2 Lipschitz constant of one layer.

    ``in_shape`` is needed for convolutions (their matrix depends on the
    input size) and for attention/pooling (the bound depends on the number of
    tokens). ``gelu_constant`` overrides the computed GELU factor.
    """
    if isinstance(layer, (Linear, PatchEmbed)):
        return _sn_upper(layer.weight)
    if isinstance(layer, Conv2D):
        if in_shape is None:
            raise ValueError("conv2d bound needs the input shape")
        return _sn_upper(conv_matrix(layer, in_shape))
    if isinstance(layer, Activation):
        if layer.act == "gelu":
            return gelu_lipschitz_constant() if gelu_constant is None else float(gelu_constant)
        return 1.0
    if isinstance(layer, Flatten):
        return 1.0
    if isinstance(layer, TokenMeanPool):
        if in_shape is None:
            return 1.0
        return 1.0 / math.sqrt(in_shape[0])
    if isinstance(layer, Residual):
        shape = in_shape
        prod = 1.0
        for sub in layer.inner:
            prod *= layer_lipschitz(sub, shape, gelu_constant)
            shape = sub.out_shape(shape) if shape is not None else None
        return 1.0 + prod
    if isinstance(layer, L2MHA):
        if in_shape is None:
            raise ValueError("l2mha bound needs the number of tokens")
        return l2_attention_lipschitz(layer, in_shape[0])
    if isinstance(layer, DPMHA):
        # Dot-product attention has no global Lipschitz constant.
        return math.inf
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def network_lipschitz(net: Network, gelu_constant: Optional[float] = None) -> float:
    """Product of per-layer bounds; biases and positional tables do not count."""
    shapes = net.layer_shapes()
    prod = 1.0
    for layer, shape in zip(net.layers, shapes):
        prod *= layer_lipschitz(layer, shape, gelu_constant)
    return prod
