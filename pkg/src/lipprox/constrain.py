"""Lowering layer Lipschitz bounds while keeping layer outputs close.

Each weight matrix ``W`` of a pretrained network is replaced by a sparser
matrix chosen by Douglas-Rachford splitting between

* the l1 proximity operator (soft-thresholding by ``beta``), and
* the projection onto the accuracy set ``C`` of matrices whose mini-batch
  subdifferential distances stay below ``T * eta`` for every batch.

The layer relation ``y = prox_f(W x + b)`` is equivalent to
``W x + b - y`` lying in the subdifferential of ``f`` at ``y``; the squared
distance to that set measures how badly a candidate ``W`` reproduces the
recorded pair. Projection onto ``C`` has no closed form and is approximated
by a cyclic sweep of subgradient projections combined through Haugazeau's
outer-approximation update, anchored at the input matrix.

Traces are stored as arrays ``X (K, M, P)`` and ``Y (K, N, P)``: ``P`` is 1 for
dense layers, the number of output positions for convolutions and the number
of tokens for per-token maps.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import (
    DPMHA,
    L2MHA,
    Activation,
    Conv2D,
    Linear,
    Network,
    PatchEmbed,
    Residual,
    _im2col,
)
from .numerics import soft_threshold, spectral_norm

log = logging.getLogger(__name__)

__all__ = [
    "ConstrainConfig",
    "PRESETS",
    "LayerTrace",
    "ProjectionResult",
    "LayerReport",
    "InfeasibleConstraintError",
    "subdiff_project",
    "subdiff_distance_sq",
    "constraint_value",
    "constraint_gradient",
    "project_accuracy_set",
    "constrain_layer",
    "trace_layers",
    "certvit_network",
    "fine_tune",
    "format_layer_reports",
]

SUBDIFF_KINDS = ("identity", "relu")


class InfeasibleConstraintError(RuntimeError):
    """A violated constraint has a vanishing gradient."""


@dataclass(frozen=True)
class ConstrainConfig:
    beta: float = 0.1
    eta: float = 1e-2
    lam: float = 1.2
    dr_epochs: int = 5
    proj_epochs: int = 2
    proj_tol: Optional[float] = None  # default 1e-6 * T * max(eta, 1)
    dr_rel_tol: float = 1e-7
    workers: int = 1

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if not 0.0 < self.lam < 2.0:
            raise ValueError(f"lambda must lie in ]0, 2[, got {self.lam}")
        if self.dr_epochs < 1 or self.proj_epochs < 1:
            raise ValueError("dr_epochs and proj_epochs must be >= 1")

    def tolerance(self, T: int) -> float:
        if self.proj_tol is not None:
            return self.proj_tol
        eta = self.eta if math.isfinite(self.eta) else 1.0
        return 1e-6 * T * max(eta, 1.0)


PRESETS = {
    # Hyperparameter-table setting (also the default).
    "table": ConstrainConfig(beta=0.1, eta=1e-2, lam=1.2, dr_epochs=5, proj_epochs=2),
    # Setting quoted alongside the MNIST/CIFAR experiments.
    "text": ConstrainConfig(beta=0.01, eta=0.1, lam=1.2, dr_epochs=5, proj_epochs=2),
}


@dataclass
class LayerTrace:
    """Recorded input/output pairs of one weight matrix.

    ``key`` identifies the matrix inside the network (``"<path>/<param>"``,
    with ``[h]`` appended for one head of an attention tensor).
    """

    key: str
    X: np.ndarray  # (K, M, P)
    Y: np.ndarray  # (K, N, P)
    kind: str = "identity"
    offset: Optional[np.ndarray] = None  # (N, P) or (N, 1): bias and positions
    T: int = 1
    dropped: int = 0
    layer_kind: str = "linear"

    def __post_init__(self):
        if self.kind not in SUBDIFF_KINDS:
            raise ValueError(f"unsupported subdifferential kind {self.kind!r}")
        if self.X.ndim != 3 or self.Y.ndim != 3 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("trace arrays must be (K, M, P) and (K, N, P)")
        if self.T < 1 or self.X.shape[0] % self.T:
            raise ValueError(f"K={self.X.shape[0]} is not a multiple of T={self.T}")
        if self.kind == "relu" and np.any(self.Y < 0):
            raise ValueError("inconsistent trace")

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def J(self) -> int:
        return self.K // self.T

    def batch(self, j: int):
        if not 0 <= j < self.J:
            raise IndexError(f"batch index {j} out of range for J={self.J}")
        s = slice(j * self.T, (j + 1) * self.T)
        return self.X[s], self.Y[s]


def subdiff_project(kind: str, y, z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the subdifferential of ``f`` at ``y``.

    ``identity``: ``f = 0`` so the subdifferential is ``{0}``.
    ``relu``: ``f`` is the indicator of the nonnegative orthant; coordinates
    with ``y > 0`` admit only 0 and coordinates with ``y = 0`` admit
    ``(-inf, 0]``.
    """
    z = np.asarray(z, dtype=np.float64)
    if kind == "identity":
        return np.zeros_like(z)
    if kind == "relu":
        y = np.asarray(y, dtype=np.float64)
        if np.any(y < 0):
            raise ValueError("inconsistent trace")
        return np.where(y > 0, 0.0, np.minimum(z, 0.0))
    raise ValueError(f"unsupported subdifferential kind {kind!r}")


def _residual(kind, y, z):
    # z - proj(z), written without the subtraction to keep exact zeros.
    if kind == "identity":
        return z
    return np.where(y > 0, z, np.maximum(z, 0.0))


def subdiff_distance_sq(kind: str, y, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    r = z - subdiff_project(kind, y, z)
    return float(np.sum(r * r))


def _batch_residual(W, trace: LayerTrace, j: int):
    Xb, Yb = trace.batch(j)
    Z = np.matmul(W, Xb)
    if trace.offset is not None:
        Z += trace.offset
    Z -= Yb
    return Xb, _residual(trace.kind, Yb, Z)


def _outer_sum(R, Xb):
    # 2 sum_{t,p} r_tp x_tp^T as one matrix product
    N, M = R.shape[1], Xb.shape[1]
    return 2.0 * np.swapaxes(R, 0, 1).reshape(N, -1) @ np.swapaxes(Xb, 0, 1).reshape(M, -1).T


def _value_and_grad(W, trace: LayerTrace, j: int, eta: float):
    Xb, R = _batch_residual(W, trace, j)
    c = float(np.sum(R * R)) - trace.T * eta
    return c, _outer_sum(R, Xb)


def constraint_value(W, trace: LayerTrace, j: int, eta: float) -> float:
    """``sum_t d^2(W x_t + b - y_t) - T * eta`` over batch ``j`` (0-based)."""
    W = np.asarray(W, dtype=np.float64)
    _, R = _batch_residual(W, trace, j)
    return float(np.sum(R * R)) - trace.T * eta


def constraint_gradient(W, trace: LayerTrace, j: int) -> np.ndarray:
    """``2 sum_t r_t x_t^T`` with ``r_t`` the residual to the subdifferential.

    For an identity activation ``r_t = W x_t + b - y_t``.
    """
    W = np.asarray(W, dtype=np.float64)
    Xb, R = _batch_residual(W, trace, j)
    return _outer_sum(R, Xb)


@dataclass
class ProjectionResult:
    W: np.ndarray
    residual: float  # max_j c_j at the returned point
    sweeps: int
    converged: bool
    polish_sweeps: int = 0


def _haugazeau(x0, x, z):
    """Projection of ``x0`` onto ``H(x0, x) ∩ H(x, z)``.

    ``H(a, b) = {u : <u - b, a - b> <= 0}``. ``z`` is the subgradient
    projection of the current iterate ``x``.
    """
    a = x0 - x
    b = x - z
    pi = float(np.vdot(a, b))
    mu = float(np.vdot(a, a))
    nu = float(np.vdot(b, b))
    rho = mu * nu - pi * pi
    if rho <= 1e-14 * mu * nu:
        # collinear case; an empty intersection (pi < 0) cannot occur for a
        # nonempty convex target, so fall back to the subgradient projection
        return z
    if pi * nu >= rho:
        return x0 - (1.0 + pi / nu) * b
    return x + (nu / rho) * (pi * a - mu * b)


def _subgradient_step(Wc, trace, j, eta, tol):
    c, G = _value_and_grad(Wc, trace, j, eta)
    if c <= tol:
        return None, c
    g2 = float(np.vdot(G, G))
    if g2 == 0.0:
        raise InfeasibleConstraintError(f"infeasible flat constraint on batch {j} of {trace.key}")
    return Wc - (c / g2) * G, c


def _max_violation(W, trace, eta):
    return max(constraint_value(W, trace, j, eta) for j in range(trace.J))


def project_accuracy_set(W, trace: LayerTrace, eta: float, config: ConstrainConfig,
                         polish: Optional[int] = None) -> ProjectionResult:
    """Approximate projection of ``W`` onto the accuracy set.

    Cyclic sweeps over the ``J`` batches. For a violated batch the
    subgradient projection ``z = W - c_j(W) grad / ||grad||^2`` is formed and the
    iterate moves to the Haugazeau point built from the anchor ``W0`` (the
    input), the current iterate and ``z``. Stops once every ``c_j`` is below
    the tolerance or after ``config.proj_epochs`` sweeps.

    Haugazeau iterates approach the projection from outside ``C`` and only
    sublinearly, so an unfinished run is completed by at most ``polish``
    sweeps (default ``config.proj_epochs``) of plain cyclic subgradient
    projections, which reach feasibility fast while moving the point by about
    its remaining distance to ``C``. If even that fails the least violating
    iterate is returned with ``converged=False``. Haugazeau iterates that run
    off to infinity (an empty accuracy set) are dropped the same way.
    """
    W0 = np.array(W, dtype=np.float64)
    Wc = W0.copy()
    tol = config.tolerance(trace.T)
    if not math.isfinite(eta):
        return ProjectionResult(Wc, -math.inf, 0, True)

    best, best_res = Wc.copy(), _max_violation(Wc, trace, eta)
    sweeps = 0
    for sweeps in range(1, config.proj_epochs + 1):
        for j in range(trace.J):
            Z, _ = _subgradient_step(Wc, trace, j, eta, tol)
            if Z is not None:
                Wc = _haugazeau(W0, Wc, Z)
        res = _max_violation(Wc, trace, eta)
        if res <= tol:
            return ProjectionResult(Wc, res, sweeps, True)
        if not (math.isfinite(res) and np.all(np.isfinite(Wc))):
            # runaway iterates: the accuracy set is empty
            Wc = best.copy()
            break
        if res < best_res:
            best, best_res = Wc.copy(), res

    n_polish = config.proj_epochs if polish is None else polish
    for k in range(1, n_polish + 1):
        for j in range(trace.J):
            Z, _ = _subgradient_step(Wc, trace, j, eta, tol)
            if Z is not None:
                Wc = Z
        res = _max_violation(Wc, trace, eta)
        if res < best_res:
            best, best_res = Wc.copy(), res
        if res <= tol:
            return ProjectionResult(Wc, res, sweeps, True, k)
    return ProjectionResult(best, best_res, sweeps, False, n_polish)


@dataclass
class LayerReport:
    key: str
    layer_kind: str
    spectral_before: float
    spectral_after: float
    l1_before: float
    l1_after: float
    residual: float
    iterations: int
    feasible: bool


def constrain_layer(W0, trace: LayerTrace, config: ConstrainConfig, return_history: bool = False):
    """Douglas-Rachford iteration for one weight matrix.

    ``W_n = soft(What_n)``, ``Wt_n = proj_C(2 W_n - What_n)``,
    ``What_{n+1} = What_n + lam (Wt_n - W_n)``, starting from ``What_0 = W0``.
    The final prox iterate is projected once more so the returned matrix sits
    in ``C`` up to the projection tolerance.
    """
    W0 = np.array(W0, dtype=np.float64)
    eta = config.eta
    if math.isfinite(eta):
        anchor_res = max(constraint_value(W0, trace, j, eta) for j in range(trace.J))
        if anchor_res > config.tolerance(trace.T):
            log.warning("anchor of %s violates the accuracy set (max c_j = %.3g)", trace.key, anchor_res)

    What = W0.copy()
    W_prev = None
    history = []
    n_done = 0
    for n in range(config.dr_epochs):
        Wn = soft_threshold(What, config.beta)
        proj = project_accuracy_set(2.0 * Wn - What, trace, eta, config)
        What = What + config.lam * (proj.W - Wn)
        n_done = n + 1
        if return_history:
            history.append((Wn, proj.W, proj.residual))
        if W_prev is not None and np.linalg.norm(Wn - W_prev) <= config.dr_rel_tol * np.linalg.norm(Wn):
            break
        W_prev = Wn

    W_final = soft_threshold(What, config.beta)
    out = project_accuracy_set(W_final, trace, eta, config)
    report = LayerReport(
        key=trace.key,
        layer_kind=trace.layer_kind,
        spectral_before=spectral_norm(W0),
        spectral_after=spectral_norm(out.W) if np.any(out.W) else 0.0,
        l1_before=float(np.abs(W0).sum()),
        l1_after=float(np.abs(out.W).sum()),
        residual=out.residual,
        iterations=n_done,
        feasible=out.converged,
    )
    if not out.converged:
        log.info("projection for %s stopped with residual %.3g", trace.key, out.residual)
    if return_history:
        return out.W, report, history
    return out.W, report


# -- tracing ---------------------------------------------------------------


def _split(K_total: int, T: int):
    if K_total == 0:
        raise ValueError("empty dataset")
    if T < 1:
        raise ValueError("T must be >= 1")
    J = K_total // T
    if J == 0:
        raise ValueError(f"batch size T={T} exceeds the {K_total} available samples")
    return J * T, K_total - J * T


def _as_kmp(a):
    # (B, ..., F) -> (B, F, P) with P the product of the middle axes
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    B, F = a.shape[0], a.shape[-1]
    return np.ascontiguousarray(a.reshape(B, -1, F).transpose(0, 2, 1))


def _dense_trace(key, layer_kind, x_in, pre, post_act, W_shape, bias, T, **extra):
    """Trace for a map ``x -> W x + bias`` applied on the last axis."""
    K, dropped = _split(x_in.shape[0], T)
    X = _as_kmp(x_in[:K])
    if post_act == "relu":
        Y = _as_kmp(np.maximum(pre[:K], 0.0))
        kind = "relu"
    else:
        Y = _as_kmp(pre[:K])
        kind = "identity"
    offset = None
    if bias is not None:
        offset = np.asarray(bias, dtype=np.float64)
        offset = offset[:, None] if offset.ndim == 1 else offset
    return LayerTrace(key, X, Y, kind, offset, T, dropped, layer_kind)


def _next_activation(seq, k):
    if k + 1 < len(seq) and isinstance(seq[k + 1], Activation):
        return seq[k + 1].act
    return "identity"


def _trace_sequence(seq, prefix, h, T, out):
    """Walk a layer list, recording traces; returns the final activations."""
    for k, layer in enumerate(seq):
        path = f"{prefix}{k}"
        act = _next_activation(seq, k)
        if isinstance(layer, Linear):
            pre, _ = layer.forward(h)
            out.append(_dense_trace(f"{path}/weight", "linear", h, pre, act, layer.weight.shape, layer.bias, T))
            h = pre
        elif isinstance(layer, Conv2D):
            pre, (_, cols, Ho, Wo) = layer.forward(h)
            K, dropped = _split(h.shape[0], T)
            X = cols[:K].transpose(0, 2, 1)
            Yp = pre[:K].reshape(K, pre.shape[1], -1)
            kind = "identity"
            if act == "relu":
                Yp, kind = np.maximum(Yp, 0.0), "relu"
            offset = np.asarray(layer.bias, np.float64)[:, None]
            trace = LayerTrace(f"{path}/weight", np.ascontiguousarray(X), Yp, kind, offset, T, dropped, "conv2d")
            out.append(trace)
            h = pre
        elif isinstance(layer, PatchEmbed):
            from .layers import _patchify

            patches = _patchify(h, h.shape[1:], layer.patch)
            pre, _ = layer.forward(h)
            offset = (np.asarray(layer.bias, np.float64)[None, :] + np.asarray(layer.pos, np.float64)).T
            K, dropped = _split(h.shape[0], T)
            out.append(LayerTrace(f"{path}/weight", _as_kmp(patches[:K]), _as_kmp(pre[:K]), "identity",
                                  offset, T, dropped, "patch_embed"))
            h = pre
        elif isinstance(layer, L2MHA):
            new_h, (x, concat, per_head) = layer.forward(h)
            K, dropped = _split(h.shape[0], T)
            d = layer.w_qk.shape[1]
            for hh, (Q, P, G, F) in enumerate(per_head):
                out.append(LayerTrace(f"{path}/w_qk[{hh}]", _as_kmp(x[:K]), _as_kmp(Q[:K]), "identity",
                                      None, T, dropped, "l2mha"))
                V = concat[..., hh * d : (hh + 1) * d]
                out.append(LayerTrace(f"{path}/w_v[{hh}]", _as_kmp(F[:K]), _as_kmp(V[:K]), "identity",
                                      None, T, dropped, "l2mha"))
            out.append(LayerTrace(f"{path}/w_o", _as_kmp(concat[:K]), _as_kmp(new_h[:K]), "identity",
                                  None, T, dropped, "l2mha"))
            h = new_h
        elif isinstance(layer, Residual):
            branch = _trace_sequence(layer.inner, f"{path}.", h, T, out)
            h = h + branch
        elif isinstance(layer, DPMHA):
            raise ValueError(f"layer {path}: dot-product attention cannot be constrained; adapt it to L2 first")
        else:
            h, _ = layer.forward(h)
    return h


def trace_layers(net: Network, inputs, T: int) -> list[LayerTrace]:
    """One trace per constrainable weight matrix, from a pass over ``inputs``.

    Only the first ``J * T`` samples are used; the remainder is recorded in
    ``LayerTrace.dropped``. A layer followed by ReLU is traced in ReLU mode on
    its post-activation output; every other layer (GELU included) is traced
    on its pre-activation output in identity mode.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"inputs of shape {x.shape[1:]} do not match network input {net.input_shape}")
    out: list[LayerTrace] = []
    _trace_sequence(net.layers, "", x, T, out)
    return out


# -- whole-network orchestration ------------------------------------------


def _get_matrix(net: Network, key: str) -> np.ndarray:
    path, param = key.split("/")
    head = None
    if "[" in param:
        param, head = param[:-1].split("[")
        head = int(head)
    arr = net.named_params()[f"{path}.{param}"]
    if param == "weight" and arr.ndim == 4:
        arr = arr.reshape(arr.shape[0], -1)
    return np.array(arr[head] if head is not None else arr, dtype=np.float64)


def _set_matrix(net: Network, key: str, W) -> None:
    path, param = key.split("/")
    head = None
    if "[" in param:
        param, head = param[:-1].split("[")
        head = int(head)
    full = f"{path}.{param}"
    arr = np.array(net.named_params()[full], dtype=np.float32)
    if head is not None:
        arr[head] = W
    else:
        arr = np.asarray(W, dtype=np.float32).reshape(arr.shape)
    net.set_param(full, arr)


def _constrain_one(args):
    W, trace, config = args
    try:
        return constrain_layer(W, trace, config)
    except Exception as exc:
        raise RuntimeError(f"constraining {trace.key} failed: {exc}") from exc


def certvit_network(net: Network, inputs, config: ConstrainConfig, T: int = 100,
                    labels=None, finetune_epochs: int = 0, finetune_lr: float = 0.01,
                    finetune_batch: int = 128, seed: int = 0):
    """Constrain every weight matrix from its own trace, then fine-tune.

    Matrices are processed independently (``config.workers`` threads); the
    output does not depend on the worker count. Returns the new network and a
    report dict with one :class:`LayerReport` per matrix and the bound before
    and after fine-tuning.
    """
    from .layers import network_lipschitz

    traces = trace_layers(net, inputs, T)
    jobs = [(_get_matrix(net, tr.key), tr, config) for tr in traces]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_constrain_one, jobs))
    else:
        results = [_constrain_one(job) for job in jobs]

    new = net.copy()
    for tr, (W, _) in zip(traces, results):
        _set_matrix(new, tr.key, W)
    report = {
        "layers": [rep for _, rep in results],
        "lipschitz_source": network_lipschitz(net),
        "lipschitz_constrained": network_lipschitz(new),
    }
    if labels is not None and finetune_epochs > 0:
        new, ft = fine_tune(new, inputs, labels, finetune_epochs, finetune_lr, batch_size=finetune_batch, seed=seed)
        report["finetune"] = ft
    report["lipschitz_final"] = network_lipschitz(new)
    return new, report


def format_layer_reports(reports) -> str:
    """One ``key=value`` record per constrained matrix."""
    lines = []
    for r in reports:
        lines.append(
            f"layer={r.key} kind={r.layer_kind} sn_before={r.spectral_before:.6g} "
            f"sn_after={r.spectral_after:.6g} l1_before={r.l1_before:.6g} l1_after={r.l1_after:.6g} "
            f"residual={r.residual:.6g} iterations={r.iterations} feasible={int(r.feasible)}"
        )
    return "\n".join(lines)


def fine_tune(net: Network, inputs, labels, epochs: int, lr: float = 0.01, batch_size: int = 128,
              momentum: float = 0.0, seed: int = 0):
    """Unconstrained cross-entropy fine-tuning of all parameters.

    The Lipschitz bound is recorded before and after; nothing re-imposes the
    constraint afterwards. Aborts on a non-finite loss and returns the last
    finite weights.
    """
    from .layers import network_lipschitz
    from .train import TrainingDiverged, accuracy, sgd_epochs

    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    info = {"lipschitz_before": network_lipschitz(net), "accuracy": [accuracy(net, inputs, labels)]}
    if epochs == 0:
        info["lipschitz_after"] = info["lipschitz_before"]
        return net, info
    tuned = net.copy()
    try:
        history = sgd_epochs(tuned, inputs, labels, epochs, lr, batch_size, momentum, seed,
                             track_accuracy=True)
    except TrainingDiverged as exc:
        log.warning("fine-tuning diverged: %s", exc)
        tuned = exc.last_good
        history = exc.history
    info["accuracy"] += [h["accuracy"] for h in history]
    info["loss"] = [h["loss"] for h in history]
    info["lipschitz_after"] = network_lipschitz(tuned)
    return tuned, info
