"""Certificates, attacks and robustness metrics.

A sample is certified at radius ``eps`` when it is classified correctly and
its logit margin exceeds ``sqrt(2) * eps * L`` for a global Lipschitz bound
``L`` of the logit map: any perturbation of norm ``eps`` moves the difference
of two logits by at most ``sqrt(2) * L * eps``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Union

import numpy as np

from .layers import (
    DPMHA,
    L2MHA,
    Activation,
    Conv2D,
    Flatten,
    Layer,
    Linear,
    Network,
    PatchEmbed,
    Residual,
    TokenMeanPool,
    network_lipschitz,
)
from .numerics import make_rng

__all__ = [
    "CertReport",
    "CSV_COLUMNS",
    "UnsoundCertificateError",
    "logit_margin",
    "certify_sample",
    "certify_batch",
    "pgd_attack",
    "empirical_lipschitz_lower_bound",
    "pair_ratios",
    "jacobian_norm",
    "evaluate",
    "flop_count",
]

CSV_COLUMNS = ("model", "eps", "clean", "pgd", "cert", "lip_upper", "lip_lower", "flops", "samples")


class UnsoundCertificateError(AssertionError):
    """A certified sample was broken by an attack, or metrics are out of order."""


@dataclass
class CertReport:
    epsilon: float
    clean_acc: float
    pgd_acc: float
    cert_acc: float
    lipschitz_upper: float
    lipschitz_lower_empirical: float
    flops: int
    sample_count: int
    model: str = "net"

    def check(self) -> None:
        if not self.cert_acc <= self.pgd_acc <= self.clean_acc:
            raise UnsoundCertificateError(
                f"ordering violated: cert {self.cert_acc} pgd {self.pgd_acc} clean {self.clean_acc}")
        if self.lipschitz_lower_empirical > self.lipschitz_upper:
            raise UnsoundCertificateError(
                f"empirical Lipschitz {self.lipschitz_lower_empirical} exceeds bound {self.lipschitz_upper}")

    def to_kv(self) -> str:
        return "\n".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(self).items())

    def csv_row(self) -> list[str]:
        return [self.model, repr(float(self.epsilon)), repr(float(self.clean_acc)), repr(float(self.pgd_acc)),
                repr(float(self.cert_acc)), repr(float(self.lipschitz_upper)),
                repr(float(self.lipschitz_lower_empirical)), str(int(self.flops)), str(int(self.sample_count))]

    def to_csv_line(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(self.csv_row())
        return buf.getvalue()

    @classmethod
    def from_csv_row(cls, row) -> "CertReport":
        if isinstance(row, dict):
            row = [row[c] for c in CSV_COLUMNS]
        model, eps, clean, pgd, cert, up, low, flops, samples = row
        return cls(float(eps), float(clean), float(pgd), float(cert), float(up), float(low), int(flops),
                   int(samples), model)


def logit_margin(logits, labels) -> np.ndarray:
    """``z_label - max_{j != label} z_j`` per row."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels)
    idx = np.arange(len(labels))
    true = logits[idx, labels]
    others = logits.copy()
    others[idx, labels] = -np.inf
    return true - others.max(axis=1)


def certify_batch(net: Network, x, labels, eps: float, lipschitz: Optional[float] = None) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    L = network_lipschitz(net) if lipschitz is None else lipschitz
    logits = net.forward(x)
    margins = logit_margin(logits, labels)
    radius_term = math.sqrt(2.0) * eps * L if eps > 0 else 0.0
    return (logits.argmax(axis=1) == np.asarray(labels)) & (margins > radius_term)


def certify_sample(net: Network, x, label: int, eps: float, lipschitz: Optional[float] = None) -> bool:
    """True iff ``x`` is classified as ``label`` with margin above ``sqrt(2) eps L``."""
    x = np.asarray(x, dtype=np.float64)[None]
    return bool(certify_batch(net, x, np.array([label]), eps, lipschitz)[0])


def _ce_input_grad(net: Network, x, labels):
    logits, caches = net.forward_cached(x)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    idx = np.arange(len(labels))
    loss = -np.log(np.maximum(p[idx, labels], 1e-300))
    d = p.copy()
    d[idx, labels] -= 1.0
    dx, _ = net.backward(d, caches)
    return logits, loss, dx


def _flat_norm(a):
    return np.sqrt((a.reshape(a.shape[0], -1) ** 2).sum(axis=1))


def _expand(v, like):
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def pgd_attack(net: Network, x, labels, eps: float, steps: int = 50, step_size: Optional[float] = None,
               restarts: int = 1, seed: int = 0, max_zero_grad_restarts: int = 3):
    """l2 PGD on the cross-entropy loss.

    Each step moves by ``step_size`` along the normalised input gradient and
    projects back onto the ``eps`` ball around ``x``. The first run starts at
    ``x``; further ``restarts`` and the restarts triggered by a vanishing
    gradient start from seeded random points of the ball. Returns the worst
    iterate per sample: a misclassifying one if found, else the highest loss.
    Accepts one input or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == net.input_shape
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(labels))
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if eps == 0:
        return x.copy()
    step_size = 2.5 * eps / steps if step_size is None else step_size
    rng = make_rng(seed)

    best = xb.copy()
    best_mis = np.zeros(len(xb), dtype=bool)
    best_loss = np.full(len(xb), -np.inf)

    def run(active, start):
        # the loss at each iterate comes from the same pass as its gradient
        nonlocal best, best_mis, best_loss
        delta = start
        stuck = np.zeros(len(active), dtype=bool)
        for step_no in range(steps + 1):
            cand = xb[active] + delta
            lg, ls, g = _ce_input_grad(net, cand, yb[active])
            mis = lg.argmax(axis=1) != yb[active]
            better = (mis & ~best_mis[active]) | ((mis == best_mis[active]) & (ls > best_loss[active]))
            upd = active[better]
            best[upd] = cand[better]
            best_mis[upd] = mis[better]
            best_loss[upd] = ls[better]
            if step_no == steps:
                break
            gn = _flat_norm(g)
            stuck |= gn == 0.0
            step = np.where(_expand(gn > 0, g), g / _expand(np.where(gn > 0, gn, 1.0), g), 0.0)
            delta = delta + step_size * step
            dn = _flat_norm(delta)
            scale = np.where(dn > eps, eps / np.where(dn > 0, dn, 1.0), 1.0)
            delta = delta * _expand(scale, delta)
        return stuck

    def random_start(n):
        d = rng.standard_normal((n,) + xb.shape[1:])
        d /= _expand(_flat_norm(d), d)
        r = eps * rng.random(n) ** (1.0 / d[0].size)
        return d * _expand(r, d)

    all_idx = np.arange(len(xb))
    stuck = run(all_idx, np.zeros_like(xb))
    for _ in range(restarts - 1):
        run(all_idx, random_start(len(xb)))
    for _ in range(max_zero_grad_restarts):
        todo = all_idx[stuck & ~best_mis]
        if len(todo) == 0:
            break
        again = run(todo, random_start(len(todo)))
        stuck = np.zeros(len(xb), dtype=bool)
        stuck[todo] = again
    return best[0] if single else best


def pair_ratios(net: Network, x, z) -> np.ndarray:
    """``||f(x + z) - f(x)|| / ||z||`` for a batch of pairs."""
    fx = net.forward(x)
    fz = net.forward(x + z)
    return _flat_norm(fz - fx) / _flat_norm(z)


def empirical_lipschitz_lower_bound(net: Network, n_pairs: int = 1000,
                                    sampler: Union[np.ndarray, Callable, None] = None,
                                    seed: int = 0, refine: int = 16, refine_steps: int = 25,
                                    return_ratios: bool = False):
    """Largest observed output/input variation ratio; a valid lower bound.

    Base points come from ``sampler`` (an array to draw rows from, or a
    callable ``(rng, n) -> inputs``; standard normal by default). Perturbations
    are random directions at norms 1e-3, 1e-2, 1e-1 and 1. The ``refine`` best
    pairs are then improved by normalised gradient ascent on the squared output
    change at fixed perturbation norm.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = make_rng(seed)
    if sampler is None:
        x = rng.standard_normal((n_pairs,) + net.input_shape)
    elif callable(sampler):
        x = np.asarray(sampler(rng, n_pairs), dtype=np.float64)
    else:
        pool = np.asarray(sampler, dtype=np.float64)
        x = pool[rng.integers(0, len(pool), n_pairs)]
    z = rng.standard_normal(x.shape)
    scales = 10.0 ** -(np.arange(n_pairs) % 4).astype(np.float64)[::-1]
    z *= _expand(scales / _flat_norm(z), z)
    ratios = pair_ratios(net, x, z)

    refined = []
    if refine > 0 and refine_steps > 0:
        top = np.argsort(-ratios)[: min(refine, n_pairs)]
        xr, zr = x[top], z[top]
        norms = _flat_norm(zr)
        fx = net.forward(xr)
        for _ in range(refine_steps):
            out, caches = net.forward_cached(xr + zr)
            g, _ = net.backward(out - fx, caches)
            gn = _flat_norm(g)
            ok = gn > 0
            if not np.any(ok):
                break
            zr = np.where(_expand(ok, zr), g / _expand(np.where(ok, gn, 1.0), g) * _expand(norms, g), zr)
            refined.append(pair_ratios(net, xr, zr))
    best = float(ratios.max())
    if refined:
        best = max(best, float(np.max(refined)))
    if return_ratios:
        return best, np.concatenate([ratios] + refined)
    return best


def jacobian_norm(module: Union[Layer, Network], x) -> float:
    """Spectral norm of the input Jacobian at one input, via one VJP per output."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(module, Network):
        fwd, bwd = module.forward_cached, lambda d, c: module.backward(d, c)[0]
    else:
        fwd, bwd = module.forward, lambda d, c: module.backward(d, c)[0]
    out, _ = fwd(x[None])
    n_out = out[0].size
    xs = np.repeat(x[None], n_out, axis=0)
    _, cache = fwd(xs)
    eye = np.eye(n_out).reshape((n_out,) + out.shape[1:])
    J = bwd(eye, cache).reshape(n_out, -1)
    return float(np.linalg.norm(J, 2))


def _layer_flops(layer, in_shape) -> int:
    if isinstance(layer, Linear):
        N, M = layer.weight.shape
        return 2 * N * M * int(np.prod(in_shape[:-1], dtype=np.int64))
    if isinstance(layer, Conv2D):
        O, C, kh, kw = layer.weight.shape
        _, Ho, Wo = layer.out_shape(in_shape)
        return 2 * O * C * kh * kw * Ho * Wo
    if isinstance(layer, PatchEmbed):
        D, pdim = layer.weight.shape
        return 2 * D * pdim * layer.n_tokens(in_shape)
    if isinstance(layer, (Activation, Flatten)):
        return 0
    if isinstance(layer, TokenMeanPool):
        return 2 * in_shape[0] * in_shape[1]
    if isinstance(layer, L2MHA):
        N, D = in_shape
        H, d, _ = layer.w_qk.shape
        # queries, pairwise distances, P @ Q, tied value projection, w_v, w_o
        per_head = 2 * N * D * d + 2 * N * N * d + 2 * N * N * d + 2 * N * d * D + 2 * N * D * d
        return H * per_head + 2 * N * D * D
    if isinstance(layer, DPMHA):
        N, D = in_shape
        H, d, _ = layer.w_q.shape
        per_head = 3 * 2 * N * D * d + 2 * N * N * d + 2 * N * N * d
        return H * per_head + 2 * N * D * D
    if isinstance(layer, Residual):
        total, shape = 0, in_shape
        for sub in layer.inner:
            total += _layer_flops(sub, shape)
            shape = sub.out_shape(shape)
        return total
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def _matrices(layer, in_shape):
    """``(rows, cols, positions)`` of every constrainable matrix of a layer."""
    if isinstance(layer, Linear):
        N, M = layer.weight.shape
        return [(N, M, int(np.prod(in_shape[:-1], dtype=np.int64)))]
    if isinstance(layer, Conv2D):
        O, C, kh, kw = layer.weight.shape
        _, Ho, Wo = layer.out_shape(in_shape)
        return [(O, C * kh * kw, Ho * Wo)]
    if isinstance(layer, PatchEmbed):
        D, pdim = layer.weight.shape
        return [(D, pdim, layer.n_tokens(in_shape))]
    if isinstance(layer, L2MHA):
        N, D = in_shape
        H, d, _ = layer.w_qk.shape
        return [(d, D, N)] * (2 * H) + [(D, D, N)]
    if isinstance(layer, Residual):
        out, shape = [], in_shape
        for sub in layer.inner:
            out += _matrices(sub, shape)
            shape = sub.out_shape(shape)
        return out
    return []


def flop_count(net: Network, phase: str = "forward", samples: int = 1, proj_epochs: int = 2) -> int:
    """Analytic FLOPs (two per multiply-accumulate).

    ``forward``: one forward pass per sample. ``train_step``: three times the
    forward count (forward plus backward). ``constrain_epoch``: one
    Douglas-Rachford epoch over ``samples`` traced inputs with ``proj_epochs``
    projection sweeps, each evaluating the residual ``W x`` and the gradient
    ``r x^T`` for every matrix (``4 * rows * cols * positions`` per sample).
    """
    shapes = net.layer_shapes()
    if phase in ("forward", "train_step"):
        total = sum(_layer_flops(layer, s) for layer, s in zip(net.layers, shapes))
        return int(total * samples * (3 if phase == "train_step" else 1))
    if phase == "constrain_epoch":
        total = 0
        for layer, s in zip(net.layers, shapes):
            for rows, cols, pos in _matrices(layer, s):
                total += 4 * rows * cols * pos
        return int(total * samples * proj_epochs)
    raise ValueError(f"unknown phase {phase!r}")


def evaluate(net: Network, x, labels, eps: float, steps: int = 50, step_size: Optional[float] = None,
             restarts: int = 1, n_pairs: int = 1000, seed: int = 0, model: Optional[str] = None,
             lipschitz: Optional[float] = None, batch_size: int = 500) -> CertReport:
    """Clean, PGD and certified accuracy plus Lipschitz bounds and FLOPs.

    A sample counts as PGD-robust only if it is also clean-correct, so the
    ordering ``cert <= pgd <= clean`` must hold; a certified sample broken by
    PGD raises :class:`UnsoundCertificateError`.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("empty dataset")
    L = network_lipschitz(net) if lipschitz is None else lipschitz
    clean = np.zeros(len(x), dtype=bool)
    robust = np.zeros(len(x), dtype=bool)
    cert = np.zeros(len(x), dtype=bool)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        xb, yb = x[sl], labels[sl]
        clean[sl] = net.forward(xb).argmax(axis=1) == yb
        cert[sl] = certify_batch(net, xb, yb, eps, L)
        adv = pgd_attack(net, xb, yb, eps, steps, step_size, restarts, seed + start)
        robust[sl] = clean[sl] & (net.forward(adv).argmax(axis=1) == yb)
    broken = np.flatnonzero(cert & ~robust)
    if len(broken):
        raise UnsoundCertificateError(f"{len(broken)} certified samples broken by PGD (first index {broken[0]})")
    lower = empirical_lipschitz_lower_bound(net, n_pairs, x, seed=seed) if n_pairs else 0.0
    report = CertReport(
        epsilon=float(eps),
        clean_acc=float(clean.mean()),
        pgd_acc=float(robust.mean()),
        cert_acc=float(cert.mean()),
        lipschitz_upper=float(L),
        lipschitz_lower_empirical=float(lower),
        flops=flop_count(net, "forward", samples=len(x)),
        sample_count=int(len(x)),
        model=model or net.name,
    )
    report.check()
    return report
