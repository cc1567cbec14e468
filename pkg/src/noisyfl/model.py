"""Small classifiers with hand-written backward passes.

Two architectures: ``softmax-regression`` (representations are the raw
features) and ``mlp-1h`` (one tanh hidden layer whose activations are the
representations). Losses: cross entropy, symmetric cross entropy, the
decorrelation ("SVD") regularizer on representations and a proximal term.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numcore import ParamVector, RngStream

ARCHS = ("softmax-regression", "mlp-1h")

PROB_FLOOR = 1e-12
RCE_LOG_ZERO = -4.0
SVD_EPS = 1e-8
DEFAULT_SVD_WEIGHT = 0.1


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "mlp-1h"
    feature_dim: int = 2
    hidden_dim: int = 16
    num_classes: int = 2
    init_scale: float = 0.5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if min(self.feature_dim, self.hidden_dim, self.num_classes) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")

    @property
    def rep_dim(self) -> int:
        return self.feature_dim if self.arch == "softmax-regression" else self.hidden_dim


@dataclass(frozen=True)
class LossSpec:
    base: str = "ce"
    alpha: float = 0.1
    beta: float = 1.0
    svd_weight: float = 0.0
    prox_mu: float = 0.0
    prox_anchor: ParamVector | None = None

    def __post_init__(self):
        if self.base not in ("ce", "sce"):
            raise ValueError(f"unknown base loss {self.base!r}")
        if self.base == "sce" and (self.alpha <= 0 or self.beta <= 0):
            raise ValueError("symmetric CE needs alpha > 0 and beta > 0")
        if self.svd_weight < 0 or self.prox_mu < 0:
            raise ValueError("svd_weight and prox_mu must be non-negative")
        if self.prox_mu > 0 and self.prox_anchor is None:
            raise ValueError("prox_mu > 0 requires a prox_anchor")


class ForwardResult(NamedTuple):
    representations: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_params(spec: ModelSpec, rng: RngStream) -> ParamVector:
    f, d, m, s = spec.feature_dim, spec.hidden_dim, spec.num_classes, spec.init_scale
    if spec.arch == "softmax-regression":
        return ParamVector.from_tensors([
            ("W", rng.uniform(-s, s, size=(f, m))),
            ("b", np.zeros(m)),
        ])
    return ParamVector.from_tensors([
        ("W1", rng.uniform(-s, s, size=(f, d))),
        ("b1", np.zeros(d)),
        ("W2", rng.uniform(-s, s, size=(d, m))),
        ("b2", np.zeros(m)),
    ])


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.feature_dim:
        raise ValueError(f"batch must have shape (B, {spec.feature_dim}), got {x.shape}")
    return x


def forward(params: ParamVector, spec: ModelSpec, batch: np.ndarray) -> ForwardResult:
    x = _check_batch(spec, batch)
    t = params.tensors()
    if spec.arch == "softmax-regression":
        h = x
        z = x @ t["W"] + t["b"]
    else:
        h = np.tanh(x @ t["W1"] + t["b1"])
        z = h @ t["W2"] + t["b2"]
    return ForwardResult(h, z, softmax(z))


def predict(params: ParamVector, spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, spec, batch).logits, axis=1)


# ------------------------------------------------------------------ losses

def loss_ce(result: ForwardResult, labels) -> tuple[float, np.ndarray]:
    y = np.asarray(labels, dtype=np.int64)
    p = result.probabilities[np.arange(y.size), y]
    per = -np.log(np.maximum(p, PROB_FLOOR))
    return float(per.mean()), per


def loss_sce(result: ForwardResult, labels, alpha: float, beta: float) -> tuple[float, np.ndarray]:
    """alpha * CE + beta * reverse CE, with log(0) of the one-hot target read as -4."""
    y = np.asarray(labels, dtype=np.int64)
    _, ce = loss_ce(result, y)
    p = result.probabilities[np.arange(y.size), y]
    # -sum_c p_c log q_c with log q_y = 0 and log q_c = A elsewhere
    rce = -RCE_LOG_ZERO * (1.0 - p)
    per = alpha * ce + beta * rce
    return float(per.mean()), per


def _normalize_reps(h: np.ndarray):
    centered = h - h.mean(axis=0, keepdims=True)
    var = (centered ** 2).mean(axis=0, keepdims=True)
    scale = 1.0 / np.sqrt(SVD_EPS + var)
    return centered, var, scale


def loss_svd(representations: np.ndarray) -> float:
    """Mean squared off-diagonal correlation of batch-normalized representations, over B."""
    h = np.asarray(representations, dtype=np.float64)
    b, d = h.shape
    if b < 2:
        raise ValueError(f"SVD loss needs at least 2 samples, got {b}")
    if d < 2:
        return 0.0
    centered, _, scale = _normalize_reps(h)
    m = centered * scale
    corr = m.T @ m
    off = corr[~np.eye(d, dtype=bool)]
    return float(np.mean(off ** 2) / b)


def _svd_grad(h: np.ndarray) -> tuple[float, np.ndarray]:
    b, d = h.shape
    if d < 2:
        return 0.0, np.zeros_like(h)
    centered, var, scale = _normalize_reps(h)
    m = centered * scale
    corr = m.T @ m
    mask = ~np.eye(d, dtype=bool)
    value = float(np.mean(corr[mask] ** 2) / b)
    g_corr = np.where(mask, 2.0 * corr / (b * d * (d - 1)), 0.0)
    g_m = 2.0 * m @ g_corr
    # m = centered * (eps + var)^-1/2, var = mean(centered^2)
    g_scale = np.sum(g_m * centered, axis=0, keepdims=True)
    g_var = g_scale * (-0.5) * (SVD_EPS + var) ** -1.5
    g_centered = g_m * scale + g_var * (2.0 / b) * centered
    return value, g_centered - g_centered.mean(axis=0, keepdims=True)


def eq1_value(representations: np.ndarray) -> float:
    """(1/d^2) * ||K||_F^2 with K the batch correlation matrix of normalized representations.

    Diagonal included, so the value is ~1/d for perfectly decorrelated, non-constant dimensions.
    """
    h = np.asarray(representations, dtype=np.float64)
    b, d = h.shape
    centered, _, scale = _normalize_reps(h)
    m = centered * scale
    k = (m.T @ m) / b
    return float(np.sum(k ** 2) / d ** 2)


def _base_loss_grad(result: ForwardResult, y: np.ndarray, loss: LossSpec):
    """Mean base loss, per-sample losses and d(mean loss)/d(logits)."""
    b, m = result.probabilities.shape
    probs = result.probabilities
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), y] = 1.0
    py = probs[np.arange(b), y]
    # the clamp makes CE flat below the floor
    g_ce = np.where((py >= PROB_FLOOR)[:, None], probs - onehot, 0.0)
    if loss.base == "ce":
        value, per = loss_ce(result, y)
        return value, per, g_ce / b
    value, per = loss_sce(result, y, loss.alpha, loss.beta)
    # d p_y / d z_j = p_y (delta_jy - p_j);  d rce / d p_y = A
    g_rce = RCE_LOG_ZERO * py[:, None] * (onehot - probs)
    return value, per, (loss.alpha * g_ce + loss.beta * g_rce) / b


def grad(params: ParamVector, spec: ModelSpec, batch: np.ndarray, labels,
         loss: LossSpec) -> tuple[float, ParamVector]:
    """Total loss value and its gradient w.r.t. ``params``."""
    value, g, _ = grad_with_details(params, spec, batch, labels, loss)
    return value, g


def grad_with_details(params: ParamVector, spec: ModelSpec, batch: np.ndarray, labels,
                      loss: LossSpec):
    """Like :func:`grad` but also returns the per-sample base losses."""
    x = _check_batch(spec, batch)
    y = np.asarray(labels, dtype=np.int64)
    if y.size != x.shape[0]:
        raise ValueError(f"{y.size} labels for a batch of {x.shape[0]}")
    res = forward(params, spec, x)
    total, per, g_z = _base_loss_grad(res, y, loss)
    t = params.tensors()

    use_svd = loss.svd_weight > 0 and x.shape[0] >= 2
    if spec.arch == "softmax-regression":
        if use_svd:
            # representations are the inputs themselves: constant w.r.t. params
            total += loss.svd_weight * loss_svd(res.representations)
        parts = [("W", x.T @ g_z), ("b", g_z.sum(axis=0))]
    else:
        h = res.representations
        g_h = g_z @ t["W2"].T
        if use_svd:
            sv, g_h_svd = _svd_grad(h)
            total += loss.svd_weight * sv
            g_h = g_h + loss.svd_weight * g_h_svd
        g_a = g_h * (1.0 - h * h)
        parts = [
            ("W1", x.T @ g_a), ("b1", g_a.sum(axis=0)),
            ("W2", h.T @ g_z), ("b2", g_z.sum(axis=0)),
        ]
    g = ParamVector.from_tensors(parts).values

    if loss.prox_mu > 0:
        if loss.prox_anchor.layout != params.layout:
            raise ValueError("prox anchor layout does not match params")
        diff = params.values - loss.prox_anchor.values
        total += 0.5 * loss.prox_mu * float(diff @ diff)
        g = g + loss.prox_mu * diff
    return float(total), params.with_values(g), per


def sgd_step(params: ParamVector, gradient: ParamVector, lr: float,
             momentum_state: ParamVector | None, momentum: float = 0.0,
             weight_decay: float = 0.0) -> tuple[ParamVector, ParamVector]:
    """v <- momentum*v + g + wd*w;  w <- w - lr*v."""
    if gradient.layout != params.layout:
        raise ValueError("gradient layout does not match params")
    v = np.zeros_like(params.values) if momentum_state is None else momentum_state.values
    v = momentum * v + gradient.values + weight_decay * params.values
    return params.with_values(params.values - lr * v), params.with_values(v)
