"""Server-side aggregation rules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import ParamVector, check_layouts, coordinate_median, stack

AGGREGATORS = ("fedavg", "fedexp", "median", "trimmed_mean", "krum", "rfa")

WEISZFELD_FLOOR = 1e-8


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    kappa: float = 0.3
    epsilon: float = 1e-3
    max_iters: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.kind!r}; expected one of {AGGREGATORS}")
        if not 0.0 <= self.kappa < 0.5:
            raise ValueError(f"kappa must lie in [0, 0.5), got {self.kappa}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("rfa needs max_iters >= 1 and tol > 0")

    def check_feasible(self, m: int) -> None:
        """Raise if the rule cannot run on ``m`` uploads."""
        if self.kind == "trimmed_mean":
            g = trim_count(self.kappa, m)
            if 2 * g >= m:
                raise ValueError(f"trimmed_mean: cannot drop 2*{g} of {m} uploads (kappa={self.kappa})")
        elif self.kind == "krum":
            f = trim_count(self.kappa, m)
            if m - f - 2 < 1:
                raise ValueError(
                    f"krum: m - f - 2 = {m} - {f} - 2 < 1 for {m} uploads (kappa={self.kappa})"
                )


@dataclass(frozen=True)
class Upload:
    client_id: int
    params: ParamVector
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError(f"client {self.client_id}: n_k must be >= 1")


def trim_count(kappa: float, m: int) -> int:
    # guard against kappa*m landing a hair below an integer
    return int(math.floor(kappa * m + 1e-9))


def _require(uploads: Sequence[Upload]) -> list[Upload]:
    """Validate and put uploads in client-id order so float sums ignore arrival order."""
    if not uploads:
        raise ValueError("no uploads to aggregate")
    check_layouts([u.params for u in uploads])
    return sorted(uploads, key=lambda u: u.client_id)


def _weights(uploads: Sequence[Upload]) -> np.ndarray:
    n = np.array([u.n_k for u in uploads], dtype=np.float64)
    return n / n.sum()


def agg_fedavg(uploads: Sequence[Upload]) -> ParamVector:
    """Sample-weighted mean.

    Computed as w_0 + sum_k p_k (w_k - w_0), so identical uploads come back bit-exactly.
    """
    uploads = _require(uploads)
    x = stack([u.params for u in uploads])
    return uploads[0].params.with_values(x[0] + _weights(uploads) @ (x - x[0]))


def fedexp_step_size(uploads: Sequence[Upload], prev_global: ParamVector,
                     epsilon: float = 1e-3) -> tuple[float, np.ndarray]:
    """Server step size and the weighted mean pseudo-gradient (prev_global - w_k)."""
    p = _weights(uploads)
    deltas = prev_global.values[None, :] - stack([u.params for u in uploads])
    mean_delta = p @ deltas
    spread = float(p @ np.sum(deltas ** 2, axis=1))
    eta = max(1.0, spread / (2.0 * (float(mean_delta @ mean_delta) + epsilon)))
    return eta, mean_delta


def agg_fedexp(uploads: Sequence[Upload], prev_global: ParamVector, epsilon: float = 1e-3) -> ParamVector:
    """FedAvg with an extrapolated server step on the averaged pseudo-gradient."""
    uploads = _require(uploads)
    check_layouts([prev_global, uploads[0].params])
    eta, mean_delta = fedexp_step_size(uploads, prev_global, epsilon)
    return prev_global.with_values(prev_global.values - eta * mean_delta)


def agg_median(uploads: Sequence[Upload]) -> ParamVector:
    uploads = _require(uploads)
    return coordinate_median([u.params for u in uploads])


def agg_trimmed_mean(uploads: Sequence[Upload], kappa: float) -> ParamVector:
    uploads = _require(uploads)
    m = len(uploads)
    g = trim_count(kappa, m)
    if 2 * g >= m:
        raise ValueError(f"trimmed_mean: cannot drop 2*{g} of {m} uploads (kappa={kappa})")
    x = np.sort(stack([u.params for u in uploads]), axis=0)
    return uploads[0].params.with_values(x[g:m - g].mean(axis=0))


def krum_scores(uploads: Sequence[Upload], kappa: float) -> np.ndarray:
    """Krum score of each upload, in the given order."""
    m = len(uploads)
    f = trim_count(kappa, m)
    k = m - f - 2
    if k < 1:
        raise ValueError(f"krum: m - f - 2 = {m} - {f} - 2 < 1 for {m} uploads (kappa={kappa})")
    x = stack([u.params for u in uploads])
    d2 = np.stack([np.sum((x - x[i]) ** 2, axis=1) for i in range(m)])
    np.fill_diagonal(d2, np.inf)
    return np.sort(d2, axis=1)[:, :k].sum(axis=1)


def agg_krum(uploads: Sequence[Upload], kappa: float) -> ParamVector:
    """Return the upload with the smallest sum of squared distances to its m-f-2 nearest peers."""
    uploads = _require(uploads)
    scores = krum_scores(uploads, kappa)
    best = min(range(len(uploads)), key=lambda i: (scores[i], uploads[i].client_id))
    return uploads[best].params


def rfa_objective(point: np.ndarray, points: np.ndarray, weights: np.ndarray) -> float:
    return float(weights @ np.linalg.norm(points - point, axis=1))


def agg_rfa(uploads: Sequence[Upload], max_iters: int = 100, tol: float = 1e-6) -> ParamVector:
    """Weighted geometric median by smoothed Weiszfeld iterations from the weighted mean."""
    uploads = _require(uploads)
    x = stack([u.params for u in uploads])
    w = _weights(uploads)
    z = w @ x
    for _ in range(max_iters):
        dist = np.maximum(np.linalg.norm(x - z, axis=1), WEISZFELD_FLOOR)
        beta = w / dist
        z_new = beta @ x / beta.sum()
        moved = float(np.linalg.norm(z_new - z))
        z = z_new
        if moved < tol:
            break
    # Weiszfeld crawls towards a median that sits on an input point; take the point if it is better
    objs = [rfa_objective(p, x, w) for p in x]
    k = int(np.argmin(objs))
    if objs[k] < rfa_objective(z, x, w):
        z = x[k]
    return uploads[0].params.with_values(z)


def aggregate(spec: AggregatorSpec, uploads: Sequence[Upload],
              prev_global: ParamVector | None = None) -> ParamVector:
    if spec.kind == "fedavg":
        return agg_fedavg(uploads)
    if spec.kind == "fedexp":
        if prev_global is None:
            raise ValueError("fedexp needs the previous global model")
        return agg_fedexp(uploads, prev_global, spec.epsilon)
    if spec.kind == "median":
        return agg_median(uploads)
    if spec.kind == "trimmed_mean":
        return agg_trimmed_mean(uploads, spec.kappa)
    if spec.kind == "krum":
        return agg_krum(uploads, spec.kappa)
    return agg_rfa(uploads, spec.max_iters, spec.tol)
