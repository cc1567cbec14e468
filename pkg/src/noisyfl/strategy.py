"""Client-side local training: plain SGD, FedProx, symmetric CE and Co-teaching.

Any strategy can add the representation decorrelation penalty via ``svd_weight``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import LabeledDataset
from .model import LossSpec, ModelSpec, forward, grad_with_details, loss_ce, sgd_step
from .numcore import ParamVector, RngStream

log = logging.getLogger(__name__)

STRATEGIES = ("plain", "prox", "sce", "coteach")

# peer network B starts from global + uniform(-s, s) with s = PEER_PERTURB * init_scale
PEER_PERTURB = 1e-2
PEER_STREAM = 2**32


@dataclass(frozen=True)
class StrategySpec:
    kind: str = "plain"
    mu: float = 0.1
    alpha: float = 0.1
    beta: float = 1.0
    forget_rate: float = 0.2
    warmup_fraction: float = 0.2
    svd_weight: float = 0.0
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.forget_rate < 1.0:
            raise ValueError("forget_rate must lie in [0, 1)")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.svd_weight < 0:
            raise ValueError("lr, momentum, weight_decay and svd_weight must be non-negative")
        if self.kind == "prox" and self.mu <= 0:
            raise ValueError("prox strategy needs mu > 0")
        if self.kind == "sce" and (self.alpha <= 0 or self.beta <= 0):
            raise ValueError("sce strategy needs alpha > 0 and beta > 0")

    def loss_spec(self, anchor: ParamVector | None = None) -> LossSpec:
        if self.kind == "prox":
            return LossSpec("ce", svd_weight=self.svd_weight, prox_mu=self.mu, prox_anchor=anchor)
        if self.kind == "sce":
            return LossSpec("sce", alpha=self.alpha, beta=self.beta, svd_weight=self.svd_weight)
        return LossSpec("ce", svd_weight=self.svd_weight)


@dataclass
class ClientState:
    client_id: int
    shard: np.ndarray
    rng: RngStream
    params: ParamVector | None = None
    peer_params: ParamVector | None = None
    momentum_state: ParamVector | None = None
    peer_offset: np.ndarray | None = None


@dataclass
class LocalStats:
    n_k: int
    mean_loss: float = float("nan")
    first_loss: float = float("nan")
    first_base_loss: float = float("nan")
    steps: int = 0
    skipped: bool = False
    selections: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    clean_fraction: float | None = None


class LocalResult(NamedTuple):
    params: ParamVector
    peer_params: ParamVector | None
    stats: LocalStats


def keep_ratio(t: int, total_rounds: int, forget_rate: float, warmup_fraction: float) -> float:
    """Fraction of each batch kept: 1.0 at round 0, ramping linearly to 1 - forget_rate."""
    warm = warmup_fraction * total_rounds
    if warm <= 0:
        return 1.0 - forget_rate
    return 1.0 - forget_rate * min(t / warm, 1.0)


def num_kept(keep: float, batch: int) -> int:
    # 1e-9 absorbs products such as 0.8 * 5 = 4.000000000000001
    return max(1, min(batch, math.ceil(keep * batch - 1e-9)))


def coteach_select(losses_a, losses_b, keep: float) -> tuple[np.ndarray, np.ndarray]:
    """Each network trains on the small-loss samples picked by its peer.

    Returns ``(indices_for_a, indices_for_b)``; ties go to the lower index.
    """
    la = np.asarray(losses_a, dtype=np.float64)
    lb = np.asarray(losses_b, dtype=np.float64)
    if la.shape != lb.shape or la.ndim != 1 or la.size < 1:
        raise ValueError("loss vectors must be 1-D, non-empty and equally long")
    k = num_kept(keep, la.size)
    for_a = np.sort(np.argsort(lb, kind="stable")[:k])
    for_b = np.sort(np.argsort(la, kind="stable")[:k])
    return for_a, for_b


def _batches(shard: np.ndarray, batch_size: int, rng: RngStream):
    order = shard[rng.permutation(shard.size)]
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def _skip(global_params: ParamVector, state: ClientState) -> LocalResult:
    log.warning("client %d has an empty shard; skipped", state.client_id)
    return LocalResult(global_params, None, LocalStats(n_k=0, skipped=True))


def local_train(state: ClientState, global_params: ParamVector, spec: StrategySpec,
                t: int, total_rounds: int, dataset: LabeledDataset,
                model: ModelSpec) -> LocalResult:
    """Start from the global model and run ``spec.epochs`` epochs of mini-batch SGD."""
    if spec.kind == "coteach":
        return coteach_train(state, global_params, spec, t, total_rounds, dataset, model)
    if state.shard.size == 0:
        return _skip(global_params, state)
    rng = state.rng.derive(t)
    loss = spec.loss_spec(anchor=global_params)
    params, velocity = global_params, None
    stats = LocalStats(n_k=int(state.shard.size))
    total, seen = 0.0, 0
    x_all, y_all = dataset.features, dataset.observed_labels
    for _ in range(spec.epochs):
        for idx in _batches(state.shard, spec.batch_size, rng):
            value, g, per = grad_with_details(params, model, x_all[idx], y_all[idx], loss)
            if stats.steps == 0:
                stats.first_loss = value
                stats.first_base_loss = float(per.mean())
            params, velocity = sgd_step(params, g, spec.lr, velocity, spec.momentum, spec.weight_decay)
            total += value * idx.size
            seen += idx.size
            stats.steps += 1
    stats.mean_loss = total / seen
    state.params, state.momentum_state = params, velocity
    return LocalResult(params, None, stats)


def coteach_train(state: ClientState, global_params: ParamVector, spec: StrategySpec,
                  t: int, total_rounds: int, dataset: LabeledDataset,
                  model: ModelSpec) -> LocalResult:
    """Train two peer networks that exchange small-loss selections every batch.

    Network A is what the client uploads; B is returned as ``peer_params``.
    """
    if state.shard.size == 0:
        return _skip(global_params, state)
    if state.peer_offset is None:
        scale = PEER_PERTURB * model.init_scale
        state.peer_offset = state.rng.derive(PEER_STREAM).uniform(-scale, scale, size=len(global_params))
    rng = state.rng.derive(t)
    loss = LossSpec("ce", svd_weight=spec.svd_weight)
    keep = keep_ratio(t, total_rounds, spec.forget_rate, spec.warmup_fraction)

    net_a = global_params
    net_b = global_params.with_values(global_params.values + state.peer_offset)
    vel_a = vel_b = None
    stats = LocalStats(n_k=int(state.shard.size))
    total, seen, clean_sel, n_sel = 0.0, 0, 0, 0
    x_all, y_all = dataset.features, dataset.observed_labels
    clean = ~dataset.corrupted
    for _ in range(spec.epochs):
        for idx in _batches(state.shard, spec.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            _, la = loss_ce(forward(net_a, model, x), y)
            _, lb = loss_ce(forward(net_b, model, x), y)
            sel_a, sel_b = coteach_select(la, lb, keep)
            va, ga, per_a = grad_with_details(net_a, model, x[sel_a], y[sel_a], loss)
            vb, gb, _ = grad_with_details(net_b, model, x[sel_b], y[sel_b], loss)
            if stats.steps == 0:
                stats.first_loss = va
                stats.first_base_loss = float(per_a.mean())
            net_a, vel_a = sgd_step(net_a, ga, spec.lr, vel_a, spec.momentum, spec.weight_decay)
            net_b, vel_b = sgd_step(net_b, gb, spec.lr, vel_b, spec.momentum, spec.weight_decay)
            picked_a, picked_b = idx[sel_a], idx[sel_b]
            stats.selections.append((picked_a, picked_b))
            clean_sel += int(clean[picked_a].sum() + clean[picked_b].sum())
            n_sel += picked_a.size + picked_b.size
            total += va * sel_a.size
            seen += sel_a.size
            stats.steps += 1
    stats.mean_loss = total / seen
    stats.clean_fraction = clean_sel / n_sel
    state.params, state.peer_params, state.momentum_state = net_a, net_b, vel_a
    return LocalResult(net_a, net_b, stats)
