"""Representation spectra, collapse gap, clean-selection quality and accuracy-curve summaries."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import LabeledDataset
from .model import ModelSpec, eq1_value, forward
from .numcore import ParamVector, symmetric_eigen

LOG_FLOOR = 1e-12
DEFAULT_HEAD = 20


@dataclass(frozen=True)
class SpectrumRecord:
    round: int
    singular_values: tuple[float, ...]
    log_values: tuple[float, ...]
    eq1_value: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "singular_values": list(self.singular_values),
            "log_values": list(self.log_values),
            "eq1_value": self.eq1_value,
        }


def covariance_spectrum(representations: np.ndarray) -> np.ndarray:
    """Descending eigenvalues of the population covariance of ``representations``."""
    h = np.asarray(representations, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("need a non-empty (samples, dims) matrix")
    centered = h - h.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / h.shape[0]
    values, _ = symmetric_eigen(0.5 * (cov + cov.T))
    # PSD in exact arithmetic; rotations can leave -1e-17 residue
    return np.maximum(values, 0.0)


def spectrum_from_representations(representations: np.ndarray, round_: int = -1) -> SpectrumRecord:
    h = np.asarray(representations, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 2:
        raise ValueError("spectrum needs representation width d >= 2")
    values = covariance_spectrum(h)
    logs = np.log(np.maximum(values, LOG_FLOOR))
    return SpectrumRecord(round_, tuple(values.tolist()), tuple(logs.tolist()), eq1_value(h))


def representation_spectrum(params: ParamVector, spec: ModelSpec, eval_set: LabeledDataset,
                            round_: int = -1) -> SpectrumRecord:
    if len(eval_set) == 0:
        raise ValueError("eval set is empty")
    if spec.rep_dim < 2:
        raise ValueError("spectrum needs representation width d >= 2")
    reps = forward(params, spec, eval_set.features).representations
    return spectrum_from_representations(reps, round_)


def collapse_gap(spectrum: SpectrumRecord | Sequence[float], head: int = DEFAULT_HEAD) -> float:
    """log(sigma_1) - log(sigma_head), logs floored at 1e-12."""
    if isinstance(spectrum, SpectrumRecord):
        logs = spectrum.log_values
    else:
        logs = [math.log(max(v, LOG_FLOOR)) for v in spectrum]
    if not 1 <= head <= len(logs):
        raise ValueError(f"head must lie in [1, {len(logs)}], got {head}")
    return float(logs[0] - logs[head - 1])


def selection_quality(selected: Iterable[np.ndarray], dataset: LabeledDataset,
                      shard: np.ndarray | None = None) -> tuple[float, float]:
    """(precision, recall) of picking clean samples.

    ``selected`` holds dataset indices (one array per batch or round); recall is
    measured against the clean samples of ``shard`` (the whole dataset if omitted).
    """
    picked = [np.asarray(s, dtype=np.int64) for s in selected]
    picked = np.unique(np.concatenate(picked)) if picked else np.zeros(0, np.int64)
    clean = ~dataset.corrupted
    pool = np.arange(len(dataset)) if shard is None else np.asarray(shard, dtype=np.int64)
    clean_total = int(clean[pool].sum())
    clean_picked = int(clean[picked].sum())
    precision = clean_picked / picked.size if picked.size else float("nan")
    recall = clean_picked / clean_total if clean_total else float("nan")
    return precision, recall


@dataclass(frozen=True)
class CurveSummary:
    peak_round: int
    peak: float
    final: float
    drop: float


def curve_summary(values: Sequence[float], window: int = 10) -> CurveSummary:
    """Peak of a per-round metric curve against its last-``window`` mean.

    A positive ``drop`` is the early-peak-then-decline shape that noisy labels produce.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty curve")
    peak_round = int(np.argmax(v))
    final = float(v[-min(window, v.size):].mean())
    return CurveSummary(peak_round, float(v[peak_round]), final, float(v[peak_round] - final))


def write_spectrum_csv(path, records: Sequence[SpectrumRecord]) -> None:
    """One row per record: round, sigma_1..sigma_d."""
    d = max((len(r.singular_values) for r in records), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round"] + [f"sigma_{i + 1}" for i in range(d)])
        for r in records:
            w.writerow([r.round] + [repr(v) for v in r.singular_values])
