"""Round loop: sample clients, train locally, aggregate, evaluate, record."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import data as D
from .aggregate import AggregatorSpec, Upload, aggregate
from .diagnostics import SpectrumRecord, representation_spectrum
from .model import ModelSpec, init_params, predict
from .numcore import ParamVector, RngStream
from .strategy import ClientState, LocalResult, StrategySpec, local_train

log = logging.getLogger(__name__)

PARTITIONS = ("iid", "sharding", "dirichlet")
SOURCES = ("blobs", "file")

# stream ids derived from the master seed; fixed so a config always maps to the same draws
STREAM_DATA, STREAM_TEST, STREAM_PARTITION, STREAM_NOISE = 1, 2, 3, 4
STREAM_INIT, STREAM_SAMPLE, STREAM_CLIENT = 5, 6, 7


@dataclass(frozen=True)
class DataSpec:
    source: str = "blobs"
    samples: int = 2000
    classes: int = 4
    feature_dim: int = 2
    spread: float = 0.5
    test_samples: int = 1000
    train_path: str | None = None
    test_path: str | None = None
    delimiter: str | None = None
    partition: str = "dirichlet"
    shards: int = 5
    dirichlet_beta: float = 1.0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown data source {self.source!r}; expected one of {SOURCES}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}; expected one of {PARTITIONS}")
        if self.source == "blobs":
            if self.classes > self.samples or self.classes < 2:
                raise ValueError("blobs need 2 <= classes <= samples")
            if self.feature_dim < 1 or self.spread <= 0 or self.test_samples < 1:
                raise ValueError("blobs need feature_dim >= 1, spread > 0, test_samples >= 1")
        elif not (self.train_path and self.test_path):
            raise ValueError("file source needs train_path and test_path")
        if self.shards < 1 or self.dirichlet_beta <= 0:
            raise ValueError("shards must be >= 1 and dirichlet_beta > 0")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp-1h"
    hidden_dim: int = 16
    init_scale: float = 0.5

    def spec(self, feature_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(self.arch, feature_dim, self.hidden_dim, num_classes, self.init_scale)


@dataclass(frozen=True)
class ExperimentConfig:
    num_clients: int = 100
    participants: int = 10
    rounds: int = 120
    seed: int = 0
    eval_window: int = 10
    spectrum: bool = False
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategySpec = field(default_factory=StrategySpec)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    noise: D.NoiseSpec = field(default_factory=D.NoiseSpec)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 1 <= self.participants <= self.num_clients:
            raise ValueError(
                f"participants ({self.participants}) must lie in [1, num_clients={self.num_clients}]"
            )
        if self.eval_window < 1 or self.rounds < self.eval_window:
            raise ValueError(f"rounds ({self.rounds}) must be >= eval_window ({self.eval_window}) >= 1")
        if self.data.source == "blobs" and self.num_clients > self.data.samples:
            raise ValueError("more clients than training samples")
        self.aggregator.check_feasible(self.participants)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        return cls(
            data=DataSpec(**d.pop("data", {})),
            model=ModelConfig(**d.pop("model", {})),
            strategy=StrategySpec(**d.pop("strategy", {})),
            aggregator=AggregatorSpec(**d.pop("aggregator", {})),
            noise=D.NoiseSpec(**d.pop("noise", {})),
            **d,
        )


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    test_macro_f1: float
    test_accuracy: float
    mean_train_loss: float | None
    n_k: list[int]
    selection_clean_fraction: float | None = None
    peer_macro_f1: float | None = None
    spectrum: SpectrumRecord | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        # wall_time is excluded: serialized reports must be reproducible byte for byte
        return {
            "round": self.round,
            "selected": list(self.selected),
            "test_macro_f1": self.test_macro_f1,
            "test_accuracy": self.test_accuracy,
            "mean_train_loss": self.mean_train_loss,
            "n_k": list(self.n_k),
            "selection_clean_fraction": self.selection_clean_fraction,
            "peer_macro_f1": self.peer_macro_f1,
        }


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rounds: list[RoundRecord]
    final_params: ParamVector | None = None
    final_spectrum: SpectrumRecord | None = None
    train_noise_rate: float = 0.0

    @property
    def final_f1(self) -> float:
        w = self.config.eval_window
        return float(np.mean([r.test_macro_f1 for r in self.rounds[-w:]]))

    @property
    def final_peer_f1(self) -> float | None:
        w = self.config.eval_window
        vals = [r.peer_macro_f1 for r in self.rounds[-w:]]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    @property
    def best_f1(self) -> float:
        """Headline F1; for Co-teaching the better of the two peer networks."""
        peer = self.final_peer_f1
        return self.final_f1 if peer is None else max(self.final_f1, peer)

    @property
    def best_accuracy(self) -> float:
        return float(max(r.test_accuracy for r in self.rounds))

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "final_f1": self.final_f1,
            "final_peer_f1": self.final_peer_f1,
            "best_f1": self.best_f1,
            "best_accuracy": self.best_accuracy,
            "train_noise_rate": self.train_noise_rate,
            "rounds": [r.to_dict() for r in self.rounds],
            "spectra": [r.spectrum.to_dict() for r in self.rounds if r.spectrum is not None],
            "final_spectrum": self.final_spectrum.to_dict() if self.final_spectrum else None,
        }


@dataclass
class EngineState:
    global_params: ParamVector
    train: D.LabeledDataset
    test: D.LabeledDataset
    plan: D.PartitionPlan
    clients: list[ClientState]
    model: ModelSpec
    rng: RngStream


# ----------------------------------------------------------------- metrics

def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted class mean of F1; a class never predicted nor present scores 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def evaluate(params: ParamVector, model: ModelSpec, test: D.LabeledDataset) -> tuple[float, float]:
    """(macro F1, accuracy) on the clean labels of ``test``."""
    pred = predict(params, model, test.features)
    return macro_f1(pred, test.clean_labels, test.num_classes), float(np.mean(pred == test.clean_labels))


def sample_clients(num_clients: int, count: int, t: int, rng: RngStream) -> list[int]:
    """Uniform sample without replacement, a pure function of (rng identity, round)."""
    if not 0 <= count <= num_clients:
        raise ValueError(f"cannot sample {count} of {num_clients} clients")
    ids = rng.derive(STREAM_SAMPLE, t).choice(num_clients, size=count, replace=False)
    return sorted(int(i) for i in ids)


# ------------------------------------------------------------------- setup

def load_datasets(config: ExperimentConfig, rng: RngStream) -> tuple[D.LabeledDataset, D.LabeledDataset]:
    ds = config.data
    if ds.source == "blobs":
        means = D.class_means(ds.classes, ds.feature_dim)
        train = D.generate_blobs(ds.samples, ds.classes, ds.feature_dim, ds.spread,
                                 rng.derive(STREAM_DATA), means)
        test = D.generate_blobs(ds.test_samples, ds.classes, ds.feature_dim, ds.spread,
                                rng.derive(STREAM_TEST), means)
        return train, test
    train = D.load_delimited(ds.train_path, ds.delimiter)
    test = D.load_delimited(ds.test_path, ds.delimiter)
    m = max(train.num_classes, test.num_classes)
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("train and test files have different feature counts")
    return (D.LabeledDataset(train.features, train.observed_labels, train.clean_labels, m),
            D.LabeledDataset(test.features, test.observed_labels, test.clean_labels, m))


def make_partition(config: ExperimentConfig, train: D.LabeledDataset, rng: RngStream) -> D.PartitionPlan:
    ds, n = config.data, config.num_clients
    prng = rng.derive(STREAM_PARTITION)
    if ds.partition == "iid":
        return D.partition_iid(train, n, prng)
    if ds.partition == "sharding":
        return D.partition_sharding(train, n, ds.shards, prng)
    return D.partition_dirichlet(train, n, ds.dirichlet_beta, prng)


def setup(config: ExperimentConfig) -> EngineState:
    rng = RngStream(config.seed)
    train, test = load_datasets(config, rng)
    plan = make_partition(config, train, rng)
    plan.validate(len(train))
    if config.noise.kind == "replacement-file":
        train = D.load_label_replacement(config.noise.path, train)
    else:
        train = D.inject_noise(train, plan, config.noise, rng.derive(STREAM_NOISE))
    model = config.model.spec(train.features.shape[1], train.num_classes)
    params = init_params(model, rng.derive(STREAM_INIT))
    clients = [ClientState(k, plan.assignments[k], rng.derive(STREAM_CLIENT, k))
               for k in range(config.num_clients)]
    return EngineState(params, train, test, plan, clients, model, rng)


# -------------------------------------------------------------------- loop

def run_round(state: EngineState, config: ExperimentConfig, t: int,
              workers: int = 1) -> tuple[ParamVector, RoundRecord]:
    start = time.perf_counter()
    selected = sample_clients(config.num_clients, config.participants, t, state.rng)
    snapshot = state.global_params

    def work(k: int) -> LocalResult:
        return local_train(state.clients[k], snapshot, config.strategy, t, config.rounds,
                           state.train, state.model)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(k) for k in selected]

    done = [(k, r) for k, r in zip(selected, results) if not r.stats.skipped]
    uploads = [Upload(k, r.params, r.stats.n_k) for k, r in done]
    try:
        new_global = aggregate(config.aggregator, uploads, snapshot) if uploads else snapshot
    except ValueError as exc:
        raise RuntimeError(f"round {t}: aggregation failed: {exc}") from exc

    f1, acc = evaluate(new_global, state.model, state.test)
    n_k = [r.stats.n_k for _, r in done]
    total_n = sum(n_k)
    mean_loss = (float(sum(r.stats.mean_loss * r.stats.n_k for _, r in done) / total_n)
                 if total_n else None)

    clean_frac = peer_f1 = None
    if config.strategy.kind == "coteach" and done:
        clean_frac = float(sum(r.stats.clean_fraction * r.stats.n_k for _, r in done) / total_n)
        peers = [Upload(k, r.peer_params, r.stats.n_k) for k, r in done]
        peer_f1, _ = evaluate(aggregate(config.aggregator, peers, snapshot), state.model, state.test)

    spectrum = None
    if config.spectrum and state.model.rep_dim >= 2:
        spectrum = representation_spectrum(new_global, state.model, state.test, t)

    record = RoundRecord(t, selected, f1, acc, mean_loss, n_k, clean_frac, peer_f1, spectrum,
                         time.perf_counter() - start)
    return new_global, record


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    state = setup(config)
    records = []
    for t in range(config.rounds):
        state.global_params, record = run_round(state, config, t, workers)
        records.append(record)
        log.debug("round %d f1=%.4f acc=%.4f", t, record.test_macro_f1, record.test_accuracy)
    final_spectrum = None
    if state.model.rep_dim >= 2:
        final_spectrum = representation_spectrum(state.global_params, state.model, state.test,
                                                 config.rounds)
    return ExperimentReport(config, records, state.global_params, final_spectrum,
                            float(state.train.corrupted.mean()))


@dataclass
class RepeatSummary:
    reports: list[ExperimentReport]

    @property
    def final_f1s(self) -> list[float]:
        return [r.final_f1 for r in self.reports]

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_f1s))

    @property
    def spread(self) -> float:
        vals = self.final_f1s
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def derived_seeds(seed: int, repeat: int) -> list[int]:
    return [seed + i for i in range(repeat)]


def run_repeated(config: ExperimentConfig, repeat: int, workers: int = 1) -> RepeatSummary:
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    return RepeatSummary([run_experiment(config.with_seed(s), workers)
                          for s in derived_seeds(config.seed, repeat)])


def round_rows(records: Sequence[RoundRecord]) -> list[list[str]]:
    """Rows for rounds.csv, header first."""
    def fmt(v):
        return "" if v is None else repr(float(v))

    rows = [["round", "selected", "test_macro_f1", "test_accuracy", "mean_train_loss",
             "n_k", "selection_clean_fraction", "peer_macro_f1"]]
    for r in records:
        rows.append([str(r.round), " ".join(map(str, r.selected)), fmt(r.test_macro_f1),
                     fmt(r.test_accuracy), fmt(r.mean_train_loss), " ".join(map(str, r.n_k)),
                     fmt(r.selection_clean_fraction), fmt(r.peer_macro_f1)])
    return rows
