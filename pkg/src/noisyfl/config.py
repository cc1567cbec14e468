"""INI-style experiment configuration.

Sections and keys (all optional except ``[data] source``)::

    [engine]      num_clients participants rounds seed eval_window spectrum
    [data]        source samples classes feature_dim spread test_samples
                  train_path test_path delimiter partition shards dirichlet_beta
    [model]       arch hidden_dim init_scale
    [noise]       kind rate_lo rate_hi path
    [strategy]    kind mu alpha beta forget_rate warmup_fraction svd_weight svd_loss
                  epochs batch_size lr momentum weight_decay
    [aggregator]  kind kappa epsilon max_iters tol

Unset keys take the defaults of the corresponding dataclass, which encode the
reference training setup (SGD lr 0.01, momentum 0.9, weight decay 5e-4, 5 local
epochs, batch 64, 100 clients with 10 per round, F1 averaged over the last 10 rounds).
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import warnings
from pathlib import Path

from .aggregate import AggregatorSpec, trim_count
from .data import NoiseSpec
from .engine import DataSpec, ExperimentConfig, ModelConfig
from .model import DEFAULT_SVD_WEIGHT
from .strategy import StrategySpec


class ConfigError(ValueError):
    pass


ENGINE_KEYS = ("num_clients", "participants", "rounds", "seed", "eval_window", "spectrum")

SECTIONS = {
    "engine": ExperimentConfig,
    "data": DataSpec,
    "model": ModelConfig,
    "noise": NoiseSpec,
    "strategy": StrategySpec,
    "aggregator": AggregatorSpec,
}


def _field_types(cls) -> dict[str, str]:
    names = ENGINE_KEYS if cls is ExperimentConfig else None
    return {f.name: str(f.type) for f in dataclasses.fields(cls) if names is None or f.name in names}


SCHEMA = {section: _field_types(cls) for section, cls in SECTIONS.items()}
SCHEMA["strategy"]["svd_loss"] = "bool"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(path: str, type_name: str, text: str):
    text = text.strip()
    try:
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "None" in type_name and text.lower() in ("", "none"):
        return None
    return text


def _sections_from_parser(parser: configparser.ConfigParser) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{section}: unknown section; expected one of {sorted(SCHEMA)}")
        values = {}
        for key, raw in parser.items(section):
            path = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key")
            values[key] = _convert(path, SCHEMA[section][key], raw)
        out[section] = values
    return out


def _build(sections: dict[str, dict]) -> ExperimentConfig:
    if "data" not in sections or "source" not in sections["data"]:
        raise ConfigError("data.source: a [data] section with a source is required")
    strategy = dict(sections.get("strategy", {}))
    if strategy.pop("svd_loss", False) and "svd_weight" not in strategy:
        strategy["svd_weight"] = DEFAULT_SVD_WEIGHT

    parts = {}
    for section, cls in SECTIONS.items():
        if section == "engine":
            continue
        values = strategy if section == "strategy" else sections.get(section, {})
        try:
            parts[section] = cls(**values)
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    try:
        config = ExperimentConfig(**sections.get("engine", {}), **parts)
    except ValueError as exc:
        path = "aggregator.kappa" if str(exc).startswith(("krum", "trimmed_mean")) else "engine"
        raise ConfigError(f"{path}: {exc}") from None

    agg = config.aggregator
    if agg.kind in ("trimmed_mean", "krum") and trim_count(agg.kappa, config.participants) == 0:
        warnings.warn(
            f"aggregator.kappa: {agg.kind} with kappa={agg.kappa} and {config.participants} "
            "participants excludes no client", stacklevel=3,
        )
    return config


def _parser(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    return parser


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse and validate config text; ``overrides`` maps ``section.key`` to raw values."""
    parser = _parser(text)
    for path, value in (overrides or {}).items():
        section, key = split_key(path)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    return _build(_sections_from_parser(parser))


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides)


def split_key(path: str) -> tuple[str, str]:
    section, _, key = path.partition(".")
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"{path}: unknown config key")
    return section, key


def config_to_text(config: ExperimentConfig) -> str:
    """Fully expanded INI text that parses back to ``config``."""
    d = config.to_dict()
    lines = ["[engine]"]
    for key in ENGINE_KEYS:
        lines.append(f"{key} = {_fmt(d[key])}")
    for section in ("data", "model", "noise", "strategy", "aggregator"):
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in d[section].items():
            if value is not None:
                lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_report(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh)["config"])
