"""Command line: ``noisyfl run | sweep | spectrum | validate``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, config_from_report, config_to_text, load_config, split_key
from .diagnostics import collapse_gap, representation_spectrum, write_spectrum_csv
from .engine import (ExperimentReport, RepeatSummary, derived_seeds, load_datasets,
                     round_rows, run_experiment)
from .numcore import ParamVector, RngStream

log = logging.getLogger("noisyfl")

OUT_ENV = "NOISYFL_OUT"
SUMMARY_COLUMNS = ["seed", "final_f1", "best_f1", "best_accuracy", "train_noise_rate"]


@dataclass
class RunManifest:
    config_path: str
    out_dir: str
    repeat: int = 1
    seed: int | None = None
    workers: int = 1
    rounds_csv: bool = True
    spectrum_csv: bool = False
    json_report: bool = True


class OutputExists(RuntimeError):
    pass


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def write_run(report: ExperimentReport, out: Path, manifest: RunManifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if manifest.json_report:
        (out / "report.json").write_text(report_json(report))
        (out / "model.json").write_text(json.dumps(report.final_params.to_dict()) + "\n")
    if manifest.rounds_csv:
        with open(out / "rounds.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(round_rows(report.rounds))
    if manifest.spectrum_csv:
        records = [r.spectrum for r in report.rounds if r.spectrum is not None]
        if not records and report.final_spectrum is not None:
            records = [report.final_spectrum]
        write_spectrum_csv(out / "spectrum.csv", records)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "wall_time"])
        w.writerows([r.round, f"{r.wall_time:.6f}"] for r in report.rounds)


def _summary_row(report: ExperimentReport) -> list:
    return [report.config.seed, repr(report.final_f1), repr(report.best_f1),
            repr(report.best_accuracy), repr(report.train_noise_rate)]


def _claim(out: Path) -> None:
    for name in ("report.json", "summary.csv"):
        if (out / name).exists():
            raise OutputExists(f"{out / name} exists; refusing to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _fail(out: Path, exc: BaseException) -> int:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
    except OSError:
        pass
    print(f"error: {exc}", file=sys.stderr)
    return 1


def _execute(config, manifest: RunManifest, out: Path) -> RepeatSummary:
    reports = []
    for s in derived_seeds(config.seed, manifest.repeat):
        cfg = config.with_seed(s)
        if manifest.spectrum_csv and not cfg.spectrum:
            cfg = replace(cfg, spectrum=True)
        report = run_experiment(cfg, manifest.workers)
        target = out if manifest.repeat == 1 else out / f"seed-{s}"
        write_run(report, target, manifest)
        print(f"seed={s} final_f1={report.final_f1:.4f}")
        reports.append(report)
    summary = RepeatSummary(reports)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(_summary_row(r) for r in reports)
    print(f"final_f1 mean={summary.mean:.4f} spread={summary.spread:.4f} over {len(reports)} seed(s)")
    return summary


def run(manifest: RunManifest, overrides: dict[str, str] | None = None) -> int:
    """Execute a manifest; 0 iff every repeat finished and every file was written."""
    out = Path(manifest.out_dir)
    try:
        _claim(out)
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        overrides = dict(overrides or {})
        if manifest.seed is not None:
            overrides["engine.seed"] = str(manifest.seed)
        config = load_config(manifest.config_path, overrides)
        _execute(config, manifest, out)
    except Exception as exc:  # noqa: BLE001 - any failure becomes a flagged partial output
        return _fail(out, exc)
    return 0


def sweep(manifest: RunManifest, axis: str, values: Sequence[str]) -> int:
    """One run per axis value, plus a combined ``summary.csv`` keyed by the value."""
    out = Path(manifest.out_dir)
    try:
        split_key(axis)
        _claim(out)
    except (ConfigError, OutputExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = []
    try:
        base = {} if manifest.seed is None else {"engine.seed": str(manifest.seed)}
        configs = [load_config(manifest.config_path, {**base, axis: v}) for v in values]
        for value, config in zip(values, configs):
            print(f"{axis}={value}")
            summary = _execute(config, manifest, out / f"{axis}={value}")
            rows.extend([axis, value, *_summary_row(r)] for r in summary.reports)
    except Exception as exc:  # noqa: BLE001
        return _fail(out, exc)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", *SUMMARY_COLUMNS])
        w.writerows(rows)
    return 0


def spectrum(run_dir, out_file=None, head: int = 20) -> int:
    """Recompute the representation spectrum of a saved final model on its test set."""
    run_dir = Path(run_dir)
    config = config_from_report(run_dir / "report.json")
    params = ParamVector.from_dict(json.loads((run_dir / "model.json").read_text()))
    _, test = load_datasets(config, RngStream(config.seed))
    model = config.model.spec(test.features.shape[1], test.num_classes)
    record = representation_spectrum(params, model, test, config.rounds)
    target = Path(out_file) if out_file else run_dir / "final_spectrum.csv"
    if target.exists():
        print(f"error: {target} exists; refusing to overwrite", file=sys.stderr)
        return 2
    write_spectrum_csv(target, [record])
    head = min(head, len(record.singular_values))
    print(f"collapse_gap(head={head})={collapse_gap(record, head):.4f} eq1={record.eq1_value:.6f}")
    return 0


def _default_out(config_path: str) -> str:
    root = os.environ.get(OUT_ENV, "runs")
    return str(Path(root) / Path(config_path).stem)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisyfl", description="Federated learning with noisy labels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<config stem>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--repeat", type=int, default=1)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--spectrum", action="store_true", help="record and write per-round spectra")
        sp.add_argument("--no-rounds-csv", action="store_true")

    common(sub.add_parser("run", help="run one experiment (optionally repeated over seeds)"))
    sw = sub.add_parser("sweep", help="run once per value of one config key")
    common(sw)
    sw.add_argument("--axis", required=True, help="config key such as aggregator.kind")
    sw.add_argument("--values", required=True, help="comma-separated values")

    sp = sub.add_parser("spectrum", help="spectrum of a saved run's final model")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.add_argument("--head", type=int, default=20)

    va = sub.add_parser("validate", help="check a config and print it fully expanded")
    va.add_argument("config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        try:
            print(config_to_text(load_config(args.config)), end="")
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0
    if args.command == "spectrum":
        return spectrum(args.run_dir, args.out, args.head)
    if args.repeat < 1:
        print("error: --repeat must be >= 1", file=sys.stderr)
        return 2
    manifest = RunManifest(args.config, args.out or _default_out(args.config), args.repeat,
                           args.seed, args.workers, not args.no_rounds_csv, args.spectrum)
    if args.command == "run":
        return run(manifest)
    return sweep(manifest, args.axis, [v.strip() for v in args.values.split(",")])


if __name__ == "__main__":
    sys.exit(main())
