"""Command line front end: run, compare, sweep, validate.

Exit codes: 0 success, 2 configuration or input error, 3 invariant
violation inside the simulator.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any

import click

from .config import ConfigError, SimConfig, config_hash, dump_config, load_config, workload_identity
from .sim.engine import InvariantViolation, Simulation, SimulationStuck
from .sim.events import trace_to_ndjson
from .sim.metrics import Metrics

EXIT_CONFIG = 2
EXIT_INVARIANT = 3


class InputError(click.ClickException):
    exit_code = EXIT_CONFIG


def _load(path: str, seed: int | None) -> SimConfig:
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        raise InputError(f"invalid config {path}: {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    return cfg if seed is None else replace(cfg, seed=seed)


def _summary(metrics: Metrics, cfg: SimConfig) -> str:
    rows = [("config_hash", config_hash(cfg)), ("seed", str(cfg.seed))]
    rows += [(name, _fmt(getattr(metrics, name))) for name in Metrics.SCALARS]
    width = max(len(k) for k, _ in rows)
    return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _report(metrics: Metrics, cfg: SimConfig) -> dict[str, Any]:
    return {
        "config_hash": config_hash(cfg),
        "workload_identity": workload_identity(cfg),
        "seed": cfg.seed,
        "metrics": metrics.to_dict(),
    }


def _csv(rows: list[dict[str, Any]], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def execute(cfg: SimConfig, out: Path | None, trace: bool) -> Metrics:
    """Run one simulation and write its report files into ``out``."""
    sim = Simulation(cfg)
    try:
        result = sim.run()
    except (InvariantViolation, SimulationStuck) as exc:
        if out is not None and trace:
            out.mkdir(parents=True, exist_ok=True)
            (out / "trace.ndjson").write_text(trace_to_ndjson(sim.loop.trace), encoding="utf-8")
        raise
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report = _report(result.metrics, cfg)
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        row = {"config_hash": report["config_hash"], "seed": cfg.seed}
        row.update({m: getattr(result.metrics, m) for m in Metrics.SCALARS})
        (out / "metrics.csv").write_text(_csv([row], list(row)), encoding="utf-8")
        (out / "summary.txt").write_text(_summary(result.metrics, cfg), encoding="utf-8")
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        if trace:
            (out / "trace.ndjson").write_text(trace_to_ndjson(result.trace), encoding="utf-8")
    return result.metrics


def _fail_invariant(exc: Exception) -> None:
    click.echo(f"invariant violated: {exc}", err=True)
    sys.exit(EXIT_INVARIANT)


@click.group()
@click.version_option(package_name="shufflesim")
def main() -> None:
    """Simulate an adaptive shuffle service on a desk-scale cluster."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for report files.")
@click.option("--trace", is_flag=True, help="Also write trace.ndjson.")
def run(config_path: str, seed: int | None, out: str | None, trace: bool) -> None:
    """Run one experiment."""
    cfg = _load(config_path, seed)
    try:
        metrics = execute(cfg, Path(out) if out else None, trace)
    except (InvariantViolation, SimulationStuck) as exc:
        _fail_invariant(exc)
    click.echo(_summary(metrics, cfg), nl=False)


def _read_run(path: Path) -> dict[str, Any]:
    try:
        data = json.loads((path / "metrics.json").read_text(encoding="utf-8"))
    except OSError:
        raise InputError(f"{path}: no metrics.json") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}/metrics.json: {exc}") from None
    for key in ("workload_identity", "config_hash", "metrics"):
        if key not in data:
            raise InputError(f"{path}/metrics.json: missing {key}")
    return data


def ratio(value: float, base: float) -> float:
    if base == 0:
        return 1.0 if value == 0 else math.inf
    return value / base


def compare_runs(baseline: dict[str, Any], others: dict[str, dict[str, Any]]) -> list[dict[str, Any]]:
    """Baseline-normalised ratios, one row per run, in the given order."""
    ident = baseline["workload_identity"]
    rows = []
    for name, data in others.items():
        if data["workload_identity"] != ident:
            raise InputError(f"{name}: workload differs from the baseline")
        row: dict[str, Any] = {"run": name, "config_hash": data["config_hash"]}
        for metric in Metrics.SCALARS:
            if metric not in baseline["metrics"]:
                raise InputError(f"baseline: missing metric {metric}")
            if metric not in data["metrics"]:
                raise InputError(f"{name}: missing metric {metric}")
            row[metric] = round(ratio(data["metrics"][metric], baseline["metrics"][metric]), 6)
        rows.append(row)
    return rows


@main.command()
@click.argument("runs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--baseline", required=True, type=click.Path(file_okay=False), help="Run directory to normalise by.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the table as CSV here.")
def compare(runs: tuple[str, ...], baseline: str, out: str | None) -> None:
    """Compare run directories against a baseline run."""
    base = _read_run(Path(baseline))
    others = {r: _read_run(Path(r)) for r in runs}
    rows = compare_runs(base, others)
    columns = ["run", "config_hash", *Metrics.SCALARS]
    text = _csv(rows, columns)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


def _parse_param(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    if not sep or not key.strip() or not values.strip():
        raise InputError(f"--param expects key=v1,v2,...: {text!r}")
    return key.strip(), [v.strip() for v in values.split(",")]


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    try:
        for part in text.split(","):
            lo, sep, hi = part.partition("-")
            seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    except ValueError:
        raise InputError(f"--seeds expects e.g. 0-4,9: {text!r}") from None
    return seeds


def _sweep_one(args: tuple[SimConfig, str, bool]) -> tuple[str, Metrics | str]:
    cfg, out, trace = args
    try:
        return out, execute(cfg, Path(out), trace)
    except (InvariantViolation, SimulationStuck) as exc:
        return out, str(exc)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seeds", default=None, help="Seed list such as 0-4,9 (default: the config seed).")
@click.option("--param", "params", multiple=True, help="key=v1,v2 grid axis; repeatable.")
@click.option("--trace", is_flag=True)
@click.option("--jobs", type=click.IntRange(1), default=1, help="Simulations to run in parallel.")
def sweep(config_path: str, out: str, seeds: str | None, params: tuple[str, ...], trace: bool, jobs: int) -> None:
    """Run the cross product of seeds and parameter values."""
    base = _load(config_path, None)
    axes = [_parse_param(p) for p in params]
    seed_list = _parse_seeds(seeds) if seeds else [base.seed]
    root = Path(out)
    work = []
    labels = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        try:
            cfg = base.with_(**{k: v for (k, _), v in zip(axes, combo)})
        except ConfigError as exc:
            raise InputError(str(exc)) from None
        for seed in seed_list:
            cfg_s = replace(cfg, seed=seed)
            name = "_".join([f"{k}={v}" for (k, _), v in zip(axes, combo)] + [f"seed={seed}"])
            work.append((cfg_s, str(root / name), trace))
            labels.append(({k: v for (k, _), v in zip(axes, combo)}, cfg_s))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, work))
    else:
        results = [_sweep_one(w) for w in work]
    rows = []
    failed = []
    for (settings, cfg), (path, outcome) in zip(labels, results):
        if isinstance(outcome, str):
            failed.append(f"{path}: {outcome}")
            continue
        row: dict[str, Any] = {"run": Path(path).name, "config_hash": config_hash(cfg), "seed": cfg.seed}
        row.update({m: getattr(outcome, m) for m in Metrics.SCALARS})
        rows.append(row)
    root.mkdir(parents=True, exist_ok=True)
    columns = ["run", "config_hash", "seed", *Metrics.SCALARS]
    text = _csv(rows, columns)
    (root / "sweep.csv").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)
    if failed:
        for line in failed:
            click.echo(f"invariant violated: {line}", err=True)
        sys.exit(EXIT_INVARIANT)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def validate(config_path: str) -> None:
    """Check a config file without running it."""
    cfg = _load(config_path, None)
    click.echo(f"ok {config_hash(cfg)}")


if __name__ == "__main__":
    main()
