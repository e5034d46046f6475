"""Command line entry point: ``lab run``, ``lab report`` and ``lab gen-data``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure
(partial outputs and a ``failed`` record are still written).
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numba
import numpy as np
import pydantic

from . import __version__
from .config import load_config
from .errors import ConfigError, LabError
from .experiments import DRIVERS, clean, theta_hash, write_json
from .models import binary_teacher_generate, linreg_generate
from .numerics import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def versions() -> dict:
    return {"loglandscape": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba.__version__, "pydantic": pydantic.__version__}


def _run_dir(root: Path, experiment: str, seed: int) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = root / experiment / f"{stamp}-{seed}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def run(config_path, out_root=None) -> tuple[dict, Path]:
    """Validate, execute and persist one experiment; returns the record and its directory.

    Raises :class:`ConfigError` before creating anything when the config is
    invalid.  Numerical failures propagate after ``record.json`` is written
    with ``status = "failed"``.
    """
    cfg, text = load_config(config_path)
    root = Path(out_root) if out_root is not None else Path(cfg.output_dir)
    out = _run_dir(root, cfg.experiment, cfg.seed)
    (out / "config.json").write_text(text)
    record = {"experiment": cfg.experiment, "seed": cfg.seed, "config": cfg.model_dump(),
              "versions": versions(), "started": _now(), "status": "running"}
    try:
        outcome = DRIVERS[cfg.experiment](cfg, out)
    except LabError as exc:
        partial = getattr(exc, "outcome", None)
        record.update(status="failed", finished=_now(), error=f"{type(exc).__name__}: {exc}",
                      metrics=partial.metrics if partial else {},
                      headline=partial.headline if partial else None,
                      provenance={"seed": cfg.seed,
                                  "theta_hash": theta_hash(partial.theta) if partial else None},
                      files=sorted(p.name for p in out.iterdir() if p.name != "record.json"))
        write_json(out / "record.json", record)
        exc.run_dir = out
        raise
    provenance = {"seed": cfg.seed, "theta_hash": theta_hash(outcome.theta)}
    record.update(status="ok", finished=_now(), metrics=outcome.metrics, headline=outcome.headline,
                  provenance=provenance, files=sorted(["config.json", *outcome.files]))
    if outcome.metrics:
        write_json(out / "metrics.json", {"experiment": cfg.experiment, "seed": cfg.seed,
                                          "config": cfg.model_dump(), "provenance": provenance,
                                          "headline": outcome.headline, "metrics": outcome.metrics})
        record["files"] = sorted([*record["files"], "metrics.json"])
    write_json(out / "record.json", record)
    return clean(record), out


def _deviation(value, theory):
    if value is None or theory is None:
        return None
    if theory == 0:
        return abs(value)
    return abs(value - theory) / abs(theory)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def report_rows(run_dir) -> list[dict]:
    """One row per ``record.json`` under ``run_dir``, sorted by start time."""
    root = Path(run_dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    rows = []
    for path in sorted(root.rglob("record.json")):
        try:
            rec = json.loads(path.read_text())
            head = rec.get("headline") or {}
            rows.append({"started": rec["started"], "run": path.parent.name,
                         "experiment": rec["experiment"], "status": rec["status"],
                         "metric": head.get("name"), "value": head.get("value"),
                         "theory": head.get("theory"),
                         "deviation": _deviation(head.get("value"), head.get("theory"))})
        except (OSError, ValueError, KeyError, TypeError, AttributeError):
            rows.append({"started": "", "run": path.parent.name, "experiment": "?",
                         "status": "CORRUPT", "metric": None, "value": None, "theory": None,
                         "deviation": None})
    if not rows:
        raise ConfigError(f"no run records found under {root}")
    rows.sort(key=lambda r: (r["started"], r["run"]))
    return rows


def format_report(rows) -> str:
    cols = ("run", "experiment", "status", "metric", "value", "theory", "deviation")
    table = [cols] + [tuple(_fmt(r[c]) for c in cols) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in table) + "\n"


def gen_data(d: int, n: int, seed: int, out, kind: str = "linreg") -> Path:
    if d < 1 or n < 1:
        raise ConfigError("--d and --n must be positive")
    rng = RngStream(seed).substream(0)
    data = linreg_generate(d, n, rng) if kind == "linreg" else binary_teacher_generate(d, n, rng)
    path = Path(out)
    if path.suffix != ".csv":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "dataset.csv"
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(path)
    return path


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lab", description="Loss-landscape SGD experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="override the config's output_dir")
    rep = sub.add_parser("report", help="summarise the run records under a directory")
    rep.add_argument("dir")
    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="CSV path or directory")
    g.add_argument("--kind", choices=("linreg", "teacher"), default="linreg")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "run":
            record, out = run(args.config, args.out)
            head = record.get("headline") or {}
            print(f"{out}\n{head.get('name')} = {_fmt(head.get('value'))} "
                  f"(theory {_fmt(head.get('theory'))})")
        elif args.command == "report":
            sys.stdout.write(format_report(report_rows(args.dir)))
        else:
            print(gen_data(args.d, args.n, args.seed, args.out, args.kind))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LabError as exc:
        where = getattr(exc, "run_dir", None)
        print(f"numerical failure: {exc}" + (f" (partial outputs in {where})" if where else ""),
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
