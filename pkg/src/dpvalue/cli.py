"""Config-driven experiment runner.

Subcommands: ``run <config>`` executes an experiment and writes result.json,
summary.csv, config.echo and a MANIFEST of sha256 digests; ``validate
<config>`` only parses and checks the config; ``plot <result-dir> <kind>``
turns a result.json into two-column .dat files for external plotting. The
environment variable DPVALUE_OUTPUT_ROOT reroots relative output
directories.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, echo_config, load_config
from .experiments import RUNNERS


def _output_dir(cfg_output_dir: str) -> Path:
    root = os.environ.get("DPVALUE_OUTPUT_ROOT")
    path = Path(cfg_output_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_error(outdir: Path | None, exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["field"] = exc.field_path
    if outdir is not None:
        try:
            outdir.mkdir(parents=True, exist_ok=True)
            with open(outdir / "error.json", "w", encoding="utf-8") as fh:
                json.dump(record, fh, indent=2)
        except OSError:
            pass
    print(json.dumps(record), file=sys.stderr)


def _write_manifest(outdir: Path) -> None:
    lines = []
    for path in sorted(outdir.iterdir()):
        if path.name == "MANIFEST" or not path.is_file():
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.name}")
    (outdir / "MANIFEST").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        _write_error(None, exc)
        return 2
    outdir = _output_dir(args.output or cfg.output_dir)
    try:
        runner = RUNNERS[cfg.kind]
        doc, rows, extras = runner(cfg)
    except Exception as exc:  # noqa: BLE001 - error record is the contract
        _write_error(outdir, exc)
        return 1
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "result.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outdir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)
    for name, extra_rows in extras.items():
        with open(outdir / name, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerows(extra_rows)
    (outdir / "config.echo").write_text(echo_config(cfg), encoding="utf-8")
    _write_manifest(outdir)
    print(f"wrote {outdir}")
    return 0


def cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except ConfigError as exc:
        _write_error(None, exc)
        return 2
    print("ok")
    return 0


def _dat(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(" ".join(format(float(v), ".10g") for v in row) + "\n")


def cmd_plot(args) -> int:
    result_path = Path(args.result_dir) / "result.json"
    if not result_path.exists():
        print(f"no result.json under {args.result_dir}", file=sys.stderr)
        return 2
    doc = json.loads(result_path.read_text(encoding="utf-8"))
    outdir = Path(args.result_dir)
    kind = args.kind
    if kind == "variance-probe":
        if doc.get("kind") != "variance-probe":
            print("result is not a variance probe", file=sys.stderr)
            return 2
        for mode, probe in doc["probes"].items():
            _dat(outdir / f"var_{mode}.dat", zip(probe["ks"], probe["variances"]))
    elif kind == "removal":
        if doc.get("kind") != "removal":
            print("result is not a removal experiment", file=sys.stderr)
            return 2
        for order, curve in doc["curves"].items():
            name = order.replace("-", "_")
            if curve.get("stderr"):
                rows = [
                    (f, s, s - e, s + e)
                    for f, s, e in zip(curve["fractions"], curve["scores"], curve["stderr"])
                ]
            else:
                rows = list(zip(curve["fractions"], curve["scores"]))
            _dat(outdir / f"removal_{name}.dat", rows)
    elif kind == "auc-q":
        if doc.get("kind") != "noisy-label":
            print("result is not a noisy-label experiment", file=sys.stderr)
            return 2
        series: dict[str, list[tuple[float, float]]] = {}
        for mode, values in doc["auc"].items():
            if mode.startswith("corr_y(q="):
                q = float(mode[len("corr_y(q=") : -1])
                series.setdefault("corr_y", []).append((q, float(np.mean(values))))
            elif mode == "corr_x":
                series.setdefault("corr_y", []).append((0.0, float(np.mean(values))))
            else:
                series.setdefault(mode, []).append((0.0, float(np.mean(values))))
        for mode, rows in series.items():
            _dat(outdir / f"auc_q_{mode}.dat", sorted(rows))
    else:
        print(f"unknown plot kind {kind!r}", file=sys.stderr)
        return 2
    print(f"wrote plot data under {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpvalue")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="override the config output_dir")
    p_run.set_defaults(func=cmd_run)
    p_val = sub.add_parser("validate", help="parse and validate a config")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)
    p_plot = sub.add_parser("plot", help="emit plot-ready .dat files")
    p_plot.add_argument("result_dir")
    p_plot.add_argument("kind", choices=["variance-probe", "removal", "auc-q"])
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
