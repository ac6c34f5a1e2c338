"""Command-line entry point: run one scenario and write its log."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from almpc.scenario import CONTROLLERS, ScenarioAborted, ScenarioConfig, run, write_log

EXIT_IO = 2
EXIT_ABORTED = 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="almpc-sim", description="Closed-loop fault-tolerant AUV tracking scenario.")
    ap.add_argument("--case", type=int, choices=(1, 2), default=None, help="scenario (default 1)")
    ap.add_argument("--controller", choices=CONTROLLERS, default=None, help="controller (default almpc)")
    ap.add_argument("--seed", type=int, default=None, help="measurement-noise seed (default 0)")
    ap.add_argument("--out", default="out", help="output directory for run.csv and summary.json")
    ap.add_argument("--config", default=None, help="JSON file with scenario overrides; flags win over it")
    ap.add_argument("--dump-telemetry", action="store_true", help="also write per-mode solver telemetry.csv")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _check_writable(out: Path) -> str | None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        return f"cannot write to {out}: {exc.strerror or exc}"
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    overrides = {}
    if args.config is not None:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"almpc-sim: bad config file {args.config}: {exc}", file=sys.stderr)
            return EXIT_IO
    for key in ("case", "controller", "seed"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    try:
        cfg = ScenarioConfig.from_dict(overrides)
    except (TypeError, ValueError, KeyError) as exc:
        print(f"almpc-sim: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_IO

    out = Path(args.out)
    err = _check_writable(out)
    if err is not None:
        print(f"almpc-sim: {err}", file=sys.stderr)
        return EXIT_IO

    code = 0
    try:
        result = run(cfg)
    except ScenarioAborted as exc:
        print(f"almpc-sim: run aborted: {exc}; partial log written", file=sys.stderr)
        result, code = exc.log, EXIT_ABORTED
    try:
        write_log(result, out, telemetry=args.dump_telemetry)
    except OSError as exc:
        print(f"almpc-sim: cannot write log to {out}: {exc}", file=sys.stderr)
        return EXIT_IO

    print(f"case {cfg.case} {cfg.controller}: {result.n_rows} rows -> {out}")
    if result.summary["metrics"] is not None:
        print("RMSE x={x:.4f} y={y:.4f} psi={psi:.4f}".format(**result.summary["metrics"]["RMSE"]))
    for f in result.summary["faults"]:
        print(f"fault at t={f['t_fault']:g}s: T_det={f['T_det']} T_acc={f['T_acc']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
