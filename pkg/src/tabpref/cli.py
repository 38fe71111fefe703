"""Command line entry point.

Exit codes: 0 success, 1 user error (bad config, bad data, missing
artifact), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from tabpref.exceptions import TabprefError
from tabpref.pipeline import STAGES, build_config, emit_report, open_run, run_stage, validate_report

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("tabpref")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabpref", description="Preference-tuned tabular synthesis pipeline.")
    p.add_argument("command", choices=[*STAGES, "run"], help="stage to execute, or 'run' for all of them")
    p.add_argument("--run-dir", required=True, help="directory holding the run's artifacts")
    p.add_argument("--config", help="JSON config file (overrides the defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.rho=0.75 (repeatable; wins over --config)")
    p.add_argument("--csv", help="shorthand for --set data.csv=PATH")
    p.add_argument("--target", help="shorthand for --set data.target=NAME")
    p.add_argument("--rules", help="shorthand for --set preference.rules=PATH")
    p.add_argument("--validate", action="store_true", help="check report.json against the published schema")
    return p


def _setup_logging(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = list(args.overrides)
    for flag, key in ((args.csv, "data.csv"), (args.target, "data.target"), (args.rules, "preference.rules")):
        if flag is not None:
            overrides.insert(0, f"{key}={json.dumps(flag)}")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _setup_logging(run_dir)
    try:
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else None
        cfg = build_config(file_cfg, overrides)
        run = open_run(run_dir, cfg)
        stages = list(STAGES) if args.command == "run" else [args.command]
        for name in stages:
            log.info("stage %s", name)
            run_stage(run, name)
        if args.validate:
            validate_report(emit_report(run) if args.command != "report" else json.loads(run.need("report").read_text()))
        return EXIT_OK
    except (TabprefError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.error("internal error: %s\n%s", exc, traceback.format_exc())
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        log.removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
