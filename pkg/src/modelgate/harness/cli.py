"""`modelgate-sim`: run scenario documents and replay persisted logs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..analytics import CallLog, window_stats
from .scenario import Scenario, ScenarioAborted, run_scenario


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = Scenario.from_file(Path(args.scenario))
    if args.seed is not None:
        raw = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        raw["seed"] = args.seed
        scenario = Scenario.from_dict(raw)
    try:
        report = run_scenario(scenario, log_dir=Path(args.log_dir) if args.log_dir else None)
    except ScenarioAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if exc.report is not None and args.out:
            Path(args.out).write_text(exc.report.to_json(), encoding="utf-8")
            print(f"partial report written to {args.out}", file=sys.stderr)
        return 1
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report written to {args.out}")
    else:
        print(text)
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    log = CallLog.load(Path(args.log))
    entries = log.entries()
    out: dict = {"entries": len(entries)}
    if args.stats:
        models = sorted({e.served.served_by.render() for e in entries})
        if args.model:
            models = [args.model]
        out["window"] = args.window
        out["models"] = {
            m: window_stats(log, _parse(m), args.window).to_json_dict() for m in models
        }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _parse(model: str):
    from ..protocol import parse_model_id

    return parse_model_id(model)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="modelgate-sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario document")
    run_p.add_argument("--scenario", required=True, help="path to scenario JSON")
    run_p.add_argument("--seed", type=int, default=None, help="override the document seed")
    run_p.add_argument("--out", default=None, help="write the report JSON here")
    run_p.add_argument("--log-dir", default=None, help="persist call-log segments here")
    run_p.set_defaults(func=_cmd_run)

    replay_p = sub.add_parser("replay", help="reload persisted log segments")
    replay_p.add_argument("--log", required=True, help="directory with log-*.jsonl segments")
    replay_p.add_argument("--stats", action="store_true", help="recompute windowed usage stats")
    replay_p.add_argument("--window", type=int, default=1000)
    replay_p.add_argument("--model", default=None, help="restrict stats to one model id")
    replay_p.set_defaults(func=_cmd_replay)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
