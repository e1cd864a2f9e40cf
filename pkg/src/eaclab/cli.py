"""Command-line entry point: validate, plan, run, state, resume.

Standard output carries machine-parseable canonical JSON/NDJSON only;
human-readable renderings and diagnostics go to standard error. Exit
codes: 0 success, 2 validation error, 3 runtime fault (paused/aborted),
4 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from eaclab.canon import canonical_json
from eaclab.capabilities import registry_from_lab_config
from eaclab.compiler import compile_spec, render_tree, static_check
from eaclab.errors import (
    CheckpointMismatchError,
    EacError,
    SpecSchemaError,
    SpecSyntaxError,
    StillBlockedError,
    UnschedulableError,
)
from eaclab.executor import Checkpoint, execute, resume as executor_resume
from eaclab.labstate import (
    StateEvent,
    apply_event,
    genesis_from_lab_config,
    replay,
    snapshot,
)
from eaclab.scheduler import plan_hash as compute_plan_hash, schedule
from eaclab.shims import SimFleet
from eaclab.specmodel import expand_sweeps, parse_spec, serialize_spec, spec_hash
from eaclab.telemetry import TelemetryStore

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_USAGE = 4

_INJECT_ALIASES = {
    "timeout": "comm_timeout",
    "comm_timeout": "comm_timeout",
    "error": "device_error",
    "device_error": "device_error",
    "noliquid": "no_liquid_detected",
    "no_liquid_detected": "no_liquid_detected",
    "implicit": "implicit_violation",
    "implicit_violation": "implicit_violation",
}


class _Usage(Exception):
    pass


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _Usage(f"cannot read {path}: {exc}") from exc


def _load_lab(path: str | None) -> dict:
    if path is None:
        path = os.environ.get("EAC_LAB")
    if path is None:
        raise _Usage("no lab config: pass --lab or set EAC_LAB")
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise _Usage(f"lab config {path} is not valid JSON: {exc}") from exc


def _parse_inject(arg: str | None) -> dict[int, str]:
    if not arg:
        return {}
    if "@" in arg:
        schedule_map = {}
        for part in arg.split(","):
            kind, _, index = part.partition("@")
            if kind not in _INJECT_ALIASES or not index.isdigit():
                raise _Usage(f"bad --inject entry {part!r}")
            schedule_map[int(index)] = _INJECT_ALIASES[kind]
        return schedule_map
    doc = json.loads(_read_text(arg))
    return {int(k): _INJECT_ALIASES.get(v, v) for k, v in doc.items()}


def _validate_pipeline(spec_path: str, lab_path: str | None):
    """Parse, expand, and statically check; returns artifacts or diagnostics."""
    lab = _load_lab(lab_path)
    registry = registry_from_lab_config(lab)
    genesis = genesis_from_lab_config(lab)
    text = _read_text(spec_path)
    try:
        spec = expand_sweeps(parse_spec(text))
    except SpecSyntaxError as exc:
        return None, [f"syntax error {exc.line}:{exc.column}: {exc}"], lab, registry, genesis
    except (SpecSchemaError, EacError) as exc:
        code = getattr(exc, "code", "bad_value")
        locus = getattr(exc, "locus", "$")
        return None, [f"{code} error {locus}: {exc}"], lab, registry, genesis
    diagnostics = static_check(spec, registry, genesis)
    lines = [d.render() for d in diagnostics if d.severity == "error"]
    if lines:
        return None, lines, lab, registry, genesis
    return spec, [d.render() for d in diagnostics], lab, registry, genesis


def cmd_validate(args) -> int:
    spec, lines, *_ = _validate_pipeline(args.spec, args.lab)
    for line in lines:
        print(line, file=sys.stderr)
    return EXIT_OK if spec is not None else EXIT_VALIDATION


def cmd_plan(args) -> int:
    spec, lines, lab, registry, genesis = _validate_pipeline(args.spec, args.lab)
    for line in lines:
        print(line, file=sys.stderr)
    if spec is None:
        return EXIT_VALIDATION
    dag = compile_spec(spec, registry, genesis)
    try:
        plan = schedule(dag, genesis, registry, policy=args.policy)
    except UnschedulableError as exc:
        print(f"unsatisfiable_binding error $: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(plan.serialize())
    print(render_tree(dag), file=sys.stderr)
    return EXIT_OK


def _run_dir(out: str, run_id: str) -> Path:
    path = Path(out) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_artifacts(run_dir: Path, result, plan, spec, seed: int, append: bool):
    mode = "a" if append else "w"
    with open(run_dir / "log.ndjson", mode, encoding="utf-8") as fh:
        for event in result.log:
            fh.write(canonical_json(event.to_dict()) + "\n")
    with open(run_dir / "telemetry.ndjson", mode, encoding="utf-8") as fh:
        for rec in result.telemetry:
            fh.write(canonical_json(rec.to_dict()) + "\n")
    with open(run_dir / "wire.ndjson", mode, encoding="utf-8") as fh:
        for frame in result.wire:
            fh.write(canonical_json(frame) + "\n")
    (run_dir / "plan.json").write_text(plan.serialize() + "\n", encoding="utf-8")
    (run_dir / "spec.json").write_text(serialize_spec(spec) + "\n", encoding="utf-8")
    (run_dir / "snapshot.json").write_bytes(snapshot(result.state) + b"\n")
    summary = {
        "run_id": result.run_id,
        "status": result.status,
        "seed": seed,
        "spec_hash": spec_hash(spec),
        "plan_hash": compute_plan_hash(plan),
        "telemetry_count": len(result.telemetry),
    }
    (run_dir / "result.json").write_text(canonical_json(summary) + "\n", encoding="utf-8")
    if result.checkpoint is not None:
        (run_dir / "checkpoint.json").write_text(
            canonical_json(result.checkpoint.to_dict()) + "\n", encoding="utf-8"
        )
    elif (run_dir / "checkpoint.json").exists():
        (run_dir / "checkpoint.json").unlink()
    return summary


def cmd_run(args) -> int:
    spec, lines, lab, registry, genesis = _validate_pipeline(args.spec, args.lab)
    for line in lines:
        print(line, file=sys.stderr)
    if spec is None:
        return EXIT_VALIDATION
    dag = compile_spec(spec, registry, genesis)
    try:
        plan = schedule(dag, genesis, registry, policy=args.policy)
    except UnschedulableError as exc:
        print(f"unsatisfiable_binding error $: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    fleet = SimFleet.from_lab_config(lab)
    for device in fleet.devices.values():
        device.rng.seed(device.config.seed + args.seed)
    shash = spec_hash(spec)
    run_id = f"run-{shash[:8]}-s{args.seed}"
    store = TelemetryStore()
    result = execute(
        plan,
        dag,
        genesis,
        registry,
        fleet,
        run_id=run_id,
        spec_hash=shash,
        fault_schedule=_parse_inject(args.inject),
        store=store,
    )
    run_dir = _run_dir(args.out, run_id)
    summary = _write_run_artifacts(run_dir, result, plan, spec, args.seed, append=False)
    (run_dir / "telemetry.csv").write_text(
        store.export_csv(run_id), encoding="utf-8"
    )
    print(canonical_json(summary))
    if result.fault is not None:
        print(
            f"fault {result.fault.kind} at {result.fault.node_id}: "
            f"{result.fault.detail}",
            file=sys.stderr,
        )
    return EXIT_OK if result.status == "completed" else EXIT_RUNTIME


def _load_run_state(run_dir: Path, lab: dict):
    genesis = genesis_from_lab_config(lab)
    events = []
    log_path = run_dir / "log.ndjson"
    if log_path.exists():
        for line in log_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                events.append(StateEvent.from_dict(json.loads(line)))
    return replay(genesis, events), events


def cmd_state(args) -> int:
    lab = _load_lab(args.lab)
    registry = registry_from_lab_config(lab)
    if args.run:
        state, _ = _load_run_state(Path(args.run), lab)
    else:
        state = genesis_from_lab_config(lab)
    table = []
    for device_id in sorted(state.devices):
        record = state.devices[device_id]
        window = (
            registry.get(record.capability).calibration_window
            if record.capability in registry
            else None
        )
        table.append(
            {
                "device_id": device_id,
                "capability": record.capability,
                "status": record.status,
                "holder": record.holder,
                "calibration_age_s": state.clock - record.last_calibrated,
                "calibration_window_s": window,
            }
        )
    print(canonical_json(table))
    for row in table:
        print(
            f"{row['device_id']:<16} {row['capability']:<14} {row['status']:<8} "
            f"cal_age={row['calibration_age_s']:.0f}s",
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_resume(args) -> int:
    run_dir = Path(args.run_dir)
    checkpoint_path = run_dir / "checkpoint.json"
    if not checkpoint_path.exists():
        raise _Usage(f"no checkpoint in {run_dir}")
    lab = _load_lab(args.lab)
    registry = registry_from_lab_config(lab)
    genesis = genesis_from_lab_config(lab)
    checkpoint = Checkpoint.from_dict(json.loads(checkpoint_path.read_text()))
    spec = parse_spec((run_dir / "spec.json").read_text(encoding="utf-8"))
    summary = json.loads((run_dir / "result.json").read_text(encoding="utf-8"))
    seed = int(summary.get("seed", 0))
    dag = compile_spec(spec, registry, genesis)
    plan = schedule(dag, genesis, registry, policy=json.loads(
        (run_dir / "plan.json").read_text())["policy"])
    state, events = _load_run_state(run_dir, lab)

    appended: list[StateEvent] = []
    if args.clear:
        event = StateEvent(
            seq=state.next_seq,
            time=state.clock,
            device_id=args.clear,
            kind="transition",
            payload={"to": "idle", "by": "operator"},
        )
        state = apply_event(state, event)
        appended.append(event)

    fleet = SimFleet.from_lab_config(lab)
    for device in fleet.devices.values():
        device.rng.seed(device.config.seed + seed)
    store = TelemetryStore()
    try:
        result = executor_resume(
            checkpoint, plan, dag, state, registry, fleet,
            spec_hash=summary["spec_hash"], store=store,
        )
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StillBlockedError as exc:
        print(f"still blocked: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    result.log[:0] = appended
    summary = _write_run_artifacts(run_dir, result, plan, spec, seed, append=True)
    print(canonical_json(summary))
    return EXIT_OK if result.status == "completed" else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eaclab",
        description="Declarative experiment stack: validate, plan, and run "
        "experiment configs against a simulated device fleet.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="statically check a spec")
    p.add_argument("spec")
    p.add_argument("--lab", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="compile and schedule a spec")
    p.add_argument("spec")
    p.add_argument("--lab", default=None)
    p.add_argument("--policy", choices=("fifo", "batched"), default="batched")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="execute a spec in simulation")
    p.add_argument("spec")
    p.add_argument("--lab", default=None)
    p.add_argument("--policy", choices=("fifo", "batched"), default="batched")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject", default=None,
                   help="fault schedule: kind@index[,kind@index...] or JSON file")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("state", help="print the device table")
    p.add_argument("--lab", default=None)
    p.add_argument("--run", default=None, help="run directory to replay")
    p.set_defaults(func=cmd_state)

    p = sub.add_parser("resume", help="continue a paused run")
    p.add_argument("run_dir")
    p.add_argument("--lab", default=None)
    p.add_argument("--clear", default=None,
                   help="device id whose fault an operator has cleared")
    p.set_defaults(func=cmd_resume)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
