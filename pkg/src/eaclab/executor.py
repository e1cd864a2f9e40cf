"""Plan execution against the simulated fleet.

Strictly single-threaded and deterministic: dispatch order is a pure
function of the plan, every log append goes through one serialized event
sequence, and virtual time advances only here. Faults map to pause /
abort / recover dispositions; paused runs checkpoint and can resume
deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from eaclab.capabilities import CapabilityRegistry
from eaclab.compiler import WorkflowDAG
from eaclab.errors import (
    CheckpointMismatchError,
    SimFault,
    StabilizationTimeoutError,
    StillBlockedError,
)
from eaclab.labstate import LabState, StateEvent, apply_event
from eaclab.scheduler import ExecutionPlan, plan_hash as compute_plan_hash
from eaclab.shims import SimFleet, WireFrame, encode_operation
from eaclab.telemetry import TelemetryRecord, TelemetryStore
from eaclab.units import Quantity

FAULT_KINDS = frozenset(
    {"device_error", "comm_timeout", "no_liquid_detected", "implicit_violation"}
)

# Stabilization defaults; the hold duration itself comes from the step.
STABILIZE_REL_TOL = 1e-2
STABILIZE_CAP_S = 600.0

_RETRY_BUDGET = 1  # automatic retries for idempotent operations

_TELEMETRY_UNITS = {
    "conductivity": "S/cm",
    "concentration": "mol/kg",
    "temperature": "K",
    "mass": "g",
    "dispensed_volume": "mL",
}


@dataclass(frozen=True)
class FaultEvent:
    kind: str
    device_id: str
    node_id: str
    detail: str = ""
    predicate: str | None = None  # violated predicate for implicit_violation

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.kind == "implicit_violation" and not self.predicate:
            raise ValueError("implicit_violation must name its predicate")


@dataclass(frozen=True)
class Checkpoint:
    run_id: str
    last_committed_node: str | None
    state_epoch: int
    plan_hash: str

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "last_committed_node": self.last_committed_node,
            "state_epoch": self.state_epoch,
            "plan_hash": self.plan_hash,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Checkpoint":
        return cls(
            run_id=obj["run_id"],
            last_committed_node=obj["last_committed_node"],
            state_epoch=obj["state_epoch"],
            plan_hash=obj["plan_hash"],
        )


@dataclass
class RunResult:
    run_id: str
    status: str  # completed | paused | aborted
    telemetry: list[TelemetryRecord]
    log: list[StateEvent]
    wire: list[dict]
    state: LabState
    checkpoint: Checkpoint | None = None
    fault: FaultEvent | None = None


def runtime_precheck(
    node,
    device_id: str,
    state: LabState,
    registry: CapabilityRegistry,
    run_id: str,
    capability: str,
) -> FaultEvent | None:
    """Live-state gate run immediately before every dispatch.

    Lifecycle operations (connect/disconnect/teardown) are exempt from
    calibration and safety checks so that teardown is always executable.
    """
    record = state.devices.get(device_id)
    if record is None:
        return FaultEvent("device_error", device_id, node.node_id, "unknown device")
    if record.holder not in (None, run_id):
        return FaultEvent(
            "device_error", device_id, node.node_id,
            f"occupied by {record.holder}",
        )
    if record.status == "fault":
        return FaultEvent("device_error", device_id, node.node_id, "device faulted")
    if record.status == "offline":
        return FaultEvent("device_error", device_id, node.node_id, "device offline")
    if node.kind in ("connect", "teardown"):
        return None
    if capability in registry:
        schema = registry.get(capability)
        age = state.clock - record.last_calibrated
        if age > schema.calibration_window:
            return FaultEvent(
                "implicit_violation", device_id, node.node_id,
                f"calibration age {age:.0f}s exceeds window "
                f"{schema.calibration_window:.0f}s",
                predicate="calibration_lapsed",
            )
        for pred in schema.safety.conditions:
            observed = record.observed.get(pred.field)
            if observed is None:
                continue
            from eaclab.units import to_canonical

            value = to_canonical(observed).value
            threshold = to_canonical(pred.threshold).value
            ok = {
                "<=": value <= threshold,
                ">=": value >= threshold,
                "<": value < threshold,
                ">": value > threshold,
                "==": value == threshold,
            }.get(pred.comparator, True)
            if not ok:
                return FaultEvent(
                    "implicit_violation", device_id, node.node_id,
                    f"observed {pred.field}={value:g} violates "
                    f"{pred.comparator} {threshold:g}",
                    predicate=f"safety:{pred.field}",
                )
    return None


def handle_fault(fault: FaultEvent, node, plan: ExecutionPlan, state: LabState) -> str:
    """Deterministic fault -> disposition mapping."""
    if fault.kind == "comm_timeout":
        # A timed-out non-idempotent command may have partially executed;
        # only idempotent operations are safe to retry.
        return "recover" if node.idempotent else "pause"
    if fault.kind in ("device_error", "no_liquid_detected"):
        return "pause"
    return "abort"  # implicit_violation


def stabilize_wait(node, start: float, device, setpoint: float | None = None) -> float:
    """Elapsed seconds for a stabilize node.

    fixed_delay waits exactly the declared duration. setpoint_then_hold
    samples the simulated signal at 1 s resolution, completes once the
    signal has stayed within the relative band for the hold duration, and
    raises StabilizationTimeoutError at the cap.
    """
    stab = node.stab or {"mode": "fixed_delay", "duration_s": node.est_duration}
    if stab["mode"] == "fixed_delay":
        return float(stab["duration_s"])
    hold = float(stab["duration_s"])
    target = setpoint if setpoint is not None else device.config.temperature_setpoint
    band = abs(target) * STABILIZE_REL_TOL
    in_band_since: float | None = None
    t = 0.0
    while t <= STABILIZE_CAP_S:
        value = device.temperature_at(start + t)
        if abs(value - target) <= band:
            if in_band_since is None:
                in_band_since = t
            if t - in_band_since >= hold:
                return t
        else:
            in_band_since = None
        t += 1.0
    raise StabilizationTimeoutError(
        f"{node.node_id}: signal never held its band within {STABILIZE_CAP_S:.0f}s"
    )


@dataclass
class _RunContext:
    run_id: str
    plan: ExecutionPlan
    dag: WorkflowDAG
    state: LabState
    registry: CapabilityRegistry
    fleet: SimFleet
    spec_hash: str
    plan_hash: str
    fault_schedule: dict[int, str]
    store: TelemetryStore
    log: list[StateEvent] = field(default_factory=list)
    wire: list[dict] = field(default_factory=list)
    dispatch_count: int = 0
    connected: list[str] = field(default_factory=list)  # device ids, open order
    last_committed: str | None = None
    telemetry: list[TelemetryRecord] = field(default_factory=list)

    def emit(self, kind: str, device_id: str, time: float, payload: dict) -> None:
        event = StateEvent(
            seq=self.state.next_seq,
            time=time,
            device_id=device_id,
            kind=kind,
            payload=payload,
        )
        self.state = apply_event(self.state, event)
        self.log.append(event)

    def dump_frame(self, frame: WireFrame, time: float) -> None:
        self.wire.append(
            {
                "device_id": frame.device_id,
                "direction": frame.direction,
                "hex": frame.hex(),
                "time": time,
            }
        )


def _dispatch_order(plan: ExecutionPlan, dag: WorkflowDAG) -> list:
    """Plan order by start time, dependency-consistent on ties."""
    from eaclab.compiler import topo_order

    index = {nid: i for i, nid in enumerate(topo_order(dag))}
    return sorted(plan.assignments, key=lambda a: (a.start, index[a.node_id]))


def _node_capability(dag: WorkflowDAG, node) -> str:
    return dag.bindings.get(node.binding, {}).get("capability", node.binding)


def _quantify(values: dict[str, float]) -> dict[str, Quantity]:
    return {
        name: Quantity(float(value), _TELEMETRY_UNITS.get(name, ""))
        for name, value in values.items()
    }


def execute(
    plan: ExecutionPlan,
    dag: WorkflowDAG,
    state: LabState,
    registry: CapabilityRegistry,
    fleet: SimFleet,
    run_id: str,
    spec_hash: str,
    fault_schedule: dict[int, str] | None = None,
    store: TelemetryStore | None = None,
) -> RunResult:
    """Execute a plan from the start. See ``resume`` for continuation."""
    ctx = _RunContext(
        run_id=run_id,
        plan=plan,
        dag=dag,
        state=state,
        registry=registry,
        fleet=fleet,
        spec_hash=spec_hash,
        plan_hash=compute_plan_hash(plan),
        fault_schedule=dict(fault_schedule or {}),
        store=store if store is not None else TelemetryStore(),
    )
    return _run(ctx, skip_through=None)


def resume(
    checkpoint: Checkpoint,
    plan: ExecutionPlan,
    dag: WorkflowDAG,
    state: LabState,
    registry: CapabilityRegistry,
    fleet: SimFleet,
    spec_hash: str,
    store: TelemetryStore | None = None,
) -> RunResult:
    """Continue a paused run from the node after its checkpoint.

    Committed nodes are replayed silently through the simulator (same
    frames, same seeds) to rebuild device state without re-logging, then
    execution proceeds normally. Raises CheckpointMismatchError if the
    plan hash differs and StillBlockedError if the blocking condition is
    still present.
    """
    if compute_plan_hash(plan) != checkpoint.plan_hash:
        raise CheckpointMismatchError(
            "plan does not match the checkpointed plan hash"
        )
    order = _dispatch_order(plan, dag)
    committed: list[str] = []
    if checkpoint.last_committed_node is not None:
        for a in order:
            committed.append(a.node_id)
            if a.node_id == checkpoint.last_committed_node:
                break
        else:
            raise CheckpointMismatchError(
                f"checkpoint node {checkpoint.last_committed_node!r} not in plan"
            )
    next_nodes = [
        a for a in order
        if a.node_id not in committed and dag.nodes[a.node_id].kind != "precheck"
    ]
    if next_nodes:
        a = next_nodes[0]
        node = dag.nodes[a.node_id]
        blocked = runtime_precheck(
            node, a.device_id, state, registry, checkpoint.run_id,
            _node_capability(dag, node),
        )
        if blocked is not None:
            raise StillBlockedError(f"{blocked.kind}: {blocked.detail}")
    ctx = _RunContext(
        run_id=checkpoint.run_id,
        plan=plan,
        dag=dag,
        state=state,
        registry=registry,
        fleet=fleet,
        spec_hash=spec_hash,
        plan_hash=checkpoint.plan_hash,
        fault_schedule={},
        store=store if store is not None else TelemetryStore(),
        last_committed=checkpoint.last_committed_node,
    )
    return _run(ctx, skip_through=checkpoint.last_committed_node)


def _run(ctx: _RunContext, skip_through: str | None) -> RunResult:
    order = _dispatch_order(ctx.plan, ctx.dag)
    done_at: dict[str, float] = {}
    device_free: dict[str, float] = {}
    silent = skip_through is not None

    for assignment in order:
        node = ctx.dag.nodes[assignment.node_id]
        device_id = assignment.device_id
        capability = _node_capability(ctx.dag, node)
        preds = [p for p in ctx.dag.predecessors(node.node_id) if p in done_at]
        earliest = max([done_at[p] for p in preds] or [0.0])
        start = max(earliest, device_free.get(device_id, 0.0)) + assignment.transition

        if silent:
            # Committed prefix: rebuild simulator state without logging.
            end = _silent_replay(ctx, node, device_id, capability, start)
            done_at[node.node_id] = end
            device_free[device_id] = end
            if node.node_id == skip_through:
                silent = False
            continue

        outcome = _execute_node(ctx, node, assignment, device_id, capability, start)
        if isinstance(outcome, RunResult):
            return outcome
        done_at[node.node_id] = outcome
        device_free[device_id] = outcome
        if node.kind != "precheck":
            ctx.last_committed = node.node_id

    return RunResult(
        run_id=ctx.run_id,
        status="completed",
        telemetry=ctx.telemetry,
        log=ctx.log,
        wire=ctx.wire,
        state=ctx.state,
    )


def _silent_replay(ctx, node, device_id, capability, start: float) -> float:
    if node.kind == "precheck":
        return start
    if node.kind == "stabilize":
        elapsed = stabilize_wait(node, start, ctx.fleet.devices[device_id])
        return start + elapsed
    frame = encode_operation(capability, node.operation, node.params, device_id)
    result = ctx.fleet.step(device_id, frame, start)
    if node.kind == "connect" and device_id not in ctx.connected:
        ctx.connected.append(device_id)
    if node.kind == "teardown" and device_id in ctx.connected:
        ctx.connected.remove(device_id)
    return max(result.completion_time, start + node.est_duration)


def _precheck_and_log(ctx, node, device_id, capability, time: float) -> FaultEvent | None:
    fault = runtime_precheck(
        node, device_id, ctx.state, ctx.registry, ctx.run_id, capability
    )
    ctx.emit(
        "precheck",
        device_id,
        time,
        {
            "node_id": node.node_id,
            "result": "pass" if fault is None else "fail",
            "detail": fault.detail if fault else "",
        },
    )
    return fault


def _execute_node(ctx, node, assignment, device_id, capability, start: float):
    """Run one node; returns its end time, or a RunResult on pause/abort."""
    fault = _precheck_and_log(ctx, node, device_id, capability, start)
    if fault is not None:
        return _dispose(ctx, fault, node, start)

    if node.kind == "precheck":
        return start

    if node.kind == "stabilize":
        try:
            elapsed = stabilize_wait(node, start, ctx.fleet.devices[device_id])
        except StabilizationTimeoutError as exc:
            fault = FaultEvent(
                "device_error", device_id, node.node_id, str(exc)
            )
            ctx.emit("fault", device_id, start, _fault_payload(fault, "pause"))
            return _paused(ctx, fault, start)
        ctx.emit(
            "dispatch",
            device_id,
            start,
            {"node_id": node.node_id, "op": "stabilize", "index": ctx.dispatch_count},
        )
        ctx.dispatch_count += 1
        end = start + elapsed
        ctx.emit(
            "telemetry", device_id, end, {"stabilize_elapsed": elapsed}
        )
        return end

    frame = encode_operation(capability, node.operation, node.params, device_id)
    attempts = 0
    while True:
        ctx.dispatch_count += 1
        index = ctx.dispatch_count
        ctx.emit(
            "dispatch",
            device_id,
            start,
            {
                "node_id": node.node_id,
                "op": node.operation,
                "frame": frame.hex(),
                "index": index,
            },
        )
        ctx.dump_frame(frame, start)

        injected = ctx.fault_schedule.get(index)
        try:
            if injected is not None:
                raise SimFault(injected, f"injected at dispatch {index}")
            result = ctx.fleet.step(device_id, frame, start)
        except SimFault as exc:
            fault = FaultEvent(
                exc.kind if exc.kind in FAULT_KINDS else "device_error",
                device_id,
                node.node_id,
                exc.detail or str(exc),
                predicate="calibration_lapsed"
                if exc.kind == "implicit_violation"
                else None,
            )
            disposition = handle_fault(fault, node, ctx.plan, ctx.state)
            if disposition == "recover" and attempts < _RETRY_BUDGET:
                attempts += 1
                ctx.emit("fault", device_id, start, _fault_payload(fault, "recover"))
                continue
            if disposition == "recover":
                disposition = "pause"  # retry budget exhausted
            ctx.emit("fault", device_id, start, _fault_payload(fault, disposition))
            return _dispose_known(ctx, fault, disposition, start)
        break

    for reply in result.replies:
        ctx.dump_frame(reply, start)

    end = max(result.completion_time, start + node.est_duration)

    if node.kind == "connect":
        if device_id not in ctx.connected:
            ctx.connected.append(device_id)
        ctx.emit(
            "transition", device_id, end, {"to": "busy", "holder": ctx.run_id}
        )
    elif node.kind == "teardown":
        if device_id in ctx.connected:
            ctx.connected.remove(device_id)
        ctx.emit("transition", device_id, end, {"to": "idle"})

    if result.telemetry:
        fields = _quantify(result.telemetry)
        ctx.emit(
            "telemetry",
            device_id,
            end,
            {name: q.to_dict() for name, q in sorted(fields.items())},
        )
        if node.kind == "measure":
            # Step-level annotation params ride along with the measurement.
            merged = dict(fields)
            for name, q in node.params.items():
                merged.setdefault(name, q)
            record = TelemetryRecord(
                run_id=ctx.run_id,
                node_id=node.node_id,
                device_id=device_id,
                time=end,
                fields=merged,
                spec_hash=ctx.spec_hash,
                plan_hash=ctx.plan_hash,
            )
            ctx.store.record(record)
            ctx.telemetry.append(record)

    return end


def _fault_payload(fault: FaultEvent, disposition: str) -> dict:
    return {
        "kind": fault.kind,
        "node_id": fault.node_id,
        "detail": fault.detail,
        "predicate": fault.predicate,
        "disposition": disposition,
    }


def _dispose(ctx, fault: FaultEvent, node, time: float):
    disposition = handle_fault(fault, node, ctx.plan, ctx.state)
    if disposition == "recover":
        disposition = "pause"  # precheck failures are not retried in place
    ctx.emit("fault", fault.device_id, time, _fault_payload(fault, disposition))
    return _dispose_known(ctx, fault, disposition, time)


def _dispose_known(ctx, fault: FaultEvent, disposition: str, time: float):
    if disposition == "abort":
        return _aborted(ctx, fault, time)
    return _paused(ctx, fault, time)


def _paused(ctx, fault: FaultEvent, time: float) -> RunResult:
    checkpoint = Checkpoint(
        run_id=ctx.run_id,
        last_committed_node=ctx.last_committed,
        state_epoch=ctx.state.epoch,
        plan_hash=ctx.plan_hash,
    )
    return RunResult(
        run_id=ctx.run_id,
        status="paused",
        telemetry=ctx.telemetry,
        log=ctx.log,
        wire=ctx.wire,
        state=ctx.state,
        checkpoint=checkpoint,
        fault=fault,
    )


def _aborted(ctx, fault: FaultEvent, time: float) -> RunResult:
    # Teardown guarantee: every opened connection is closed, newest first.
    for device_id in sorted(ctx.connected, reverse=True):
        node = _teardown_stub(ctx.dag, device_id)
        _precheck_and_log(ctx, node, device_id, "", time)
        frame = encode_operation("", "disconnect", {}, device_id)
        ctx.dispatch_count += 1
        ctx.emit(
            "dispatch",
            device_id,
            time,
            {
                "node_id": node.node_id,
                "op": "disconnect",
                "frame": frame.hex(),
                "index": ctx.dispatch_count,
            },
        )
        ctx.dump_frame(frame, time)
        ctx.emit("transition", device_id, time, {"to": "idle"})
    ctx.connected.clear()
    return RunResult(
        run_id=ctx.run_id,
        status="aborted",
        telemetry=ctx.telemetry,
        log=ctx.log,
        wire=ctx.wire,
        state=ctx.state,
        fault=fault,
    )


def _teardown_stub(dag: WorkflowDAG, device_id: str):
    from eaclab.compiler import OpNode

    return OpNode(
        node_id=f"abort-teardown:{device_id}",
        binding="",
        operation="disconnect",
        kind="teardown",
        idempotent=True,
        est_duration=0.0,
    )


def _isclose(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)
