"""Centralized lab state: desired/observed device records and event sourcing.

All mutation flows through ``apply_event``; the state itself is immutable,
so replaying a run log over the genesis state always reproduces the final
snapshot byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from eaclab.canon import canonical_bytes
from eaclab.capabilities import CapabilityRegistry
from eaclab.errors import IllegalTransitionError, SequenceGapError, SpecSchemaError
from eaclab.units import Quantity, to_canonical

DEVICE_STATUSES = frozenset({"offline", "idle", "busy", "fault", "cooling", "warming"})

# Closed status-transition graph. Self-loops are always legal no-ops, and
# any status may transition to fault.
_TRANSITIONS = frozenset(
    {
        ("offline", "idle"),
        ("idle", "offline"),
        ("idle", "busy"),
        ("busy", "idle"),
        ("fault", "idle"),
        ("idle", "warming"),
        ("warming", "idle"),
        ("idle", "cooling"),
        ("cooling", "idle"),
    }
)

EVENT_KINDS = frozenset(
    {"dispatch", "telemetry", "fault", "transition", "reconcile", "precheck"}
)

# Relative tolerance below which a continuous observed field counts as
# matching its desired value during reconciliation.
RECONCILE_REL_TOL = 1e-3


def transition_allowed(old: str, new: str) -> bool:
    return old == new or new == "fault" or (old, new) in _TRANSITIONS


@dataclass(frozen=True)
class DeviceRecord:
    device_id: str
    capability: str
    status: str = "idle"
    desired: dict[str, Quantity] = field(default_factory=dict)
    observed: dict[str, Quantity] = field(default_factory=dict)
    holder: str | None = None
    last_calibrated: float = 0.0
    mode: str | None = None
    # Static attributes from the lab config (e.g. ports: 6) used by
    # binding constraints.
    attrs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.status not in DEVICE_STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.holder is not None) != (self.status == "busy"):
            raise ValueError("holder must be set iff status is busy")

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "capability": self.capability,
            "status": self.status,
            "desired": {k: q.to_dict() for k, q in sorted(self.desired.items())},
            "observed": {k: q.to_dict() for k, q in sorted(self.observed.items())},
            "holder": self.holder,
            "last_calibrated": self.last_calibrated,
            "mode": self.mode,
            "attrs": dict(sorted(self.attrs.items())),
        }


@dataclass(frozen=True)
class StateEvent:
    seq: int
    time: float
    device_id: str
    kind: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "time": self.time,
            "device_id": self.device_id,
            "kind": self.kind,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StateEvent":
        return cls(
            seq=obj["seq"],
            time=obj["time"],
            device_id=obj["device_id"],
            kind=obj["kind"],
            payload=obj.get("payload", {}),
        )


@dataclass(frozen=True)
class LabState:
    devices: dict[str, DeviceRecord] = field(default_factory=dict)
    clock: float = 0.0
    epoch: int = 0
    next_seq: int = 0

    def device(self, device_id: str) -> DeviceRecord:
        return self.devices[device_id]

    def with_device(self, record: DeviceRecord) -> "LabState":
        devices = dict(self.devices)
        devices[record.device_id] = record
        return replace(self, devices=devices)


def genesis_from_lab_config(config: dict) -> LabState:
    """Build the genesis state from a lab-config document."""
    devices: dict[str, DeviceRecord] = {}
    for entry in config.get("devices", []):
        device_id = entry["device_id"]
        if device_id in devices:
            raise SpecSchemaError("duplicate_id", device_id, "duplicate device_id")
        devices[device_id] = DeviceRecord(
            device_id=device_id,
            capability=entry["capability"],
            status=entry.get("status", "idle"),
            last_calibrated=float(entry.get("last_calibrated", 0.0)),
            mode=entry.get("mode"),
            observed={
                k: Quantity.from_dict(v)
                for k, v in entry.get("observed", {}).items()
            },
            attrs={k: float(v) for k, v in entry.get("attrs", {}).items()},
        )
    return LabState(devices=devices)


def apply_event(state: LabState, event: StateEvent) -> LabState:
    """Fold one event into the state; epoch and clock always advance."""
    if event.seq != state.next_seq:
        raise SequenceGapError(
            f"expected seq {state.next_seq}, got {event.seq}"
        )
    record = state.devices.get(event.device_id)
    if record is None and event.device_id:
        raise SpecSchemaError("bad_value", event.device_id, "unknown device")

    if record is not None:
        if event.kind == "telemetry":
            observed = dict(record.observed)
            for name, value in event.payload.items():
                if isinstance(value, dict) and "value" in value:
                    observed[name] = Quantity.from_dict(value)
                elif isinstance(value, (int, float)) and not isinstance(value, bool):
                    observed[name] = Quantity(float(value))
            record = replace(record, observed=observed)
        elif event.kind == "transition":
            new_status = event.payload["to"]
            if new_status not in DEVICE_STATUSES:
                raise IllegalTransitionError(f"unknown status {new_status!r}")
            if not transition_allowed(record.status, new_status):
                raise IllegalTransitionError(
                    f"{record.device_id}: {record.status} -> {new_status}"
                )
            holder = event.payload.get("holder") if new_status == "busy" else None
            mode = event.payload.get("mode", record.mode)
            record = replace(record, status=new_status, holder=holder, mode=mode)
        elif event.kind == "fault":
            # A fault being retried in place leaves the device operational.
            if event.payload.get("disposition") != "recover":
                record = replace(record, status="fault", holder=None)
        elif event.kind == "reconcile":
            desired = dict(record.desired)
            for name, value in event.payload.get("desired", {}).items():
                desired[name] = Quantity.from_dict(value)
            record = replace(record, desired=desired)
        # dispatch and precheck events carry provenance only; no record change.

    new_state = replace(
        state,
        clock=max(state.clock, event.time),
        epoch=state.epoch + 1,
        next_seq=state.next_seq + 1,
    )
    if record is not None:
        new_state = new_state.with_device(record)
    return new_state


def replay(genesis: LabState, events) -> LabState:
    state = genesis
    for event in events:
        state = apply_event(state, event)
    return state


def _field_matches(desired: Quantity, observed: Quantity | None, discrete: bool) -> bool:
    if observed is None:
        return False
    try:
        obs = to_canonical(observed)
        want = to_canonical(desired)
    except Exception:
        return False
    if obs.unit != want.unit:
        return False
    if discrete:
        return obs.value == want.value
    return math.isclose(obs.value, want.value, rel_tol=RECONCILE_REL_TOL)


def _is_discrete(value: Quantity) -> bool:
    return value.unit == "" and float(value.value).is_integer()


def reconcile(
    record: DeviceRecord, registry: CapabilityRegistry
) -> tuple[list[dict], bool]:
    """Corrective operations driving observed toward desired.

    Returns (operations, needs_recovery). A faulted device yields no
    operations and the recovery flag; otherwise the list is empty exactly
    when every desired field is observed within tolerance. Operations are
    ordered by field name for determinism.
    """
    if record.status == "fault":
        return [], True
    schema = registry.get(record.capability)
    operations: list[dict] = []
    for name in sorted(record.desired):
        want = record.desired[name]
        if _field_matches(want, record.observed.get(name), _is_discrete(want)):
            continue
        op_name = schema.reconcile_ops.get(name)
        if op_name is None:
            continue
        gated = any(p.field == name for p in schema.safety.conditions)
        operations.append(
            {
                "device_id": record.device_id,
                "op": op_name,
                "params": {name: want.to_dict()},
                "safety_gated": gated,
            }
        )
    return operations, False


def query_eligible(
    state: LabState,
    capability: str,
    constraints: dict | None = None,
    registry: CapabilityRegistry | None = None,
) -> list[str]:
    """Idle devices of a capability, in calibration, satisfying constraints.

    Constraint keys of the form ``min_<attr>`` require attrs[attr] >= value;
    any other key requires exact attribute equality. Result is sorted by
    device_id.
    """
    window = None
    if registry is not None and capability in registry:
        window = registry.get(capability).calibration_window
    eligible = []
    for device_id in sorted(state.devices):
        record = state.devices[device_id]
        if record.capability != capability or record.status != "idle":
            continue
        if window is not None and state.clock - record.last_calibrated > window:
            continue
        if constraints and not _constraints_ok(record, constraints):
            continue
        eligible.append(device_id)
    return eligible


def _constraints_ok(record: DeviceRecord, constraints: dict) -> bool:
    for key, value in constraints.items():
        if key.startswith("min_"):
            attr = record.attrs.get(key[4:])
            if attr is None or attr < value:
                return False
        else:
            if record.attrs.get(key) != value:
                return False
    return True


def snapshot(state: LabState) -> bytes:
    """Canonical byte serialization; equal states produce identical bytes."""
    return canonical_bytes(
        {
            "clock": state.clock,
            "epoch": state.epoch,
            "next_seq": state.next_seq,
            "devices": {
                device_id: record.to_dict()
                for device_id, record in sorted(state.devices.items())
            },
        }
    )
