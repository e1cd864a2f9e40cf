"""Declarative experiment specifications: parsing, validation, sweep expansion.

The external format is a single UTF-8 JSON document (see
``schema/experiment_spec.schema.json``). Parsing is total: a document either
yields a fully validated ``ExperimentSpec`` or raises ``SpecSyntaxError`` /
``SpecSchemaError`` with a diagnostic code from the closed set.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field, replace

from eaclab.canon import canonical_json, sha256_hex
from eaclab.errors import (
    ExpansionError,
    SpecSchemaError,
    SpecSyntaxError,
    UnitError,
)
from eaclab.units import Quantity, to_canonical

_VERSION_RE = re.compile(r"^\d+\.\d+\.\d+$")

STABILIZATION_MODES = frozenset({"fixed_delay", "setpoint_then_hold"})


@dataclass(frozen=True)
class ResourceBinding:
    binding_name: str
    capability: str
    selector: str | None = None
    constraints: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class StabilizationConstraint:
    mode: str
    duration: Quantity
    signal: str | None = None


@dataclass(frozen=True)
class StepSpec:
    step_id: str
    binding: str
    operation: str
    params: dict[str, Quantity] = field(default_factory=dict)
    depends_on: tuple[str, ...] = ()
    stabilization: StabilizationConstraint | None = None
    repeat: dict[str, tuple] | None = None


@dataclass(frozen=True)
class ExperimentSpec:
    spec_id: str
    version: str
    resources: tuple[ResourceBinding, ...]
    steps: tuple[StepSpec, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def binding(self, name: str) -> ResourceBinding:
        for r in self.resources:
            if r.binding_name == name:
                return r
        raise KeyError(name)

    def step(self, step_id: str) -> StepSpec:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(step_id)


def _reject_duplicate_keys(pairs):
    seen = set()
    out = {}
    for key, value in pairs:
        if key in seen:
            raise SpecSchemaError("duplicate_key", key, f"duplicate key {key!r}")
        seen.add(key)
        out[key] = value
    return out


def _require(obj: dict, key: str, locus: str):
    if key not in obj:
        raise SpecSchemaError("missing_field", locus, f"missing required field {key!r}")
    return obj[key]


def _check_no_unknown(obj: dict, allowed: frozenset[str], locus: str) -> None:
    for key in obj:
        if key not in allowed:
            raise SpecSchemaError("unknown_field", locus, f"unknown field {key!r}")


def _expect(value, types, locus: str, what: str):
    if not isinstance(value, types):
        raise SpecSchemaError("bad_type", locus, f"{what} has wrong type")
    return value


def _parse_quantity(obj, locus: str) -> Quantity:
    _expect(obj, dict, locus, "quantity")
    _check_no_unknown(obj, frozenset({"value", "unit"}), locus)
    value = _require(obj, "value", locus)
    _expect(value, (int, float), locus, "quantity value")
    if isinstance(value, bool):
        raise SpecSchemaError("bad_type", locus, "quantity value has wrong type")
    unit = obj.get("unit", "")
    _expect(unit, str, locus, "quantity unit")
    try:
        return Quantity(value=float(value), unit=unit)
    except UnitError as exc:
        raise SpecSchemaError("bad_unit", locus, str(exc)) from exc


_TOP_FIELDS = frozenset({"spec_id", "version", "resources", "steps", "metadata"})
_RESOURCE_FIELDS = frozenset({"name", "capability", "selector", "constraints"})
_STEP_FIELDS = frozenset(
    {"id", "binding", "op", "params", "depends_on", "stabilization", "repeat"}
)
_STAB_FIELDS = frozenset({"mode", "duration", "signal"})


def _parse_resource(obj, index: int) -> ResourceBinding:
    locus = f"resources[{index}]"
    _expect(obj, dict, locus, "resource binding")
    _check_no_unknown(obj, _RESOURCE_FIELDS, locus)
    name = _expect(_require(obj, "name", locus), str, locus, "binding name")
    capability = _expect(_require(obj, "capability", locus), str, locus, "capability")
    if not name:
        raise SpecSchemaError("bad_value", locus, "binding name is empty")
    selector = obj.get("selector")
    if selector is not None:
        _expect(selector, str, locus, "selector")
    constraints = obj.get("constraints", {})
    _expect(constraints, dict, locus, "constraints")
    return ResourceBinding(
        binding_name=name,
        capability=capability,
        selector=selector,
        constraints=dict(constraints),
    )


def _parse_stabilization(obj, locus: str) -> StabilizationConstraint:
    _expect(obj, dict, locus, "stabilization")
    _check_no_unknown(obj, _STAB_FIELDS, locus)
    mode = _expect(_require(obj, "mode", locus), str, locus, "stabilization mode")
    if mode not in STABILIZATION_MODES:
        raise SpecSchemaError("bad_value", locus, f"unknown stabilization mode {mode!r}")
    duration = _parse_quantity(_require(obj, "duration", locus), locus + ".duration")
    try:
        seconds = to_canonical(duration)
    except UnitError as exc:
        raise SpecSchemaError("bad_unit", locus, str(exc)) from exc
    if seconds.unit != "s" or seconds.value < 0:
        raise SpecSchemaError("bad_value", locus, "duration must be a time >= 0")
    signal = obj.get("signal")
    if signal is not None:
        _expect(signal, str, locus, "signal")
    if mode == "setpoint_then_hold" and not signal:
        raise SpecSchemaError(
            "missing_field", locus, "setpoint_then_hold requires a signal name"
        )
    return StabilizationConstraint(mode=mode, duration=duration, signal=signal)


def _parse_step(obj, index: int) -> StepSpec:
    locus = f"steps[{index}]"
    _expect(obj, dict, locus, "step")
    _check_no_unknown(obj, _STEP_FIELDS, locus)
    step_id = _expect(_require(obj, "id", locus), str, locus, "step id")
    if not step_id:
        raise SpecSchemaError("bad_value", locus, "step id is empty")
    locus = f"steps[{step_id}]"
    binding = _expect(_require(obj, "binding", locus), str, locus, "binding")
    op = _expect(_require(obj, "op", locus), str, locus, "op")
    raw_params = obj.get("params", {})
    _expect(raw_params, dict, locus, "params")
    params: dict[str, Quantity] = {}
    for pname, pval in raw_params.items():
        if not pname:
            raise SpecSchemaError("bad_value", locus, "empty param name")
        params[pname] = _parse_quantity(pval, f"{locus}.params.{pname}")
    depends_on = obj.get("depends_on", [])
    _expect(depends_on, list, locus, "depends_on")
    for dep in depends_on:
        _expect(dep, str, locus, "dependency id")
    stabilization = None
    if obj.get("stabilization") is not None:
        stabilization = _parse_stabilization(obj["stabilization"], locus + ".stabilization")
    repeat = None
    if obj.get("repeat") is not None:
        raw_repeat = _expect(obj["repeat"], dict, locus, "repeat")
        repeat = {}
        for pname, values in raw_repeat.items():
            _expect(values, list, locus, "sweep values")
            if not values:
                raise SpecSchemaError("empty_sweep", locus, f"sweep {pname!r} has no values")
            repeat[pname] = tuple(values)
    return StepSpec(
        step_id=step_id,
        binding=binding,
        operation=op,
        params=params,
        depends_on=tuple(depends_on),
        stabilization=stabilization,
        repeat=repeat,
    )


def _dependency_cycle(steps: tuple[StepSpec, ...]) -> list[str] | None:
    """Return one cycle (as a list of step ids) if the dependency relation has one."""
    adjacency = {s.step_id: s.depends_on for s in steps}
    WHITE, GREY, BLACK = 0, 1, 2
    color = {sid: WHITE for sid in adjacency}
    stack: list[str] = []

    def visit(sid: str) -> list[str] | None:
        color[sid] = GREY
        stack.append(sid)
        for dep in adjacency[sid]:
            if color[dep] == GREY:
                return stack[stack.index(dep):] + [dep]
            if color[dep] == WHITE:
                found = visit(dep)
                if found:
                    return found
        stack.pop()
        color[sid] = BLACK
        return None

    for sid in sorted(adjacency):
        if color[sid] == WHITE:
            found = visit(sid)
            if found:
                return found
    return None


def validate_spec(spec: ExperimentSpec) -> None:
    """Enforce spec-level invariants; raises SpecSchemaError on violation."""
    binding_names = set()
    for r in spec.resources:
        if r.binding_name in binding_names:
            raise SpecSchemaError(
                "duplicate_id", r.binding_name, "duplicate binding name"
            )
        binding_names.add(r.binding_name)
    step_ids = set()
    for s in spec.steps:
        if s.step_id in step_ids:
            raise SpecSchemaError("duplicate_id", s.step_id, "duplicate step id")
        step_ids.add(s.step_id)
    for s in spec.steps:
        if s.binding not in binding_names:
            raise SpecSchemaError(
                "dangling_binding", s.step_id, f"undeclared binding {s.binding!r}"
            )
        for dep in s.depends_on:
            if dep not in step_ids:
                raise SpecSchemaError(
                    "dangling_dependency", s.step_id, f"unknown dependency {dep!r}"
                )
    cycle = _dependency_cycle(spec.steps)
    if cycle:
        raise SpecSchemaError(
            "dependency_cycle", cycle[0], "dependency cycle: " + " -> ".join(cycle)
        )


def parse_spec(text: str) -> ExperimentSpec:
    """Parse and fully validate a spec document."""
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise SpecSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    _expect(doc, dict, "$", "document")
    _check_no_unknown(doc, _TOP_FIELDS, "$")
    spec_id = _expect(_require(doc, "spec_id", "$"), str, "$", "spec_id")
    if not spec_id:
        raise SpecSchemaError("bad_value", "$", "spec_id is empty")
    version = _expect(_require(doc, "version", "$"), str, "$", "version")
    if not _VERSION_RE.match(version):
        raise SpecSchemaError("bad_value", "$", f"not a semantic version: {version!r}")
    raw_resources = _expect(_require(doc, "resources", "$"), list, "$", "resources")
    raw_steps = _expect(_require(doc, "steps", "$"), list, "$", "steps")
    metadata = doc.get("metadata", {})
    _expect(metadata, dict, "$", "metadata")
    for key, value in metadata.items():
        _expect(value, str, "metadata", "metadata value")
    spec = ExperimentSpec(
        spec_id=spec_id,
        version=version,
        resources=tuple(_parse_resource(r, i) for i, r in enumerate(raw_resources)),
        steps=tuple(_parse_step(s, i) for i, s in enumerate(raw_steps)),
        metadata=dict(metadata),
    )
    validate_spec(spec)
    return spec


def spec_to_dict(spec: ExperimentSpec) -> dict:
    """Canonical dict form; parse(serialize(spec)) == spec."""
    steps = []
    for s in spec.steps:
        obj: dict = {
            "id": s.step_id,
            "binding": s.binding,
            "op": s.operation,
            "params": {n: q.to_dict() for n, q in s.params.items()},
            "depends_on": list(s.depends_on),
        }
        if s.stabilization is not None:
            stab: dict = {
                "mode": s.stabilization.mode,
                "duration": s.stabilization.duration.to_dict(),
            }
            if s.stabilization.signal is not None:
                stab["signal"] = s.stabilization.signal
            obj["stabilization"] = stab
        if s.repeat is not None:
            obj["repeat"] = {n: list(v) for n, v in s.repeat.items()}
        steps.append(obj)
    resources = []
    for r in spec.resources:
        obj = {"name": r.binding_name, "capability": r.capability}
        if r.selector is not None:
            obj["selector"] = r.selector
        if r.constraints:
            obj["constraints"] = dict(r.constraints)
        resources.append(obj)
    return {
        "spec_id": spec.spec_id,
        "version": spec.version,
        "resources": resources,
        "steps": steps,
        "metadata": dict(spec.metadata),
    }


def serialize_spec(spec: ExperimentSpec) -> str:
    return canonical_json(spec_to_dict(spec))


def spec_hash(spec: ExperimentSpec) -> str:
    return sha256_hex(spec_to_dict(spec))


def _sweep_shape(repeat: dict[str, tuple]) -> tuple[int, ...]:
    return tuple(len(v) for v in repeat.values())


def _instantiate(step: StepSpec, combo: tuple, index: int) -> StepSpec:
    params = dict(step.params)
    for pname, value in zip(step.repeat, combo):  # type: ignore[union-attr]
        if isinstance(value, dict):
            params[pname] = Quantity.from_dict(value)
        elif pname in params:
            params[pname] = replace(params[pname], value=float(value))
        else:
            raise ExpansionError(
                f"sweep over unknown parameter {pname!r} in step {step.step_id!r}"
            )
    return replace(
        step,
        step_id=f"{step.step_id}#{index}",
        params=params,
        repeat=None,
    )


def expand_sweeps(spec: ExperimentSpec) -> ExperimentSpec:
    """Replace every repeat clause with concrete per-value steps.

    Instance ids are ``<step_id>#<k>`` with k enumerating the cartesian
    product of the sweep lists in row-major order (first listed parameter
    outermost). Dependencies between two steps swept with identical shapes
    pair up index-wise; otherwise every instance of the dependency is kept
    as a predecessor. Idempotent: a spec without repeat clauses is returned
    unchanged.
    """
    if all(s.repeat is None for s in spec.steps):
        return spec

    instances: dict[str, list[str]] = {}
    shapes: dict[str, tuple[int, ...] | None] = {}
    new_steps: list[StepSpec] = []
    for step in spec.steps:
        if step.repeat is None:
            shapes[step.step_id] = None
            instances[step.step_id] = [step.step_id]
            new_steps.append(step)
            continue
        for pname in step.repeat:
            if pname not in step.params and not all(
                isinstance(v, dict) for v in step.repeat[pname]
            ):
                raise ExpansionError(
                    f"sweep over unknown parameter {pname!r} in step {step.step_id!r}"
                )
        shapes[step.step_id] = _sweep_shape(step.repeat)
        ids: list[str] = []
        for index, combo in enumerate(itertools.product(*step.repeat.values())):
            inst = _instantiate(step, combo, index)
            ids.append(inst.step_id)
            new_steps.append(inst)
        instances[step.step_id] = ids

    rewritten: list[StepSpec] = []
    for step in new_steps:
        base_id, _, suffix = step.step_id.partition("#")
        deps: list[str] = []
        for dep in step.depends_on:
            dep_shape = shapes.get(dep)
            if dep_shape is None:
                deps.append(dep)
            elif suffix and shapes.get(base_id) == dep_shape:
                deps.append(f"{dep}#{suffix}")
            else:
                deps.extend(instances[dep])
        rewritten.append(replace(step, depends_on=tuple(deps)))

    expanded = replace(spec, steps=tuple(rewritten))
    validate_spec(expanded)
    return expanded
