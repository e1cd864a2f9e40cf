"""Static checking and lowering of expanded specs into workflow DAGs.

Lowering rules: each used binding gets one connect node before its first
operation and one teardown node after its last; every action step gets a
preceding precheck node; operations that declare a companion configure op
are split into configure + measure nodes; stabilization constraints lower
to stabilize nodes. Original step dependencies become edges between the
lowered node groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from eaclab.canon import canonical_json, sha256_hex
from eaclab.capabilities import CapabilityRegistry, OperationSchema
from eaclab.errors import CompileError, CycleError
from eaclab.labstate import LabState
from eaclab.specmodel import ExperimentSpec, StepSpec, _dependency_cycle
from eaclab.units import Quantity, canonicalize_units, to_canonical

NODE_KINDS = frozenset(
    {"connect", "precheck", "action", "measure", "stabilize", "teardown"}
)

# est_duration defaults (seconds) for operations the spec gives no clock for.
_DEFAULT_DURATION = 1.0
_VALVE_SET_DURATION = 2.0


@dataclass(frozen=True)
class Diagnostic:
    code: str
    severity: str  # error | warning
    locus: str
    message: str

    def render(self) -> str:
        return f"{self.code} {self.severity} {self.locus}: {self.message}"


@dataclass(frozen=True)
class OpNode:
    node_id: str
    binding: str
    operation: str
    kind: str
    params: dict[str, Quantity] = field(default_factory=dict)
    resolved_device: str | None = None
    idempotent: bool = False
    est_duration: float = _DEFAULT_DURATION
    mode: str | None = None
    # Stabilization detail for stabilize nodes: mode/duration_s/signal.
    stab: dict | None = None

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "binding": self.binding,
            "operation": self.operation,
            "kind": self.kind,
            "params": {k: q.to_dict() for k, q in sorted(self.params.items())},
            "resolved_device": self.resolved_device,
            "idempotent": self.idempotent,
            "est_duration": self.est_duration,
            "mode": self.mode,
            "stab": self.stab,
        }


@dataclass(frozen=True)
class WorkflowDAG:
    nodes: dict[str, OpNode]
    edges: tuple[tuple[str, str, str], ...]
    roots: tuple[str, ...]
    # binding name -> {capability, selector, constraints}
    bindings: dict[str, dict] = field(default_factory=dict)

    def successors(self, node_id: str) -> list[str]:
        return sorted(dst for src, dst, _ in self.edges if src == node_id)

    def predecessors(self, node_id: str) -> list[str]:
        return sorted(src for src, dst, _ in self.edges if dst == node_id)

    def to_dict(self) -> dict:
        return {
            "nodes": {nid: node.to_dict() for nid, node in sorted(self.nodes.items())},
            "edges": sorted([list(e) for e in self.edges]),
            "roots": sorted(self.roots),
            "bindings": {name: obj for name, obj in sorted(self.bindings.items())},
        }

    def serialize(self) -> str:
        return canonical_json(self.to_dict())


def dag_hash(dag: WorkflowDAG) -> str:
    return sha256_hex(dag.to_dict())


def validate_dag(dag: WorkflowDAG) -> None:
    """Check the structural DAG invariants; raises CycleError/CompileError."""
    for src, dst, _ in dag.edges:
        if src not in dag.nodes or dst not in dag.nodes:
            raise CompileError(f"edge endpoint missing: {src} -> {dst}")
    topo_order(dag)  # raises CycleError on a cycle
    reachable = set(dag.roots)
    frontier = list(dag.roots)
    while frontier:
        node = frontier.pop()
        for succ in dag.successors(node):
            if succ not in reachable:
                reachable.add(succ)
                frontier.append(succ)
    unreachable = set(dag.nodes) - reachable
    if unreachable:
        raise CompileError(f"unreachable nodes: {sorted(unreachable)}")


def topo_order(dag: WorkflowDAG) -> list[str]:
    """Deterministic topological order, ties broken by ascending node_id."""
    import heapq

    indegree = {nid: 0 for nid in dag.nodes}
    for _, dst, _ in dag.edges:
        indegree[dst] += 1
    ready = [nid for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for succ in dag.successors(nid):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                heapq.heappush(ready, succ)
    if len(order) != len(dag.nodes):
        raise CycleError("workflow graph contains a cycle")
    return order


def _canonical_params(params: dict[str, Quantity]) -> dict[str, Quantity]:
    return {name: to_canonical(q) for name, q in params.items()}


def _est_duration(capability: str, op: OperationSchema, params: dict[str, Quantity]) -> float:
    if capability == "pump" and op.name == "dispense":
        flow = canonicalize_units(params["flow_rate"], "m^3/s").value
        volume = canonicalize_units(params["volume"], "m^3").value
        return volume / flow
    if capability == "valve" and op.name == "set":
        return _VALVE_SET_DURATION
    return _DEFAULT_DURATION


def _step_mode(step: StepSpec, op: OperationSchema) -> str | None:
    """Device-condition compatibility class for state batching."""
    if "temperature" in step.params:
        kelvin = to_canonical(step.params["temperature"]).value
        return f"T{round(kelvin)}"
    if op.kind == "configure" or op.configure_via is not None:
        cfg = {
            name: to_canonical(q).to_dict()
            for name, q in sorted(step.params.items())
        }
        return "cfg-" + sha256_hex(cfg)[:8]
    return None


def static_check(
    spec: ExperimentSpec, registry: CapabilityRegistry, state: LabState
) -> list[Diagnostic]:
    """All statically decidable violations; empty list means compilable."""
    diagnostics: list[Diagnostic] = []
    cycle = _dependency_cycle(spec.steps)
    if cycle:
        diagnostics.append(
            Diagnostic(
                "dependency_cycle", "error", cycle[0],
                "dependency cycle: " + " -> ".join(cycle),
            )
        )

    checked_bindings: set[str] = set()
    for binding in spec.resources:
        if binding.capability not in registry:
            diagnostics.append(
                Diagnostic(
                    "unknown_capability", "error", binding.binding_name,
                    f"capability {binding.capability!r} is not registered",
                )
            )
            checked_bindings.add(binding.binding_name)
            continue
        candidates = [
            d for d in sorted(state.devices)
            if state.devices[d].capability == binding.capability
            and (binding.selector is None or d == binding.selector)
        ]
        if not candidates:
            diagnostics.append(
                Diagnostic(
                    "unsatisfiable_binding", "error", binding.binding_name,
                    f"no device provides capability {binding.capability!r}",
                )
            )

    for step in spec.steps:
        binding = spec.binding(step.binding)
        if binding.capability not in registry:
            continue  # already diagnosed at the binding
        schema = registry.get(binding.capability)
        if step.operation not in schema.operations:
            diagnostics.append(
                Diagnostic(
                    "unknown_operation", "error", step.step_id,
                    f"{binding.capability} has no operation {step.operation!r}",
                )
            )
            continue
        report = registry.check_param_ranges(
            binding.capability, step.operation, step.params
        )
        for violation in report.violations:
            diagnostics.append(
                Diagnostic(violation.code, "error", step.step_id, violation.message)
            )
        for predicate in schema.safety.conditions:
            if predicate.field not in step.params:
                continue
            commanded = to_canonical(step.params[predicate.field]).value
            threshold = to_canonical(predicate.threshold).value
            comparator = predicate.comparator
            ok = {
                "<=": commanded <= threshold,
                ">=": commanded >= threshold,
                "<": commanded < threshold,
                ">": commanded > threshold,
                "==": commanded == threshold,
            }.get(comparator, True)
            if not ok:
                diagnostics.append(
                    Diagnostic(
                        "safety_violation", "error", step.step_id,
                        f"{predicate.field} {comparator} {threshold:g} violated "
                        f"by commanded value {commanded:g}",
                    )
                )
    return diagnostics


def compile_spec(
    spec: ExperimentSpec, registry: CapabilityRegistry, state: LabState
) -> WorkflowDAG:
    """Lower a statically clean, sweep-expanded spec to a WorkflowDAG."""
    errors = [d for d in static_check(spec, registry, state) if d.severity == "error"]
    if errors:
        raise CompileError(
            "spec has static errors: " + "; ".join(d.render() for d in errors)
        )

    nodes: dict[str, OpNode] = {}
    edges: list[tuple[str, str, str]] = []
    used_bindings: list[str] = []
    last_node_of_step: dict[str, str] = {}
    first_node_of_step: dict[str, str] = {}
    last_on_binding: dict[str, list[str]] = {}

    def add_node(node: OpNode) -> None:
        nodes[node.node_id] = node

    for step in spec.steps:
        binding = spec.binding(step.binding)
        schema = registry.get(binding.capability)
        op = schema.operation(step.operation)
        if step.binding not in used_bindings:
            used_bindings.append(step.binding)
            add_node(
                OpNode(
                    node_id=f"connect:{step.binding}",
                    binding=step.binding,
                    operation="connect",
                    kind="connect",
                    idempotent=True,
                    est_duration=_DEFAULT_DURATION,
                )
            )

        mode = _step_mode(step, op)
        pre_id = f"{step.step_id}:pre"
        add_node(
            OpNode(
                node_id=pre_id,
                binding=step.binding,
                operation="precheck",
                kind="precheck",
                idempotent=True,
                est_duration=0.0,
            )
        )
        edges.append((f"connect:{step.binding}", pre_id, "setup"))
        first_node_of_step[step.step_id] = pre_id
        prev = pre_id

        params = _canonical_params(step.params)
        if op.configure_via is not None and op.configure_via in schema.operations:
            cfg_schema = schema.operation(op.configure_via)
            cfg_params = {k: v for k, v in params.items() if k in cfg_schema.params}
            params = {k: v for k, v in params.items() if k not in cfg_schema.params}
            cfg_id = f"{step.step_id}:cfg"
            add_node(
                OpNode(
                    node_id=cfg_id,
                    binding=step.binding,
                    operation=op.configure_via,
                    kind="action",
                    params=cfg_params,
                    idempotent=cfg_schema.idempotent,
                    est_duration=_DEFAULT_DURATION,
                    mode=mode,
                )
            )
            edges.append((prev, cfg_id, "flow"))
            prev = cfg_id

        if step.stabilization is not None:
            # Stabilization gates the step: the wait completes before the
            # main operation is dispatched.
            duration_s = to_canonical(step.stabilization.duration).value
            stab_id = f"{step.step_id}:stab"
            add_node(
                OpNode(
                    node_id=stab_id,
                    binding=step.binding,
                    operation="stabilize",
                    kind="stabilize",
                    idempotent=True,
                    est_duration=duration_s,
                    stab={
                        "mode": step.stabilization.mode,
                        "duration_s": duration_s,
                        "signal": step.stabilization.signal,
                    },
                )
            )
            edges.append((prev, stab_id, "flow"))
            prev = stab_id

        main_kind = "measure" if op.kind == "read" else "action"
        add_node(
            OpNode(
                node_id=step.step_id,
                binding=step.binding,
                operation=step.operation,
                kind=main_kind,
                params=params,
                idempotent=op.idempotent,
                est_duration=_est_duration(binding.capability, op, step.params),
                mode=mode,
            )
        )
        edges.append((prev, step.step_id, "flow"))
        prev = step.step_id

        last_node_of_step[step.step_id] = prev
        for dep in step.depends_on:
            edges.append((last_node_of_step[dep], first_node_of_step[step.step_id], "dep"))
        # Mutual exclusion between same-binding steps is the scheduler's
        # job (one device runs one node at a time); no ordering edge is
        # added so batching may reorder independent steps.
        last_on_binding.setdefault(step.binding, [])
        last_on_binding[step.binding].append(prev)

    for binding_name in used_bindings:
        teardown_id = f"teardown:{binding_name}"
        add_node(
            OpNode(
                node_id=teardown_id,
                binding=binding_name,
                operation="disconnect",
                kind="teardown",
                idempotent=True,
                est_duration=_DEFAULT_DURATION,
            )
        )
        for last in last_on_binding[binding_name]:
            edges.append((last, teardown_id, "teardown"))

    unique_edges = tuple(sorted(set(edges)))
    has_pred = {dst for _, dst, _ in unique_edges}
    roots = tuple(sorted(nid for nid in nodes if nid not in has_pred))
    bindings = {
        name: {
            "capability": spec.binding(name).capability,
            "selector": spec.binding(name).selector,
            "constraints": dict(spec.binding(name).constraints),
        }
        for name in used_bindings
    }
    dag = WorkflowDAG(nodes=nodes, edges=unique_edges, roots=roots, bindings=bindings)
    validate_dag(dag)
    return dag


def render_tree(dag: WorkflowDAG) -> str:
    """Human-readable indented rendering in topological order."""
    depth: dict[str, int] = {}
    lines = []
    for nid in topo_order(dag):
        preds = dag.predecessors(nid)
        depth[nid] = 0 if not preds else max(depth[p] for p in preds) + 1
        node = dag.nodes[nid]
        lines.append("  " * depth[nid] + f"{nid} [{node.kind}] {node.binding}.{node.operation}")
    return "\n".join(lines)
