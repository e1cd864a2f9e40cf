"""State-aware assignment of workflow nodes to devices over virtual time.

Two policies ship in-tree: ``fifo`` processes nodes in deterministic
topological order; ``batched`` prefers ready nodes whose mode matches the
target device's current mode, amortizing reconfiguration latency, and
falls back to the FIFO ordering whenever that would finish sooner (so a
batched plan never loses to FIFO).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from eaclab.canon import canonical_json, sha256_hex
from eaclab.capabilities import CapabilityRegistry, TransitionLatency
from eaclab.compiler import WorkflowDAG, topo_order, validate_dag
from eaclab.errors import UnschedulableError
from eaclab.labstate import LabState, StateEvent, query_eligible

POLICIES = ("fifo", "batched")


@dataclass(frozen=True)
class Assignment:
    node_id: str
    device_id: str
    start: float
    end: float
    transition: float = 0.0  # latency charged immediately before start

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "device_id": self.device_id,
            "start": self.start,
            "end": self.end,
            "transition": self.transition,
        }


@dataclass(frozen=True)
class Batch:
    batch_id: str
    device_id: str
    mode: str
    members: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "device_id": self.device_id,
            "mode": self.mode,
            "members": list(self.members),
        }


@dataclass(frozen=True)
class ExecutionPlan:
    assignments: tuple[Assignment, ...]
    batches: tuple[Batch, ...]
    makespan: float
    policy: str
    status: str = "ok"  # ok | requiring_recovery
    pending_recovery: str | None = None

    def assignment(self, node_id: str) -> Assignment:
        for a in self.assignments:
            if a.node_id == node_id:
                return a
        raise KeyError(node_id)

    def device_of(self, node_id: str) -> str:
        return self.assignment(node_id).device_id

    def to_dict(self) -> dict:
        return {
            "assignments": [a.to_dict() for a in self.assignments],
            "batches": [b.to_dict() for b in self.batches],
            "makespan": self.makespan,
            "policy": self.policy,
            "status": self.status,
            "pending_recovery": self.pending_recovery,
        }

    def serialize(self) -> str:
        return canonical_json(self.to_dict())


def plan_hash(plan: ExecutionPlan) -> str:
    return sha256_hex(plan.to_dict())


def resolve_bindings(
    dag: WorkflowDAG,
    state: LabState,
    registry: CapabilityRegistry,
    exclude: frozenset[str] = frozenset(),
    pinned: dict[str, str] | None = None,
) -> dict[str, str]:
    """Map each binding to one concrete device, deterministically.

    Bindings are resolved in order of first appearance in the topological
    order; each takes the eligible device with the fewest bindings already
    mapped to it, ties broken by ascending device id.
    """
    order: list[str] = []
    for nid in topo_order(dag):
        binding = dag.nodes[nid].binding
        if binding not in order:
            order.append(binding)
    load: dict[str, int] = {}
    resolved: dict[str, str] = dict(pinned or {})
    for device in resolved.values():
        load[device] = load.get(device, 0) + 1
    for binding in order:
        if binding in resolved:
            continue
        info = dag.bindings.get(binding, {})
        capability = info.get("capability", binding)
        candidates = query_eligible(
            state, capability, info.get("constraints") or None, registry
        )
        selector = info.get("selector")
        if selector is not None:
            candidates = [d for d in candidates if d == selector]
        candidates = [d for d in candidates if d not in exclude]
        if not candidates:
            raise UnschedulableError(
                f"no eligible device for binding {binding!r} ({capability})"
            )
        candidates.sort(key=lambda d: (load.get(d, 0), d))
        resolved[binding] = candidates[0]
        load[candidates[0]] = load.get(candidates[0], 0) + 1
    return resolved


def _latency_for(
    dag: WorkflowDAG, binding: str, registry: CapabilityRegistry
) -> TransitionLatency:
    capability = dag.bindings.get(binding, {}).get("capability")
    if capability is not None and capability in registry:
        return registry.get(capability).transitions
    return TransitionLatency()


def _run_list_schedule(
    dag: WorkflowDAG,
    state: LabState,
    registry: CapabilityRegistry,
    devices: dict[str, str],
    prefer_mode_match: bool,
    device_free: dict[str, float] | None = None,
    device_mode: dict[str, str | None] | None = None,
    skip: frozenset[str] = frozenset(),
    horizon: float = 0.0,
) -> list[Assignment]:
    order = topo_order(dag)
    topo_index = {nid: i for i, nid in enumerate(order)}
    free: dict[str, float] = dict(device_free or {})
    mode: dict[str, str | None] = dict(device_mode or {})
    for device in devices.values():
        free.setdefault(device, horizon)
        if device not in mode:
            mode[device] = state.devices[device].mode if device in state.devices else None

    pending = [nid for nid in order if nid not in skip]
    unmet = {
        nid: sum(1 for p in dag.predecessors(nid) if p not in skip) for nid in pending
    }
    done_at: dict[str, float] = {}
    assignments: list[Assignment] = []
    ready = {nid for nid in pending if unmet[nid] == 0}

    while ready:

        def keyed(nid: str):
            node = dag.nodes[nid]
            device = devices[node.binding]
            latency = _latency_for(dag, node.binding, registry)
            cost = latency.cost(mode.get(device), node.mode)
            earliest = max(
                [done_at[p] for p in dag.predecessors(nid) if p in done_at] or [horizon]
            )
            start = max(earliest, free[device]) + cost
            if prefer_mode_match:
                return (cost > 0, start, node.est_duration, nid)
            return (topo_index[nid],)

        nid = min(ready, key=keyed)
        ready.discard(nid)
        node = dag.nodes[nid]
        device = devices[node.binding]
        latency = _latency_for(dag, node.binding, registry)
        cost = latency.cost(mode.get(device), node.mode)
        earliest = max(
            [done_at[p] for p in dag.predecessors(nid) if p in done_at] or [horizon]
        )
        start = max(earliest, free[device]) + cost
        end = start + node.est_duration
        assignments.append(
            Assignment(node_id=nid, device_id=device, start=start, end=end, transition=cost)
        )
        done_at[nid] = end
        free[device] = end
        if node.mode is not None:
            mode[device] = node.mode
        for succ in dag.successors(nid):
            if succ in skip:
                continue
            unmet[succ] -= 1
            if unmet[succ] == 0:
                ready.add(succ)

    assignments.sort(key=lambda a: (a.start, a.node_id))
    return assignments


def _makespan(assignments) -> float:
    return max((a.end for a in assignments), default=0.0)


def schedule(
    dag: WorkflowDAG,
    state: LabState,
    registry: CapabilityRegistry,
    policy: str = "batched",
) -> ExecutionPlan:
    """Produce a deterministic, invariant-satisfying execution plan."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    validate_dag(dag)
    if not dag.nodes:
        return ExecutionPlan(assignments=(), batches=(), makespan=0.0, policy=policy)
    devices = resolve_bindings(dag, state, registry)
    fifo = _run_list_schedule(dag, state, registry, devices, prefer_mode_match=False)
    if policy == "fifo":
        return ExecutionPlan(
            assignments=tuple(fifo),
            batches=(),
            makespan=_makespan(fifo),
            policy="fifo",
        )
    greedy = _run_list_schedule(dag, state, registry, devices, prefer_mode_match=True)
    chosen = greedy if _makespan(greedy) <= _makespan(fifo) else fifo
    return ExecutionPlan(
        assignments=tuple(chosen),
        batches=tuple(batch_compatible(dag, state, devices)),
        makespan=_makespan(chosen),
        policy="batched",
    )


def _contraction_acyclic(dag: WorkflowDAG, groups: dict[str, int]) -> bool:
    """True iff contracting each group to a supernode leaves the graph acyclic."""
    def rep(nid: str) -> str:
        return f"g{groups[nid]}" if nid in groups else nid

    adjacency: dict[str, set[str]] = {}
    for src, dst, _ in dag.edges:
        a, b = rep(src), rep(dst)
        if a != b:
            adjacency.setdefault(a, set()).add(b)
    seen: dict[str, int] = {}

    def dfs(v: str) -> bool:
        seen[v] = 1
        for w in adjacency.get(v, ()):
            status = seen.get(w, 0)
            if status == 1:
                return False
            if status == 0 and not dfs(w):
                return False
        seen[v] = 2
        return True

    nodes = set(adjacency)
    for targets in adjacency.values():
        nodes |= targets
    return all(seen.get(v, 0) == 2 or dfs(v) for v in sorted(nodes))


def batch_compatible(
    dag: WorkflowDAG, state: LabState, devices: dict[str, str] | None = None
) -> list[Batch]:
    """Partition mode-bearing nodes into maximal same-device same-mode groups.

    Greedy over the topological order; a node joins the open group for its
    (binding, mode) key only if the contracted graph stays acyclic.
    """
    groups: list[list[str]] = []
    group_key: list[tuple[str, str]] = []
    open_group: dict[tuple[str, str], int] = {}
    membership: dict[str, int] = {}
    for nid in topo_order(dag):
        node = dag.nodes[nid]
        if node.mode is None:
            continue
        key = (node.binding, node.mode)
        if key in open_group:
            gid = open_group[key]
            trial = dict(membership)
            trial[nid] = gid
            if _contraction_acyclic(dag, trial):
                groups[gid].append(nid)
                membership[nid] = gid
                continue
        gid = len(groups)
        groups.append([nid])
        group_key.append(key)
        open_group[key] = gid
        membership[nid] = gid
    batches = []
    for gid, members in enumerate(groups):
        binding, mode = group_key[gid]
        device = devices.get(binding, binding) if devices else binding
        batches.append(
            Batch(
                batch_id=f"b{gid}",
                device_id=device,
                mode=mode,
                members=tuple(members),
            )
        )
    return batches


def count_mode_transitions(
    plan: ExecutionPlan, dag: WorkflowDAG, state: LabState
) -> int:
    """Number of device mode switches a plan incurs (initial switch included)."""
    current: dict[str, str | None] = {}
    transitions = 0
    for a in sorted(plan.assignments, key=lambda a: (a.start, a.node_id)):
        node = dag.nodes[a.node_id]
        if node.mode is None:
            continue
        prev = current.get(a.device_id, state.devices[a.device_id].mode
                           if a.device_id in state.devices else None)
        if prev != node.mode:
            transitions += 1
        current[a.device_id] = node.mode
    return transitions


def replan(
    plan: ExecutionPlan,
    event: StateEvent,
    dag: WorkflowDAG,
    state: LabState,
    registry: CapabilityRegistry,
) -> ExecutionPlan:
    """Deterministically adjust a plan after a fault or delay event.

    Assignments finished by ``event.time`` are never edited. A fault
    migrates unfinished work away from the faulted device when the
    in-flight node is idempotent, and otherwise marks the plan as
    requiring recovery at that node. A delay event shifts everything
    downstream of the delayed node by the overrun.
    """
    if event.kind == "fault":
        return _replan_fault(plan, event, dag, state, registry)
    delay = float(event.payload["delay"])
    target = event.payload["node_id"]
    return _replan_delay(plan, dag, target, delay)


def _replan_fault(plan, event, dag, state, registry) -> ExecutionPlan:
    now = event.time
    faulted = event.device_id
    completed = [a for a in plan.assignments if a.end <= now]
    done_ids = {a.node_id for a in completed}
    in_flight = [
        a for a in plan.assignments
        if a.device_id == faulted and a.start < now < a.end
    ]
    if in_flight and not dag.nodes[in_flight[0].node_id].idempotent:
        return replace(
            plan,
            assignments=tuple(completed),
            makespan=_makespan(completed),
            status="requiring_recovery",
            pending_recovery=in_flight[0].node_id,
        )

    pinned = {}
    remapped_bindings = set()
    for a in completed:
        binding = dag.nodes[a.node_id].binding
        if a.device_id != faulted:
            pinned[binding] = a.device_id
        else:
            remapped_bindings.add(binding)
    devices = resolve_bindings(
        dag, state, registry, exclude=frozenset({faulted}), pinned=pinned
    )
    device_free = {}
    for a in completed:
        device_free[a.device_id] = max(device_free.get(a.device_id, now), a.end, now)
    rest = _run_list_schedule(
        dag,
        state,
        registry,
        devices,
        prefer_mode_match=(plan.policy == "batched"),
        device_free=device_free,
        skip=frozenset(done_ids),
        horizon=now,
    )
    assignments = tuple(sorted(completed + rest, key=lambda a: (a.start, a.node_id)))
    return replace(
        plan,
        assignments=assignments,
        makespan=_makespan(assignments),
        status="ok",
        pending_recovery=None,
    )


def _replan_delay(plan, dag, target: str, delay: float) -> ExecutionPlan:
    """Recompute timing with the target node's duration extended by ``delay``.

    Per-device dispatch order is kept exactly as planned, so the effect is
    a pure time translation of everything downstream.
    """
    position = {nid: i for i, nid in enumerate(topo_order(dag))}
    per_device_order: dict[str, list[str]] = {}
    for a in sorted(plan.assignments, key=lambda a: (a.start, position[a.node_id])):
        per_device_order.setdefault(a.device_id, []).append(a.node_id)
    duration = {
        a.node_id: (a.end - a.start) + (delay if a.node_id == target else 0.0)
        for a in plan.assignments
    }
    transition = {a.node_id: a.transition for a in plan.assignments}
    device_of = {a.node_id: a.device_id for a in plan.assignments}

    done_at: dict[str, float] = {}
    free: dict[str, float] = {}
    next_index = {device: 0 for device in per_device_order}
    assignments: list[Assignment] = []
    remaining = set(duration)
    while remaining:
        progressed = False
        for device in sorted(per_device_order):
            index = next_index[device]
            if index >= len(per_device_order[device]):
                continue
            nid = per_device_order[device][index]
            preds = [p for p in dag.predecessors(nid) if p in duration]
            if any(p not in done_at for p in preds):
                continue
            earliest = max([done_at[p] for p in preds] or [0.0])
            start = max(earliest, free.get(device, 0.0)) + transition[nid]
            end = start + duration[nid]
            assignments.append(
                Assignment(nid, device, start, end, transition[nid])
            )
            done_at[nid] = end
            free[device] = end
            next_index[device] += 1
            remaining.discard(nid)
            progressed = True
        if not progressed:
            raise UnschedulableError("replan deadlock: circular device order")
    assignments.sort(key=lambda a: (a.start, a.node_id))
    return replace(
        plan,
        assignments=tuple(assignments),
        makespan=_makespan(assignments),
    )
