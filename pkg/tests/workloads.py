"""Constructed workloads shared by the scheduler and acceptance tests."""

import json
import random

from eaclab.capabilities import registry_from_lab_config
from eaclab.compiler import OpNode, WorkflowDAG
from eaclab.labstate import DeviceRecord, LabState, genesis_from_lab_config
from eaclab.specmodel import parse_spec

# Single reader device that starts the day holding temperature mode T310;
# four scan jobs at [298, 298, 310, 298] K with a 100 s reconfiguration
# penalty. FIFO pays three mode switches, batching pays one.
PAYOFF_LAB = {
    "devices": [
        {"device_id": "reader_1", "capability": "reader", "mode": "T310"}
    ],
    "capabilities": {
        "reader": {
            "operations": {
                "scan": {
                    "params": {"temperature": {"unit": "K", "min": 200, "max": 400}},
                    "kind": "read",
                }
            },
            "transitions": {"warmup": 0, "cooldown": 100},
        }
    },
}

PAYOFF_TEMPS = [298, 298, 310, 298]

PAYOFF_SPEC = {
    "spec_id": "two-temperature-batch",
    "version": "1.0.0",
    "resources": [{"name": "r", "capability": "reader"}],
    "steps": [
        {
            "id": f"j{i + 1}",
            "binding": "r",
            "op": "scan",
            "params": {"temperature": {"value": t, "unit": "K"}},
        }
        for i, t in enumerate(PAYOFF_TEMPS)
    ],
}


def payoff_workload():
    registry = registry_from_lab_config(PAYOFF_LAB)
    state = genesis_from_lab_config(PAYOFF_LAB)
    spec = parse_spec(json.dumps(PAYOFF_SPEC))
    return spec, registry, state


def random_dag(seed: int):
    """Seeded random workflow instance: DAG, lab state, and registry."""
    rng = random.Random(seed)
    n = rng.randint(4, 20)
    n_devices = rng.randint(1, 5)
    n_bindings = rng.randint(1, n_devices)
    warmup = rng.choice([0, 10, 30])
    cooldown = rng.choice([0, 20, 50])
    lab = {
        "devices": [
            {"device_id": f"w{i}", "capability": "work"} for i in range(n_devices)
        ],
        "capabilities": {
            "work": {
                "operations": {"go": {"params": {}}},
                "transitions": {"warmup": warmup, "cooldown": cooldown},
            }
        },
    }
    registry = registry_from_lab_config(lab)
    state = genesis_from_lab_config(lab)

    nodes = {}
    for i in range(n):
        nid = f"n{i:02d}"
        nodes[nid] = OpNode(
            node_id=nid,
            binding=f"b{rng.randrange(n_bindings)}",
            operation="go",
            kind="action",
            est_duration=float(rng.randint(1, 5)),
            mode=rng.choice([None, "T298", "T310", "T330"]),
        )
    ids = sorted(nodes)
    edges = set()
    for j in range(1, n):
        # Keep the graph connected enough that enumeration stays tractable.
        if rng.random() < 0.7:
            edges.add((ids[rng.randrange(j)], ids[j], "flow"))
        for _ in range(rng.randint(0, 2)):
            i = rng.randrange(j)
            if rng.random() < 0.3:
                edges.add((ids[i], ids[j], "flow"))
    has_pred = {dst for _, dst, _ in edges}
    roots = tuple(sorted(nid for nid in ids if nid not in has_pred))
    dag = WorkflowDAG(
        nodes=nodes,
        edges=tuple(sorted(edges)),
        roots=roots,
        bindings={f"b{i}": {"capability": "work"} for i in range(n_bindings)},
    )
    return dag, state, registry


def brute_force_makespan(dag, state, registry, devices) -> float:
    """Exact minimum makespan over every dispatch order, for small DAGs.

    Enumerates topological orders with memoized branch-and-bound; inserting
    idle time never helps in this model, so this is optimal.
    """
    from eaclab.capabilities import TransitionLatency

    latencies: dict[str, TransitionLatency] = {}
    for nid, node in dag.nodes.items():
        cap = dag.bindings.get(node.binding, {}).get("capability")
        latencies[nid] = (
            registry.get(cap).transitions if cap and cap in registry
            else TransitionLatency()
        )
    preds = {nid: dag.predecessors(nid) for nid in dag.nodes}
    succs = {nid: dag.successors(nid) for nid in dag.nodes}
    all_ids = frozenset(dag.nodes)
    init_mode = {
        d: (state.devices[d].mode if d in state.devices else None)
        for d in set(devices.values())
    }
    best = [float("inf")]
    seen: dict = {}

    def dfs(done: frozenset, done_at, free, mode, current: float):
        if current >= best[0]:
            return
        if done == all_ids:
            best[0] = current
            return
        frontier = tuple(
            sorted((nid, done_at[nid]) for nid in done if any(s not in done for s in succs[nid]))
        )
        key = (done, frontier, tuple(sorted(free.items())), tuple(sorted(mode.items())))
        prior = seen.get(key)
        if prior is not None and prior <= current:
            return
        seen[key] = current
        ready = [nid for nid in sorted(all_ids - done) if all(p in done for p in preds[nid])]
        for nid in ready:
            node = dag.nodes[nid]
            device = devices[node.binding]
            cost = latencies[nid].cost(mode[device], node.mode)
            earliest = max([done_at[p] for p in preds[nid]] or [0.0])
            start = max(earliest, free[device]) + cost
            end = start + node.est_duration
            new_mode = dict(mode)
            if node.mode is not None:
                new_mode[device] = node.mode
            new_free = dict(free)
            new_free[device] = end
            new_done_at = dict(done_at)
            new_done_at[nid] = end
            dfs(done | {nid}, new_done_at, new_free, new_mode, max(current, end))

    dfs(frozenset(), {}, {d: 0.0 for d in init_mode}, dict(init_mode), 0.0)
    return best[0]
