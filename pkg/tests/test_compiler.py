import json

import pytest

from eaclab.capabilities import builtin_registry
from eaclab.compiler import (
    WorkflowDAG,
    compile_spec,
    dag_hash,
    render_tree,
    static_check,
    topo_order,
    validate_dag,
)
from eaclab.errors import CompileError, CycleError
from eaclab.labstate import DeviceRecord, LabState
from eaclab.specmodel import expand_sweeps, parse_spec


def _state(*records):
    return LabState(devices={r.device_id: r for r in records})


def _single_measure_spec():
    return parse_spec(
        json.dumps(
            {
                "spec_id": "one-eis",
                "version": "1.0.0",
                "resources": [{"name": "stat", "capability": "potentiostat"}],
                "steps": [
                    {
                        "id": "m",
                        "binding": "stat",
                        "op": "measure_eis",
                        "params": {
                            "eac": {"value": 0.25, "unit": "V"},
                            "freq_min": {"value": 100, "unit": "Hz"},
                            "freq_max": {"value": 10000, "unit": "Hz"},
                            "n_freq": {"value": 10},
                        },
                    }
                ],
            }
        )
    )


def test_single_measure_lowers_to_five_nodes(genesis, registry):
    dag = compile_spec(_single_measure_spec(), registry, genesis)
    assert set(dag.nodes) == {"connect:stat", "m:pre", "m:cfg", "m", "teardown:stat"}
    assert topo_order(dag) == ["connect:stat", "m:pre", "m:cfg", "m", "teardown:stat"]
    assert dag.nodes["m"].kind == "measure"
    assert dag.nodes["m:cfg"].operation == "configure"
    # Configure consumed the shared params; the measure node keeps none.
    assert set(dag.nodes["m:cfg"].params) == {"eac", "freq_min", "freq_max", "n_freq"}
    assert dag.nodes["m"].params == {}


def test_node_count_formula(campaign_spec, campaign_dag):
    bindings = {s.binding for s in campaign_spec.steps}
    per_step = 0
    for s in campaign_spec.steps:
        per_step += 2  # precheck + main
        if s.operation == "measure_eis":
            per_step += 1  # split-off configure
        if s.stabilization is not None:
            per_step += 1
    expected = per_step + 2 * len(bindings)  # connect + teardown per binding
    assert len(campaign_dag.nodes) == expected == 54


def test_compile_is_deterministic(campaign_spec, registry, genesis):
    a = compile_spec(campaign_spec, registry, genesis)
    b = compile_spec(campaign_spec, registry, genesis)
    assert dag_hash(a) == dag_hash(b)
    assert a.serialize() == b.serialize()


def test_every_edge_is_forward_in_topo_order(campaign_dag):
    position = {nid: i for i, nid in enumerate(topo_order(campaign_dag))}
    for src, dst, _ in campaign_dag.edges:
        assert position[src] < position[dst], (src, dst)


def test_measure_dominated_by_fill(campaign_dag):
    # measure#k is downstream of fill#k: a dep edge enters its precheck
    # and fill#k is an ancestor of the measure node itself.
    for k in range(6):
        assert (f"fill#{k}", f"measure#{k}:pre", "dep") in campaign_dag.edges
        ancestors = set()
        frontier = [f"measure#{k}"]
        while frontier:
            nid = frontier.pop()
            for pred in campaign_dag.predecessors(nid):
                if pred not in ancestors:
                    ancestors.add(pred)
                    frontier.append(pred)
        assert f"fill#{k}" in ancestors
        assert f"select#{k}" in ancestors


def test_stabilize_precedes_measure(campaign_dag):
    for k in range(6):
        assert (f"measure#{k}:stab", f"measure#{k}", "flow") in campaign_dag.edges
        stab = campaign_dag.nodes[f"measure#{k}:stab"]
        assert stab.stab == {
            "mode": "setpoint_then_hold",
            "duration_s": 5.0,
            "signal": "temperature",
        }


def test_est_durations(campaign_dag):
    assert campaign_dag.nodes["select#0"].est_duration == 2.0
    # 0.7 mL at 4 mL/min.
    assert campaign_dag.nodes["fill#0"].est_duration == pytest.approx(10.5)
    assert campaign_dag.nodes["connect:pump"].est_duration == 1.0


def test_static_check_clean_campaign(campaign_spec, registry, genesis):
    assert static_check(campaign_spec, registry, genesis) == []


def test_static_check_diagnostic_codes(registry, genesis):
    spec = parse_spec(
        json.dumps(
            {
                "spec_id": "bad",
                "version": "1.0.0",
                "resources": [
                    {"name": "x", "capability": "chromatograph"},
                    {"name": "b", "capability": "balance", "selector": "balance_99"},
                    {"name": "p", "capability": "pump"},
                ],
                "steps": [
                    {
                        "id": "s1",
                        "binding": "p",
                        "op": "levitate",
                    },
                    {
                        "id": "s2",
                        "binding": "p",
                        "op": "dispense",
                        "params": {
                            "flow_rate": {"value": 99, "unit": "mL/min"},
                            "volume": {"value": 1, "unit": "mL"},
                        },
                    },
                ],
            }
        )
    )
    codes = sorted(d.code for d in static_check(spec, registry, genesis))
    assert codes == [
        "out_of_range",
        "unknown_capability",
        "unknown_operation",
        "unsatisfiable_binding",
    ]
    rendered = [d.render() for d in static_check(spec, registry, genesis)]
    assert any(line.startswith("unknown_capability error x:") for line in rendered)


def test_unsatisfiable_selector(registry, genesis):
    spec = parse_spec(
        json.dumps(
            {
                "spec_id": "sel",
                "version": "1.0.0",
                "resources": [
                    {"name": "p", "capability": "pump", "selector": "pump_99"}
                ],
                "steps": [{"id": "s", "binding": "p", "op": "stop"}],
            }
        )
    )
    codes = [d.code for d in static_check(spec, registry, genesis)]
    assert codes == ["unsatisfiable_binding"]
    with pytest.raises(CompileError):
        compile_spec(spec, registry, genesis)


def test_static_safety_predicate(genesis):
    from eaclab.capabilities import schema_from_dict, builtin_registry

    registry = builtin_registry()
    registry.register(
        schema_from_dict(
            "heater",
            {
                "operations": {
                    "heat_to": {
                        "params": {"temperature": {"unit": "K", "min": 0, "max": 1000}}
                    }
                },
                "safety": {
                    "conditions": [
                        {
                            "field": "temperature",
                            "comparator": "<=",
                            "threshold": {"value": 360, "unit": "K"},
                        }
                    ]
                },
            },
        )
    )
    state = genesis.with_device(DeviceRecord("heat_1", "heater"))
    spec = parse_spec(
        json.dumps(
            {
                "spec_id": "hot",
                "version": "1.0.0",
                "resources": [{"name": "h", "capability": "heater"}],
                "steps": [
                    {
                        "id": "roast",
                        "binding": "h",
                        "op": "heat_to",
                        "params": {"temperature": {"value": 400, "unit": "K"}},
                    }
                ],
            }
        )
    )
    codes = [d.code for d in static_check(spec, registry, state)]
    assert codes == ["safety_violation"]


def test_validate_dag_rejects_cycles_and_dangling_edges():
    from eaclab.compiler import OpNode

    nodes = {
        "a": OpNode("a", "b1", "x", "action"),
        "b": OpNode("b", "b1", "x", "action"),
    }
    cyclic = WorkflowDAG(
        nodes=nodes,
        edges=(("a", "b", "flow"), ("b", "a", "flow")),
        roots=("a",),
    )
    with pytest.raises(CycleError):
        topo_order(cyclic)
    dangling = WorkflowDAG(nodes=nodes, edges=(("a", "ghost", "flow"),), roots=("a",))
    with pytest.raises(CompileError):
        validate_dag(dangling)


def test_render_tree_mentions_every_node(campaign_dag):
    text = render_tree(campaign_dag)
    for nid in campaign_dag.nodes:
        assert nid in text


def test_mode_assignment_from_temperature(genesis):
    registry = builtin_registry()
    from eaclab.capabilities import schema_from_dict

    registry.register(
        schema_from_dict(
            "reader",
            {
                "operations": {
                    "scan": {
                        "params": {"temperature": {"unit": "K", "min": 200, "max": 400}},
                        "kind": "read",
                    }
                }
            },
        )
    )
    state = genesis.with_device(DeviceRecord("reader_1", "reader"))
    spec = parse_spec(
        json.dumps(
            {
                "spec_id": "modes",
                "version": "1.0.0",
                "resources": [{"name": "r", "capability": "reader"}],
                "steps": [
                    {
                        "id": "scan",
                        "binding": "r",
                        "op": "scan",
                        "params": {"temperature": {"value": 25, "unit": "degC"}},
                    }
                ],
            }
        )
    )
    dag = compile_spec(spec, registry, state)
    # 25 degC canonicalizes to 298.15 K and rounds to the T298 class.
    assert dag.nodes["scan"].mode == "T298"
