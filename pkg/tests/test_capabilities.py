import pytest
from hypothesis import given, strategies as st

from eaclab.capabilities import (
    DEFAULT_CALIBRATION_WINDOW_S,
    CapabilityRegistry,
    CapabilitySchema,
    OperationSchema,
    ParamSchema,
    TransitionLatency,
    builtin_registry,
    schema_from_dict,
)
from eaclab.errors import (
    DuplicateCapabilityError,
    UnknownCapabilityError,
    UnknownOperationError,
)
from eaclab.units import Quantity, canonicalize_units


def test_builtin_fleet_names():
    registry = builtin_registry()
    assert registry.names() == ["balance", "potentiostat", "pump", "relay", "valve"]


def test_calibration_window_constant():
    assert DEFAULT_CALIBRATION_WINDOW_S == 30 * 24 * 3600
    assert builtin_registry().get("pump").calibration_window == 2_592_000


def test_write_once_registration():
    registry = CapabilityRegistry()
    schema = CapabilitySchema("heater", operations={})
    registry.register(schema)
    with pytest.raises(DuplicateCapabilityError):
        registry.register(schema)
    with pytest.raises(UnknownCapabilityError):
        registry.get("chiller")
    with pytest.raises(UnknownOperationError):
        schema.operation("melt")


def test_pump_envelope():
    registry = builtin_registry()
    op = registry.get("pump").operation("dispense")
    assert op.params["flow_rate"].min == 0.1
    assert op.params["flow_rate"].max == 10.0
    assert op.params["volume"].min == 0.01
    assert op.params["volume"].max == 50.0
    assert not op.idempotent


def test_potentiostat_envelope_and_configure_via():
    registry = builtin_registry()
    op = registry.get("potentiostat").operation("measure_eis")
    assert op.configure_via == "configure"
    assert op.idempotent
    assert op.params["eac"].min == 0.001 and op.params["eac"].max == 1.0
    assert op.params["freq_min"].max == 1e6
    assert op.params["n_freq"].max == 100


def _violation_codes(registry, capability, op, params):
    report = registry.check_param_ranges(capability, op, params)
    return sorted((v.code, v.param) for v in report.violations)


def test_range_check_codes_match_set_difference_oracle():
    registry = builtin_registry()
    schema = registry.get("pump").operation("dispense")
    supplied = {
        "volume": Quantity(100.0, "mL"),  # out of range
        "ghost": Quantity(1.0),  # unknown
    }
    # Oracle built directly from the two name sets plus bound checks.
    required = {n for n, p in schema.params.items() if not p.optional}
    expected = sorted(
        [("missing_param", n) for n in required - set(supplied)]
        + [("unknown_param", n) for n in set(supplied) - set(schema.params)]
        + [("out_of_range", "volume")]
    )
    assert _violation_codes(registry, "pump", "dispense", supplied) == expected


def test_range_check_passes_in_band():
    registry = builtin_registry()
    report = registry.check_param_ranges(
        "pump",
        "dispense",
        {"flow_rate": Quantity(4.0, "mL/min"), "volume": Quantity(0.7, "mL")},
    )
    assert report.ok


def test_bad_unit_flagged():
    registry = builtin_registry()
    report = registry.check_param_ranges(
        "pump",
        "dispense",
        {"flow_rate": Quantity(1.0, "V"), "volume": Quantity(0.7, "mL")},
    )
    assert [v.code for v in report.violations] == ["bad_unit"]


@given(st.floats(min_value=0.01, max_value=50.0, allow_nan=False))
def test_range_check_invariant_under_unit_restatement(volume_ml):
    """A dimensionally equal restatement validates identically."""
    registry = builtin_registry()
    base = {"flow_rate": Quantity(1.0, "mL/min"), "volume": Quantity(volume_ml, "mL")}
    restated = dict(base, volume=canonicalize_units(base["volume"], "m^3"))
    a = registry.check_param_ranges("pump", "dispense", base)
    b = registry.check_param_ranges("pump", "dispense", restated)
    assert [v.code for v in a.violations] == [v.code for v in b.violations]


def test_transition_latency_cost():
    latency = TransitionLatency(
        warmup=60.0, cooldown=100.0, reconfigure={("T298", "T310"): 30.0}
    )
    assert latency.cost("T298", "T298") == 0.0
    assert latency.cost("T298", None) == 0.0
    assert latency.cost("T298", "T310") == 30.0
    assert latency.cost("T310", "T298") == 160.0  # no entry: warmup + cooldown
    assert latency.cost(None, "T298") == 160.0


def test_schema_from_dict_custom_capability():
    schema = schema_from_dict(
        "heater",
        {
            "operations": {
                "heat_to": {
                    "params": {"temperature": {"unit": "K", "min": 280, "max": 360}},
                    "kind": "configure",
                    "idempotent": True,
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
            "transitions": {"warmup": 60, "cooldown": 100},
            "reconcile_ops": {"temperature": "heat_to"},
        },
    )
    assert "connect" in schema.operations  # lifecycle ops always present
    assert schema.operation("heat_to").params["temperature"].max == 360
    assert schema.safety.conditions[0].comparator == "<="
    assert schema.transitions.cost("T298", "T310") == 160.0
    assert schema.reconcile_ops == {"temperature": "heat_to"}


def test_read_operations_must_be_idempotent():
    with pytest.raises(ValueError):
        OperationSchema("peek", kind="read", idempotent=False)
    with pytest.raises(ValueError):
        ParamSchema("", min=2, max=1)
