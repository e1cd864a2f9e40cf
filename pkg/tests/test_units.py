import json
import math

import pytest
from hypothesis import given, strategies as st

from eaclab.canon import canonical_json, sha256_hex
from eaclab.errors import UnitError
from eaclab.units import (
    Quantity,
    canonicalize_units,
    known_units,
    to_canonical,
    unit_dimension,
)


def test_known_units_closed_table():
    assert "mL/min" in known_units()
    assert "furlong" not in known_units()
    with pytest.raises(UnitError):
        Quantity(1.0, "furlong")


def test_non_finite_rejected():
    with pytest.raises(UnitError):
        Quantity(float("nan"), "s")
    with pytest.raises(UnitError):
        Quantity(float("inf"), "V")


def test_linear_conversions():
    assert canonicalize_units(Quantity(2.0, "min"), "s").value == 120.0
    assert canonicalize_units(Quantity(1.0, "h"), "min").value == 60.0
    assert canonicalize_units(Quantity(1.0, "mL"), "m^3").value == pytest.approx(1e-6)
    # 6 mL/min = 1e-7 m^3/s
    assert canonicalize_units(Quantity(6.0, "mL/min"), "m^3/s").value == pytest.approx(1e-7)


def test_celsius_offset():
    assert to_canonical(Quantity(25.0, "degC")).value == pytest.approx(298.15)
    back = canonicalize_units(Quantity(298.15, "K"), "degC")
    assert back.value == pytest.approx(25.0)


def test_incompatible_dimensions():
    with pytest.raises(UnitError):
        canonicalize_units(Quantity(1.0, "s"), "V")
    assert unit_dimension("mol/kg") == "molality"


def test_quantity_dict_round_trip():
    q = Quantity(0.25, "V")
    assert Quantity.from_dict(q.to_dict()) == q
    assert Quantity.from_dict({"value": 3}) == Quantity(3, "")


_UNITS = sorted(known_units())


@given(
    value=st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    unit=st.sampled_from(_UNITS),
)
def test_canonicalization_round_trip(value, unit):
    q = Quantity(value, unit)
    canonical = to_canonical(q)
    back = canonicalize_units(canonical, unit)
    assert math.isclose(back.value, value, rel_tol=1e-9, abs_tol=1e-6)
    assert back.unit == unit


def test_canonical_json_is_sorted_and_compact():
    obj = {"b": 1, "a": {"d": 2, "c": [1, 2]}}
    assert canonical_json(obj) == '{"a":{"c":[1,2],"d":2},"b":1}'


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_sha256_matches_independent_computation():
    import hashlib

    obj = {"k": [1, 2, 3], "s": "x"}
    expected = hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    assert sha256_hex(obj) == expected


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=5),
        st.integers(min_value=-100, max_value=100),
        max_size=5,
    )
)
def test_hash_independent_of_insertion_order(mapping):
    reversed_map = dict(reversed(list(mapping.items())))
    assert sha256_hex(mapping) == sha256_hex(reversed_map)
