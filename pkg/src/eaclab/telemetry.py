"""Append-only measurement records with spec/plan provenance hashes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from eaclab.canon import canonical_json
from eaclab.errors import NoDataError, ProvenanceError
from eaclab.units import Quantity


@dataclass(frozen=True)
class TelemetryRecord:
    run_id: str
    node_id: str
    device_id: str
    time: float
    fields: dict[str, Quantity]
    spec_hash: str
    plan_hash: str

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "node_id": self.node_id,
            "device_id": self.device_id,
            "time": self.time,
            "fields": {k: q.to_dict() for k, q in sorted(self.fields.items())},
            "spec_hash": self.spec_hash,
            "plan_hash": self.plan_hash,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TelemetryRecord":
        return cls(
            run_id=obj["run_id"],
            node_id=obj["node_id"],
            device_id=obj["device_id"],
            time=obj["time"],
            fields={k: Quantity.from_dict(v) for k, v in obj["fields"].items()},
            spec_hash=obj["spec_hash"],
            plan_hash=obj["plan_hash"],
        )


@dataclass
class TelemetryStore:
    _records: list[TelemetryRecord] = field(default_factory=list)

    def record(self, rec: TelemetryRecord) -> None:
        if not rec.spec_hash or not rec.plan_hash:
            raise ProvenanceError(
                f"record for {rec.node_id!r} is missing a provenance hash"
            )
        self._records.append(rec)

    def query(self, run_id: str) -> list[TelemetryRecord]:
        return [r for r in self._records if r.run_id == run_id]

    def __len__(self) -> int:
        return len(self._records)

    def report_argmax(self, run_id: str, field_name: str) -> dict:
        """Record maximizing a field; ties go to the earliest record."""
        best: TelemetryRecord | None = None
        best_value = float("-inf")
        for rec in self.query(run_id):
            if field_name not in rec.fields:
                continue
            value = rec.fields[field_name].value
            if value > best_value:
                best, best_value = rec, value
        if best is None:
            raise NoDataError(f"no records with field {field_name!r} in run {run_id!r}")
        return {"value": best_value, "at": dict(best.fields)}

    def export_ndjson(self, run_id: str) -> str:
        return "".join(
            canonical_json(rec.to_dict()) + "\n" for rec in self.query(run_id)
        )

    def export_csv(self, run_id: str) -> str:
        """Plot-friendly view: concentration, conductivity, temperature."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["concentration", "conductivity", "temperature"])
        for rec in self.query(run_id):
            writer.writerow(
                [
                    _field_value(rec, "concentration"),
                    _field_value(rec, "conductivity"),
                    _field_value(rec, "temperature"),
                ]
            )
        return buf.getvalue()


def _field_value(rec: TelemetryRecord, name: str) -> str:
    q = rec.fields.get(name)
    return "" if q is None else repr(q.value)
