"""Context events and trace files.

A trace is a JSON array of events (or ``{"trace_version": 1, "events": [...]}``).
Budgets may be absolute numbers (bytes, seconds) or percentage strings such
as ``"75%"``, resolved against a reference plan's estimate when the trace is
bound to a graph.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import jsonschema

from hmtplan.errors import SchemaError

_BUDGET = {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                     {"type": "string", "pattern": r"^[0-9]+(\.[0-9]+)?%$"}]}
EVENT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["t", "M_bgt", "T_bgt", "battery"],
    "properties": {
        "t": {"type": "number"},
        "label": {"type": "string"},
        "M_bgt": _BUDGET,
        "T_bgt": _BUDGET,
        "battery": {"type": "number", "minimum": 0, "maximum": 1},
        "background_pressure": {"type": "number", "minimum": 0, "maximum": 1},
        "freq_scale": {"type": "number", "exclusiveMinimum": 0},
        "bandwidth": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
    },
}
TRACE_SCHEMA: dict[str, Any] = {
    "oneOf": [
        {"type": "array", "items": EVENT_SCHEMA},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["events"],
            "properties": {"trace_version": {"const": 1}, "events": {"type": "array", "items": EVENT_SCHEMA}},
        },
    ]
}


def _budget(value: float | str) -> float | str:
    return value if isinstance(value, str) else float(value)


@dataclass(frozen=True)
class ContextEvent:
    t: float
    mem_budget: float | str  # bytes, or "NN%" of the reference plan's M
    time_budget: float | str  # seconds, or "NN%" of the reference plan's T
    battery: float  # remaining battery fraction
    background_pressure: float = 0.0
    freq_scale: float = 1.0
    bandwidth: Mapping[str, float] = field(default_factory=dict)  # "a|b" -> bytes/s
    label: str = ""

    @property
    def resolved(self) -> bool:
        return not isinstance(self.mem_budget, str) and not isinstance(self.time_budget, str)

    def resolve(self, memory_ref: float, time_ref: float) -> "ContextEvent":
        def conv(v, ref):
            return float(v[:-1]) / 100.0 * ref if isinstance(v, str) else v

        return replace(self, mem_budget=conv(self.mem_budget, memory_ref), time_budget=conv(self.time_budget, time_ref))

    def context_key(self) -> tuple:
        """The fields that change cost estimates (budgets and battery do not)."""
        return (self.background_pressure, self.freq_scale, tuple(sorted(self.bandwidth.items())))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"t": self.t}
        if self.label:
            d["label"] = self.label
        d.update({
            "M_bgt": self.mem_budget,
            "T_bgt": self.time_budget,
            "battery": self.battery,
            "background_pressure": self.background_pressure,
            "freq_scale": self.freq_scale,
        })
        if self.bandwidth:
            d["bandwidth"] = dict(sorted(self.bandwidth.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ContextEvent":
        return cls(
            float(d["t"]),
            _budget(d["M_bgt"]),
            _budget(d["T_bgt"]),
            float(d["battery"]),
            float(d.get("background_pressure", 0.0)),
            float(d.get("freq_scale", 1.0)),
            {k: float(v) for k, v in d.get("bandwidth", {}).items()},
            d.get("label", ""),
        )


def parse_trace(doc: Any) -> list[ContextEvent]:
    try:
        jsonschema.validate(doc, TRACE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"trace: {exc.message}") from None
    raw = doc["events"] if isinstance(doc, dict) else doc
    events = [ContextEvent.from_dict(e) for e in raw]
    validate_trace(events)
    return events


def validate_trace(events: Sequence[ContextEvent]) -> None:
    if not events:
        raise SchemaError("trace has no events")
    for a, b in zip(events, events[1:]):
        if b.t < a.t:
            raise SchemaError(f"trace events out of time order at t={b.t}")
    for e in events:
        for name, v in (("M_bgt", e.mem_budget), ("T_bgt", e.time_budget)):
            if not isinstance(v, str) and not v > 0:
                raise SchemaError(f"event t={e.t}: {name} must be > 0")
        for key in e.bandwidth:
            if key.count("|") != 1:
                raise SchemaError(f"event t={e.t}: bandwidth key {key!r} must look like 'a|b'")


def load_trace(path: str) -> list[ContextEvent]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"trace {path!r} is not JSON: {exc}") from None
    return parse_trace(doc)
