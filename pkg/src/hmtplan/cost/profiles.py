"""Device profiles and fleets.

Energy coefficients ``delta1..delta3, delta_sm`` are the unit energies of a
MAC, a cache access, a DRAM access and a shared-memory access, in abstract
MAC-equivalent units (``delta1 = 1``). Latency coefficients ``lambda2`` and
``lambda3`` are seconds per byte served from cache and DRAM; ``lambda1``
defaults to ``1 / mac_throughput``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Any, Iterable, Mapping

import jsonschema

from hmtplan.errors import SchemaError

GPU_ENERGY_RATIOS = (1.0, 6.0, 200.0, 2.0)
CPU_ENERGY_RATIOS = (1.0, 6.0, 200.0, 0.0)


class Processor(str, Enum):
    CPU = "CPU"
    GPU = "GPU"


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    processor: Processor
    mac_throughput: float  # MAC/s at a 100% cache-hit rate, all cores
    cores: int = 1
    cache_bytes: int = 1 << 20
    mem_capacity_bytes: int = 1 << 32
    delta1: float = 1.0
    delta2: float = 6.0
    delta3: float = 200.0
    delta_sm: float = 0.0
    lambda1: float | None = None
    lambda2: float = 1e-10
    lambda3: float = 2.5e-10
    ridge_intensity: float = 0.0  # MAC/byte below which compute runs under peak
    eps_min: float = 0.05
    swap_bandwidth: float = 1e9  # bytes/s to slower storage
    codec_rate: float = 1e-9  # seconds per byte encoded or decoded
    transfer_latency: float = 0.0  # fixed cost per cross-device transfer
    battery_capacity: float = 1.0
    freq_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "processor", Processor(self.processor))
        if self.lambda1 is None:
            object.__setattr__(self, "lambda1", 1.0 / self.mac_throughput)
        if self.mac_throughput <= 0 or self.cores < 1 or self.freq_scale <= 0:
            raise SchemaError(f"device {self.id!r}: throughput, cores and freq_scale must be positive")
        if self.processor is Processor.GPU and self.delta_sm <= 0:
            raise SchemaError(f"device {self.id!r}: GPU profiles need delta_sm > 0")
        if self.processor is Processor.CPU and self.delta_sm != 0:
            raise SchemaError(f"device {self.id!r}: CPU profiles have no shared-memory term (delta_sm = 0)")
        if not 0 < self.eps_min <= 1:
            raise SchemaError(f"device {self.id!r}: eps_min must be in (0, 1]")

    @property
    def energy_coefficients(self) -> tuple[float, float, float, float]:
        return (self.delta1, self.delta2, self.delta3, self.delta_sm)

    @property
    def latency_coefficients(self) -> tuple[float, float, float]:
        return (float(self.lambda1), self.lambda2, self.lambda3)

    def with_context(self, freq_scale: float | None = None) -> "DeviceProfile":
        if freq_scale is None or freq_scale == 1.0:
            return self
        return replace(self, freq_scale=self.freq_scale * freq_scale)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["processor"] = self.processor.value
        return d


def default_profile(device_id: str, processor: Processor | str, mac_throughput: float, **overrides) -> DeviceProfile:
    """Profile with the stock energy ratios (1:6:200:2 on GPU, 1:6:200 on CPU)."""
    processor = Processor(processor)
    ratios = GPU_ENERGY_RATIOS if processor is Processor.GPU else CPU_ENERGY_RATIOS
    kw = dict(zip(("delta1", "delta2", "delta3", "delta_sm"), ratios))
    kw.update(overrides)
    return DeviceProfile(device_id, processor, mac_throughput, **kw)


@dataclass(frozen=True)
class Fleet:
    devices: Mapping[str, DeviceProfile]
    links: Mapping[frozenset, float] = field(default_factory=dict)
    home: str = ""

    def __post_init__(self) -> None:
        if not self.devices:
            raise SchemaError("fleet has no devices")
        if not self.home:
            object.__setattr__(self, "home", next(iter(self.devices)))
        if self.home not in self.devices:
            raise SchemaError(f"home device {self.home!r} is not in the fleet")
        for pair, bw in self.links.items():
            if not pair <= set(self.devices):
                raise SchemaError(f"link {sorted(pair)} references an unknown device")
            if bw <= 0:
                raise SchemaError(f"link {sorted(pair)}: bandwidth must be > 0")

    @property
    def device_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.devices))

    def bandwidth(self, a: str, b: str) -> float:
        """Bytes/s between two devices; ``inf`` on the same device, 0 when no link exists."""
        if a == b:
            return math.inf
        return self.links.get(frozenset((a, b)), 0.0)

    def restrict(self, device_ids: Iterable[str]) -> "Fleet":
        keep = set(device_ids)
        missing = keep - set(self.devices)
        if missing:
            raise SchemaError(f"unknown device(s): {', '.join(sorted(missing))}")
        home = self.home if self.home in keep else sorted(keep)[0]
        return Fleet({k: v for k, v in self.devices.items() if k in keep},
                     {p: bw for p, bw in self.links.items() if p <= keep}, home)

    def with_context(self, freq_scale: float | None = None,
                     bandwidth: Mapping[str, float] | None = None) -> "Fleet":
        """Apply a context snapshot: DVFS scale to every device and link overrides (``"a|b"`` keys)."""
        devices = {k: d.with_context(freq_scale) for k, d in self.devices.items()}
        links = dict(self.links)
        for key, bw in (bandwidth or {}).items():
            a, b = key.split("|")
            links[frozenset((a, b))] = float(bw)
        return Fleet(devices, links, self.home)

    def to_dict(self) -> dict[str, Any]:
        return {
            "fleet_version": 1,
            "home": self.home,
            "devices": [self.devices[k].to_dict() for k in self.device_ids],
            "links": [{"devices": sorted(p), "bandwidth": bw} for p, bw in sorted(self.links.items(), key=lambda kv: sorted(kv[0]))],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Fleet":
        try:
            jsonschema.validate(doc, FLEET_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"fleet document: {exc.message}") from None
        devices: dict[str, DeviceProfile] = {}
        for d in doc["devices"]:
            if d["id"] in devices:
                raise SchemaError(f"duplicate device id {d['id']!r}")
            devices[d["id"]] = DeviceProfile(**d)
        links = {}
        for link in doc.get("links", []):
            a, b = link["devices"]
            if a == b:
                raise SchemaError("a link must join two different devices")
            links[frozenset((a, b))] = float(link["bandwidth"])
        return cls(devices, links, doc.get("home", ""))

    @classmethod
    def from_json(cls, text: str) -> "Fleet":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"fleet document is not JSON: {exc}") from None


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
DEVICE_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "processor", "mac_throughput"],
    "properties": {
        "id": {"type": "string", "minLength": 1, "pattern": "^[^|]+$"},
        "processor": {"enum": [p.value for p in Processor]},
        "mac_throughput": _POS,
        "cores": {"type": "integer", "minimum": 1},
        "cache_bytes": {"type": "integer", "minimum": 0},
        "mem_capacity_bytes": {"type": "integer", "minimum": 1},
        "delta1": _NONNEG, "delta2": _NONNEG, "delta3": _NONNEG, "delta_sm": _NONNEG,
        "lambda1": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "lambda2": _NONNEG, "lambda3": _NONNEG,
        "ridge_intensity": _NONNEG,
        "eps_min": _POS,
        "swap_bandwidth": _POS,
        "codec_rate": _NONNEG,
        "transfer_latency": _NONNEG,
        "battery_capacity": _POS,
        "freq_scale": _POS,
    },
}
FLEET_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["devices"],
    "properties": {
        "fleet_version": {"const": 1},
        "home": {"type": "string"},
        "devices": {"type": "array", "minItems": 1, "items": DEVICE_SCHEMA},
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["devices", "bandwidth"],
                "properties": {
                    "devices": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                    "bandwidth": _POS,
                },
            },
        },
    },
}


def load_fleet(name_or_path: str) -> Fleet:
    """Load a fleet from a JSON path, or a bundled fleet by name (``single_cpu``, ``vehicle_drone``)."""
    if os.path.isfile(name_or_path):
        with open(name_or_path, encoding="utf-8") as fh:
            return Fleet.from_json(fh.read())
    stem = os.path.basename(name_or_path).removesuffix(".json")
    ref = resources.files("hmtplan.data").joinpath("fleets", f"{stem}.json")
    if not ref.is_file():
        raise SchemaError(f"fleet file {name_or_path!r} not found")
    return Fleet.from_json(ref.read_text(encoding="utf-8"))
