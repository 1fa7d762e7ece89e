"""Table-driven accuracy proxy for compressed variants.

A prediction is ``base + combo + exit + quant``, clamped to ``[0, 100]``:

* combo: if the exact family set has a tabulated delta, that value is used at
  the reference strength and each family shifts it by
  ``single[f] * (severity_f - 1)``; otherwise the single-family deltas are
  summed as ``single[f] * severity_f`` and the result is flagged as a fallback.
* severity: ``(1 - ratio) / (1 - reference)`` for ratio families (0 for an
  identity op, 1 at the reference ratio), ``(1 - width*depth) / (1 - reference)``
  for composite scaling and ``len(blocks) / reference`` for depth skipping.
* exit: ``exit_penalty[k]`` for early exit ``k`` (the final exit costs nothing).
* quant: ``quant_penalty[bits]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping

import jsonschema

from hmtplan.errors import SchemaError
from hmtplan.variants.ops import CompressionOp, Family, VariantConfig

DEFAULT_SINGLE = {
    Family.LOW_RANK: -0.8,
    Family.FIRE: -1.6,
    Family.COMPOSITE: -1.2,
    Family.GHOST: -0.7,
    Family.DEPTH_SKIP: -0.9,
    Family.CHANNEL_PRUNE: -1.0,
}
DEFAULT_REFERENCE = {
    Family.LOW_RANK: 0.5,
    Family.FIRE: 0.25,
    Family.COMPOSITE: 0.5,
    Family.GHOST: 0.5,
    Family.DEPTH_SKIP: 2.0,
    Family.CHANNEL_PRUNE: 0.5,
}
DEFAULT_QUANT = {32: 0.0, 16: 0.0, 8: -0.5, 4: -2.0}


@dataclass(frozen=True)
class AccuracyModel:
    base_accuracy: float
    deltas: Mapping[frozenset, float] = field(default_factory=dict)
    single: Mapping[Family, float] = field(default_factory=lambda: dict(DEFAULT_SINGLE))
    reference: Mapping[Family, float] = field(default_factory=lambda: dict(DEFAULT_REFERENCE))
    exit_penalty: tuple[float, ...] = (-6.0, -3.5, -1.5)
    quant_penalty: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_QUANT))
    dataset: str | None = None

    def severity(self, op: CompressionOp) -> float:
        ref = self.reference.get(op.family, DEFAULT_REFERENCE[op.family])
        if op.family is Family.DEPTH_SKIP:
            return len(op.blocks) / ref
        strength = 1.0 - op.ratio * (op.depth if op.family is Family.COMPOSITE else 1.0)
        return strength / (1.0 - ref)

    def op_delta(self, op: CompressionOp) -> float:
        """Delta contributed by ``op`` on its own (the additive fallback term)."""
        return self.single.get(op.family, 0.0) * self.severity(op)

    # -- JSON -----------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "AccuracyModel":
        try:
            jsonschema.validate(doc, ACCURACY_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"accuracy table: {exc.message}") from None
        deltas = {frozenset(Family(f) for f in e["families"]): float(e["delta"]) for e in doc.get("entries", [])}
        single = dict(DEFAULT_SINGLE)
        single.update({Family(k): float(v) for k, v in doc.get("single", {}).items()})
        reference = dict(DEFAULT_REFERENCE)
        reference.update({Family(k): float(v) for k, v in doc.get("reference", {}).items()})
        quant = dict(DEFAULT_QUANT)
        quant.update({int(k): float(v) for k, v in doc.get("quant_penalty", {}).items()})
        return cls(
            float(doc["base_accuracy"]),
            deltas,
            single,
            reference,
            tuple(float(x) for x in doc.get("exit_penalty", (-6.0, -3.5, -1.5))),
            quant,
            doc.get("dataset"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "base_accuracy": self.base_accuracy,
            "entries": [
                {"families": sorted(f.value for f in fams), "delta": d}
                for fams, d in sorted(self.deltas.items(), key=lambda kv: sorted(f.value for f in kv[0]))
            ],
            "single": {f.value: v for f, v in self.single.items()},
            "reference": {f.value: v for f, v in self.reference.items()},
            "exit_penalty": list(self.exit_penalty),
            "quant_penalty": {str(k): v for k, v in self.quant_penalty.items()},
        }


_FAMILY_ENUM = {"enum": [f.value for f in Family]}
_FAMILY_MAP = {"type": "object", "propertyNames": _FAMILY_ENUM, "additionalProperties": {"type": "number"}}
ACCURACY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["base_accuracy"],
    "properties": {
        "dataset": {"type": ["string", "null"]},
        "base_accuracy": {"type": "number", "minimum": 0, "maximum": 100},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["families", "delta"],
                "properties": {
                    "families": {"type": "array", "items": _FAMILY_ENUM, "minItems": 1, "uniqueItems": True},
                    "delta": {"type": "number"},
                },
            },
        },
        "single": _FAMILY_MAP,
        "reference": _FAMILY_MAP,
        "exit_penalty": {"type": "array", "items": {"type": "number"}},
        "quant_penalty": {"type": "object", "propertyNames": {"enum": ["4", "8", "16", "32"]},
                          "additionalProperties": {"type": "number"}},
    },
}


def load_accuracy_table(name_or_path: str) -> AccuracyModel:
    """Load a bundled table by dataset name (``ubisound``, ``cifar100``...) or a JSON file path."""
    if name_or_path.endswith(".json"):
        with open(name_or_path, encoding="utf-8") as fh:
            return AccuracyModel.from_dict(json.load(fh))
    ref = resources.files("hmtplan.data").joinpath("accuracy", f"{name_or_path.lower()}.json")
    if not ref.is_file():
        raise SchemaError(f"no bundled accuracy table named {name_or_path!r}")
    return AccuracyModel.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def predict_accuracy_detail(model: AccuracyModel, config: VariantConfig,
                            quant_bits: int = 32) -> tuple[float, dict[str, Any]]:
    """Prediction plus metadata (``fallback`` is set when the family set is not tabulated)."""
    fams = config.families
    fallback = False
    if fams and fams in model.deltas:
        combo = model.deltas[fams] + sum(
            model.single.get(op.family, 0.0) * (model.severity(op) - 1.0) for op in config.ops
        )
    else:
        combo = sum(model.op_delta(op) for op in config.ops)
        fallback = len(fams) > 1
    exit_d = 0.0
    if config.exit_index is not None and config.exit_index < len(model.exit_penalty):
        exit_d = model.exit_penalty[config.exit_index]
    quant_d = model.quant_penalty.get(quant_bits, 0.0)
    raw = model.base_accuracy + combo + exit_d + quant_d
    value = min(100.0, max(0.0, raw))
    return value, {"fallback": fallback, "combo_delta": combo, "exit_delta": exit_d, "quant_delta": quant_d}


def predict_accuracy(model: AccuracyModel, config: VariantConfig, quant_bits: int = 32) -> float:
    return predict_accuracy_detail(model, config, quant_bits)[0]
