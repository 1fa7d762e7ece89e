"""Computation-graph IR: tensors, operator nodes, blocks and the graph itself.

Graphs are treated as immutable values. Every pass builds a new graph through
:meth:`ComputationGraph.evolve` instead of mutating one in place.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import jsonschema

from hmtplan.errors import SchemaError, StructuralError

IR_VERSION = 1


class OpKind(str, Enum):
    CONV = "Conv"
    DEPTHWISE_CONV = "DepthwiseConv"
    POINTWISE_CONV = "PointwiseConv"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    SIGMOID = "Sigmoid"
    TANH = "Tanh"
    FULLY_CONNECTED = "FullyConnected"
    POOL = "Pool"
    REDUCE = "Reduce"
    ADD = "Add"
    CONCAT = "Concat"
    EXIT_BRANCH = "ExitBranch"
    IDENTITY = "Identity"
    CONSTANT = "Constant"
    # produced by passes
    GRADIENT = "Gradient"
    WEIGHT_UPDATE = "WeightUpdate"
    FUSED = "Fused"


ELEMENTWISE = frozenset({OpKind.RELU, OpKind.SIGMOID, OpKind.TANH})
CONV_KINDS = frozenset({OpKind.CONV, OpKind.DEPTHWISE_CONV, OpKind.POINTWISE_CONV})


class Mode(str, Enum):
    INFERENCE = "InferenceOnly"
    TRAINING = "Training"


ELEM_BITS = (4, 8, 16, 32)


@dataclass(frozen=True)
class TensorSpec:
    id: str
    shape: tuple[int, ...]
    elem_bits: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.shape or any(d < 1 for d in self.shape):
            raise StructuralError(f"tensor {self.id!r}: dimensions must be >= 1, got {self.shape}")
        if self.elem_bits not in ELEM_BITS:
            raise StructuralError(f"tensor {self.id!r}: elem_bits must be one of {ELEM_BITS}")

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def bytes(self) -> int:
        return math.ceil(self.numel * self.elem_bits / 8)


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: OpKind
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    macs: int = 0
    param_bytes: int = 0
    attrs: Mapping[str, Any] = field(default_factory=dict)
    block: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if self.macs < 0 or self.param_bytes < 0:
            raise StructuralError(f"node {self.id!r}: macs and param_bytes must be >= 0")
        if self.kind is OpKind.CONSTANT and self.inputs:
            raise StructuralError(f"constant node {self.id!r} must not have tensor inputs")


@dataclass(frozen=True)
class Block:
    """A named group of nodes (residual block, exit head, ...) from the zoo builder.

    ``skippable`` blocks map ``input`` to an ``output`` of identical shape, so
    depth skipping can rewire consumers of ``output`` straight to ``input``.
    """

    id: str
    nodes: tuple[str, ...]
    input: str | None = None
    output: str | None = None
    skippable: bool = False


@dataclass(frozen=True, eq=False)
class ComputationGraph:
    nodes: Mapping[str, OperatorNode]
    tensors: Mapping[str, TensorSpec]
    exits: tuple[str, ...] = ()
    mode: Mode = Mode.INFERENCE
    blocks: Mapping[str, Block] = field(default_factory=dict)
    name: str = "graph"

    def __post_init__(self) -> None:
        object.__setattr__(self, "exits", tuple(self.exits))
        object.__setattr__(self, "mode", Mode(self.mode))
        self._validate()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def build(
        cls,
        nodes: Iterable[OperatorNode],
        tensors: Iterable[TensorSpec],
        exits: Sequence[str] = (),
        mode: Mode = Mode.INFERENCE,
        blocks: Iterable[Block] = (),
        name: str = "graph",
    ) -> "ComputationGraph":
        node_map: dict[str, OperatorNode] = {}
        for n in nodes:
            if n.id in node_map:
                raise StructuralError(f"duplicate node id {n.id!r}")
            node_map[n.id] = n
        tensor_map: dict[str, TensorSpec] = {}
        for t in tensors:
            if t.id in tensor_map:
                raise StructuralError(f"duplicate tensor id {t.id!r}")
            tensor_map[t.id] = t
        return cls(node_map, tensor_map, tuple(exits), mode, {b.id: b for b in blocks}, name)

    def evolve(self, **changes: Any) -> "ComputationGraph":
        fields_ = {
            "nodes": self.nodes,
            "tensors": self.tensors,
            "exits": self.exits,
            "mode": self.mode,
            "blocks": self.blocks,
            "name": self.name,
        }
        fields_.update(changes)
        return ComputationGraph(**fields_)

    def _validate(self) -> None:
        producers: dict[str, str] = {}
        for n in self.nodes.values():
            for t in n.inputs + n.outputs:
                if t not in self.tensors:
                    raise StructuralError(f"node {n.id!r} references unknown tensor {t!r}")
            for t in n.outputs:
                if t in producers:
                    raise StructuralError(
                        f"tensor {t!r} has two producers: {producers[t]!r} and {n.id!r}"
                    )
                producers[t] = n.id
        for e in self.exits:
            if e not in self.nodes or self.nodes[e].kind is not OpKind.EXIT_BRANCH:
                raise StructuralError(f"exit {e!r} is not an ExitBranch node")
        for b in self.blocks.values():
            for nid in b.nodes:
                if nid not in self.nodes:
                    raise StructuralError(f"block {b.id!r} references unknown node {nid!r}")
        topo_sort(self)  # raises on cycles

    # -- structural queries ---------------------------------------------------

    @cached_property
    def producer_of(self) -> dict[str, str]:
        return {t: n.id for n in self.nodes.values() for t in n.outputs}

    @cached_property
    def consumers_of(self) -> dict[str, tuple[str, ...]]:
        acc: dict[str, list[str]] = {t: [] for t in self.tensors}
        for n in self.nodes.values():
            for t in dict.fromkeys(n.inputs):
                acc[t].append(n.id)
        return {t: tuple(sorted(v)) for t, v in acc.items()}

    @cached_property
    def order(self) -> tuple[str, ...]:
        return tuple(topo_sort(self))

    @property
    def input_tensors(self) -> tuple[str, ...]:
        """Tensors with no producer that some node reads."""
        return tuple(
            t for t in self.tensors if t not in self.producer_of and self.consumers_of[t]
        )

    @property
    def output_tensors(self) -> tuple[str, ...]:
        """Exit outputs when exits exist, otherwise every unconsumed produced tensor."""
        if self.exits:
            return tuple(t for e in self.exits for t in self.nodes[e].outputs)
        return tuple(
            t for t in self.tensors if t in self.producer_of and not self.consumers_of[t]
        )

    def predecessors(self, node_id: str) -> tuple[str, ...]:
        node = self.nodes[node_id]
        preds = {self.producer_of[t] for t in node.inputs if t in self.producer_of}
        return tuple(sorted(preds))

    def successors(self, node_id: str) -> tuple[str, ...]:
        succ = {c for t in self.nodes[node_id].outputs for c in self.consumers_of[t]}
        return tuple(sorted(succ))

    def edges(self) -> set[tuple[str, str, str]]:
        """(producer, tensor, consumer) triples."""
        return {
            (self.producer_of[t], t, c)
            for t, cs in self.consumers_of.items()
            if t in self.producer_of
            for c in cs
        }

    def ancestors(self, node_ids: Iterable[str]) -> set[str]:
        seen: set[str] = set()
        stack = list(node_ids)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.predecessors(nid))
        return seen

    @property
    def total_macs(self) -> int:
        return sum(n.macs for n in self.nodes.values())

    @property
    def total_param_bytes(self) -> int:
        return sum(n.param_bytes for n in self.nodes.values())

    def tensor_bytes(self, tensor_ids: Iterable[str]) -> int:
        return sum(self.tensors[t].bytes for t in tensor_ids)

    def subgraph(self, node_ids: Iterable[str]) -> "ComputationGraph":
        """Induced subgraph; tensors are kept when some kept node touches them."""
        keep = set(node_ids)
        nodes = {nid: n for nid, n in self.nodes.items() if nid in keep}
        used = {t for n in nodes.values() for t in n.inputs + n.outputs}
        tensors = {tid: t for tid, t in self.tensors.items() if tid in used}
        exits = tuple(e for e in self.exits if e in keep)
        blocks = {
            b.id: Block(
                b.id,
                tuple(n for n in b.nodes if n in keep),
                b.input if b.input in tensors else None,
                b.output if b.output in tensors else None,
                b.skippable and all(n in keep for n in b.nodes),
            )
            for b in self.blocks.values()
            if any(n in keep for n in b.nodes)
        }
        return self.evolve(nodes=nodes, tensors=tensors, exits=exits, blocks=blocks)

    def exit_subgraph(self, k: int) -> "ComputationGraph":
        """Nodes needed to reach exit ``k``.

        Earlier exit heads are evaluated on the way (their confidence decides
        whether to stop), so the ancestors of exits ``0..k`` are all kept.
        """
        if not self.exits:
            if k not in (0, -1):
                raise StructuralError("graph has no exits")
            return self
        if not -len(self.exits) <= k < len(self.exits):
            raise StructuralError(f"exit index {k} out of range for {len(self.exits)} exits")
        k %= len(self.exits)
        if k == len(self.exits) - 1:
            return self
        return self.subgraph(self.ancestors(self.exits[: k + 1]))

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "ir_version": IR_VERSION,
            "name": self.name,
            "mode": self.mode.value,
            "tensors": [
                {"id": t.id, "shape": list(t.shape), "elem_bits": t.elem_bits}
                for t in self.tensors.values()
            ],
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "inputs": list(n.inputs),
                    "outputs": list(n.outputs),
                    "macs": n.macs,
                    "param_bytes": n.param_bytes,
                    "attrs": dict(n.attrs),
                    "block": n.block,
                }
                for n in self.nodes.values()
            ],
            "exits": list(self.exits),
            "blocks": [
                {
                    "id": b.id,
                    "nodes": list(b.nodes),
                    "input": b.input,
                    "output": b.output,
                    "skippable": b.skippable,
                }
                for b in self.blocks.values()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ComputationGraph":
        try:
            jsonschema.validate(doc, GRAPH_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"graph document: {exc.message}") from None
        tensors = [TensorSpec(t["id"], tuple(t["shape"]), t.get("elem_bits", 32)) for t in doc["tensors"]]
        nodes = [
            OperatorNode(
                n["id"],
                OpKind(n["kind"]),
                tuple(n.get("inputs", ())),
                tuple(n.get("outputs", ())),
                n.get("macs", 0),
                n.get("param_bytes", 0),
                dict(n.get("attrs", {})),
                n.get("block"),
            )
            for n in doc["nodes"]
        ]
        blocks = [
            Block(b["id"], tuple(b["nodes"]), b.get("input"), b.get("output"), b.get("skippable", False))
            for b in doc.get("blocks", [])
        ]
        return cls.build(
            nodes, tensors, doc.get("exits", []), Mode(doc.get("mode", Mode.INFERENCE.value)),
            blocks, doc.get("name", "graph"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ComputationGraph":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"graph document is not JSON: {exc}") from None
        return cls.from_dict(doc)

    def structurally_equal(self, other: "ComputationGraph") -> bool:
        return self.to_dict() == other.to_dict()


_ID = {"type": "string", "minLength": 1}
GRAPH_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["ir_version", "nodes", "tensors", "exits"],
    "properties": {
        "ir_version": {"const": IR_VERSION},
        "name": {"type": "string"},
        "mode": {"enum": [m.value for m in Mode]},
        "tensors": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "shape"],
                "properties": {
                    "id": _ID,
                    "shape": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                    "elem_bits": {"enum": list(ELEM_BITS)},
                },
            },
        },
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "kind"],
                "properties": {
                    "id": _ID,
                    "kind": {"enum": [k.value for k in OpKind]},
                    "inputs": {"type": "array", "items": _ID},
                    "outputs": {"type": "array", "items": _ID},
                    "macs": {"type": "integer", "minimum": 0},
                    "param_bytes": {"type": "integer", "minimum": 0},
                    "attrs": {"type": "object"},
                    "block": {"type": ["string", "null"]},
                },
            },
        },
        "exits": {"type": "array", "items": _ID},
        "blocks": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "nodes"],
                "properties": {
                    "id": _ID,
                    "nodes": {"type": "array", "items": _ID},
                    "input": {"type": ["string", "null"]},
                    "output": {"type": ["string", "null"]},
                    "skippable": {"type": "boolean"},
                },
            },
        },
    },
}


def topo_sort(graph: ComputationGraph) -> list[str]:
    """Kahn's algorithm with the smallest ready node id always taken first."""
    producer: dict[str, str] = {}
    for n in graph.nodes.values():
        for t in n.outputs:
            producer[t] = n.id
    indeg = {nid: 0 for nid in graph.nodes}
    succ: dict[str, set[str]] = {nid: set() for nid in graph.nodes}
    for n in graph.nodes.values():
        preds = {producer[t] for t in n.inputs if t in producer}
        indeg[n.id] = len(preds)
        for p in preds:
            succ[p].add(n.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for s in succ[nid]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(graph.nodes):
        remaining = {nid for nid in graph.nodes if indeg[nid] > 0}
        u, v = _find_back_edge(remaining, succ)
        raise StructuralError(f"cycle detected: back-edge {u!r} -> {v!r}")
    return order


def _find_back_edge(nodes: set[str], succ: Mapping[str, set[str]]) -> tuple[str, str]:
    color = dict.fromkeys(nodes, 0)
    for root in sorted(nodes):
        if color[root]:
            continue
        stack = [(root, iter(sorted(succ[root] & nodes)))]
        color[root] = 1
        while stack:
            u, it = stack[-1]
            for v in it:
                if color[v] == 1:
                    return u, v
                if color[v] == 0:
                    color[v] = 1
                    stack.append((v, iter(sorted(succ[v] & nodes))))
                    break
            else:
                color[u] = 2
                stack.pop()
    raise StructuralError("cycle detected")  # pragma: no cover
