"""Compression families as structural graph rewrites.

Each family rewrites conv-like nodes and then re-derives every downstream
shape, MAC count and parameter size, so totals always follow the analytic
formulas in :mod:`hmtplan.ir.zoo`.

Channel bookkeeping
-------------------
* ``channel_prune``: targeted dense convs keep ``round(r * in_c)`` input and
  ``round(r * out_c)`` output channels (MACs scale by about ``r**2``).
  Depthwise convs follow their input.
* ``low_rank``: a ``k x k`` conv ``in -> out`` becomes ``k x k in -> R`` then
  ``1 x 1 R -> out`` with ``R = round(r * out)`` (MACs scale by about ``r``).
  Convs where the factorization would not save MACs are left alone.
* ``fire``: squeeze ``1 x 1 in -> S`` (``S = round(r * in)``), ReLU, then parallel
  expand ``1 x 1 S -> out//2`` and ``k x k S -> out - out//2``, concatenated.
  As with ``low_rank``, convs that would not get cheaper are skipped.
* ``ghost``: with ``s = round(1/r)``, a primary conv makes ``m = ceil(out/s)``
  intrinsic maps and a depthwise ``d x d`` op makes ``m*(s-1)`` ghost maps;
  the concat is sliced back to ``out`` channels.
* ``composite``: width ``r`` as in ``channel_prune`` over the targets plus
  depth ``d``: ``round((1-d) * n)`` of the ``n`` skippable target blocks are
  skipped, evenly spaced.
* ``depth_skip``: listed skippable blocks are removed and their output is
  rewired to their input.

Adding an Add of mismatched widths zero-pads the narrower operand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from hmtplan.errors import StructuralError, VariantError
from hmtplan.ir.graph import (
    CONV_KINDS,
    ELEMENTWISE,
    Block,
    ComputationGraph,
    Mode,
    OperatorNode,
    OpKind,
    TensorSpec,
)

PARAM_BYTES = 4


class Family(str, Enum):
    LOW_RANK = "low_rank"
    FIRE = "fire"
    COMPOSITE = "composite"
    GHOST = "ghost"
    DEPTH_SKIP = "depth_skip"
    CHANNEL_PRUNE = "channel_prune"


FAMILY_ORDER = tuple(Family)


@dataclass(frozen=True)
class CompressionOp:
    family: Family
    ratio: float = 1.0
    blocks: tuple[str, ...] = ()
    depth: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not 0.0 < self.ratio <= 1.0:
            raise VariantError(f"{self.family.value}: ratio must be in (0, 1], got {self.ratio}")
        if not 0.0 < self.depth <= 1.0:
            raise VariantError(f"{self.family.value}: depth must be in (0, 1], got {self.depth}")
        if self.family is Family.DEPTH_SKIP and len(set(self.blocks)) != len(self.blocks):
            raise VariantError("depth_skip lists a block twice")

    def is_identity(self) -> bool:
        if self.family is Family.DEPTH_SKIP:
            return not self.blocks
        if self.family in (Family.CHANNEL_PRUNE, Family.GHOST):
            return self.ratio == 1.0
        if self.family is Family.COMPOSITE:
            return self.ratio == 1.0 and self.depth == 1.0
        return False

    def to_dict(self) -> dict:
        d: dict = {"family": self.family.value, "ratio": self.ratio}
        if self.blocks:
            d["blocks"] = list(self.blocks)
        if self.family is Family.COMPOSITE:
            d["depth"] = self.depth
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CompressionOp":
        return cls(Family(d["family"]), float(d.get("ratio", 1.0)), tuple(d.get("blocks", ())),
                   float(d.get("depth", 1.0)))

    def label(self) -> str:
        if self.family is Family.DEPTH_SKIP:
            return f"{self.family.value}[{','.join(self.blocks)}]"
        extra = f",d={self.depth:g}" if self.family is Family.COMPOSITE else ""
        scope = f"@{','.join(self.blocks)}" if self.blocks else ""
        return f"{self.family.value}({self.ratio:g}{extra}){scope}"


@dataclass(frozen=True)
class VariantConfig:
    ops: tuple[CompressionOp, ...] = ()
    exit_index: int | None = None  # None selects the final exit

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def families(self) -> frozenset[Family]:
        return frozenset(op.family for op in self.ops)

    def to_dict(self) -> dict:
        return {"ops": [op.to_dict() for op in self.ops], "exit_index": self.exit_index}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariantConfig":
        return cls(tuple(CompressionOp.from_dict(o) for o in d.get("ops", ())), d.get("exit_index"))

    def label(self) -> str:
        ops = "+".join(op.label() for op in self.ops) or "base"
        return ops if self.exit_index is None else f"{ops}|exit{self.exit_index}"


# -- validation ----------------------------------------------------------------


def _targets(graph: ComputationGraph, op: CompressionOp) -> set[str]:
    missing = [b for b in op.blocks if b not in graph.blocks]
    if missing:
        raise VariantError(f"{op.family.value}: unknown block(s) {', '.join(missing)}")
    if op.blocks:
        return {n for b in op.blocks for n in graph.blocks[b].nodes}
    return set(graph.nodes)


def validate_variant(graph: ComputationGraph, config: VariantConfig) -> None:
    seen: dict[Family, set[str] | None] = {}
    for op in config.ops:
        _targets(graph, op)
        if op.family is Family.DEPTH_SKIP:
            for b in op.blocks:
                if not graph.blocks[b].skippable:
                    raise VariantError(f"depth_skip: block {b!r} is not skippable")
        scope = set(op.blocks) if op.blocks else None
        prev = seen.get(op.family, set())
        if op.family in seen and (scope is None or prev is None or scope & prev):
            raise VariantError(f"{op.family.value} applied twice to the same block")
        seen[op.family] = None if scope is None or prev is None else prev | scope
    if config.exit_index is not None:
        n = len(graph.exits)
        if not 0 <= config.exit_index < max(n, 1):
            raise VariantError(f"exit index {config.exit_index} out of range ({n} exits)")


# -- shape propagation ---------------------------------------------------------


def _round_ch(c: float) -> int:
    return max(1, int(math.floor(c + 0.5)))


def _conv_out(shape: tuple[int, ...], attrs: Mapping) -> tuple[int, int]:
    _, _, h, w = shape
    k, s = attrs["kernel"], attrs["stride"]
    pad = k // 2
    return (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1


def propagate(graph: ComputationGraph) -> ComputationGraph:
    """Re-derive shapes, MACs and parameter bytes from node attributes in topological order."""
    if graph.mode is not Mode.INFERENCE:
        raise VariantError("variants apply to inference graphs only")
    tensors = dict(graph.tensors)
    nodes = dict(graph.nodes)
    for nid in graph.order:
        n = nodes[nid]
        ins = [tensors[t].shape for t in n.inputs]
        attrs = dict(n.attrs)
        macs, params = n.macs, n.param_bytes
        kind = n.kind
        if kind in CONV_KINDS:
            b, c = ins[0][0], ins[0][1]
            oh, ow = _conv_out(ins[0], attrs)
            k = attrs["kernel"]
            if kind is OpKind.DEPTHWISE_CONV:
                mult = attrs.get("multiplier", 1)
                attrs.update(in_c=c, out_c=c * mult, groups=c)
                in_per_group = 1
            else:
                attrs["in_c"] = min(attrs["in_c"], c)
                in_per_group = attrs["in_c"] // attrs.get("groups", 1)
            oc = attrs["out_c"]
            out_shape: tuple[int, ...] = (b, oc, oh, ow)
            macs = b * oh * ow * oc * in_per_group * k * k
            params = (oc * in_per_group * k * k + (oc if attrs.get("bias") else 0)) * PARAM_BYTES
        elif kind is OpKind.BATCH_NORM:
            out_shape = ins[0]
            ch = out_shape[1] if attrs.get("norm", "batch") == "batch" else out_shape[-1]
            attrs["channels"] = ch
            macs, params = math.prod(out_shape), 2 * ch * PARAM_BYTES
        elif kind in ELEMENTWISE or kind in (OpKind.IDENTITY, OpKind.EXIT_BRANCH):
            out_shape, macs = ins[0], 0
        elif kind is OpKind.ADD:
            out_shape = tuple(max(dims) for dims in zip(*ins))
            macs = 0
        elif kind is OpKind.CONCAT:
            ch = sum(s[1] for s in ins)
            ch = min(ch, attrs.get("out_channels", ch))
            out_shape = (ins[0][0], ch, *ins[0][2:])
            macs = 0
        elif kind is OpKind.POOL:
            if attrs.get("global_"):
                b, c, h, w = ins[0]
                out_shape, macs = (b, c), b * c * h * w
                attrs["kernel"] = h
            else:
                b, c, h, w = ins[0]
                k, s, pad = attrs["kernel"], attrs["stride"], attrs.get("pad", 0)
                oh, ow = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
                out_shape, macs = (b, c, oh, ow), b * oh * ow * c * k * k
        elif kind is OpKind.REDUCE:
            if attrs.get("reduce") == "mean":
                b, l, d = ins[0]
                out_shape, macs = (b, d), b * l * d
            else:
                out_shape, macs = ins[0], math.prod(ins[0])
        elif kind is OpKind.FULLY_CONNECTED:
            if attrs.get("op") == "matmul":
                a, bb = ins
                if len(a) == 3:  # scores: (b, l, d) x (b, l, d) -> (b, h, l, l)
                    out_shape = tuple(tensors[n.outputs[0]].shape)
                    out_shape = (a[0], out_shape[1], a[1], a[1])
                    macs = a[0] * a[1] * a[1] * a[2]
                else:  # context: (b, h, l, l) x (b, l, d) -> (b, l, d)
                    out_shape = bb
                    macs = bb[0] * bb[1] * bb[1] * bb[2]
                params = 0
            else:
                s = ins[0]
                b = s[0]
                rows, fin = (s[1], s[2]) if len(s) == 3 else (1, math.prod(s[1:]))
                fout = attrs["out_features"]
                attrs["in_features"] = fin
                out_shape = (b, rows, fout) if len(s) == 3 else (b, fout)
                macs = b * rows * fin * fout
                params = (fin * fout + fout) * PARAM_BYTES
        elif kind is OpKind.CONSTANT:
            continue
        else:
            raise VariantError(f"cannot re-derive shapes through {kind.value} node {nid!r}")
        for t in n.outputs:
            old = tensors[t]
            tensors[t] = TensorSpec(t, out_shape, old.elem_bits)
        nodes[nid] = OperatorNode(nid, kind, n.inputs, n.outputs, macs, params, attrs, n.block)
    return graph.evolve(nodes=nodes, tensors=tensors)


def rebuild_blocks(graph: ComputationGraph, nodes: Mapping[str, OperatorNode],
                   tensors: Mapping[str, TensorSpec]) -> dict[str, Block]:
    members: dict[str, list[str]] = {}
    for nid, n in nodes.items():
        if n.block is not None:
            members.setdefault(n.block, []).append(nid)
    out = {}
    for bid, b in graph.blocks.items():
        if bid not in members:
            continue
        ids = tuple(sorted(members[bid]))
        inp = b.input if b.input in tensors else None
        outp = b.output if b.output in tensors else None
        ok = b.skippable and inp is not None and outp is not None and tensors[inp].shape == tensors[outp].shape
        out[bid] = Block(bid, ids, inp, outp, ok)
    return out


def _with(graph: ComputationGraph, nodes: dict, tensors: dict) -> ComputationGraph:
    used = {t for n in nodes.values() for t in n.inputs + n.outputs}
    tensors = {tid: t for tid, t in tensors.items() if tid in used}
    return graph.evolve(nodes=nodes, tensors=tensors, blocks=rebuild_blocks(graph, nodes, tensors))


# -- families ------------------------------------------------------------------


def _eligible(graph: ComputationGraph, op: CompressionOp, kinds: Iterable[OpKind], min_kernel: int = 1) -> list[str]:
    targets = _targets(graph, op)
    kinds = set(kinds)
    return [
        nid for nid in graph.order
        if nid in targets
        and graph.nodes[nid].kind in kinds
        and graph.nodes[nid].attrs.get("groups", 1) == 1
        and graph.nodes[nid].attrs.get("kernel", 1) >= min_kernel
    ]


def _channel_prune(graph: ComputationGraph, op: CompressionOp) -> ComputationGraph:
    nodes = dict(graph.nodes)
    for nid in _eligible(graph, op, (OpKind.CONV, OpKind.POINTWISE_CONV)):
        n = nodes[nid]
        attrs = dict(n.attrs)
        attrs["in_c"] = _round_ch(attrs["in_c"] * op.ratio)
        attrs["out_c"] = _round_ch(attrs["out_c"] * op.ratio)
        nodes[nid] = OperatorNode(nid, n.kind, n.inputs, n.outputs, n.macs, n.param_bytes, attrs, n.block)
    return propagate(graph.evolve(nodes=nodes))


def _split_node(nodes: dict, tensors: dict, n: OperatorNode, parts: list[tuple]) -> None:
    """Replace ``n`` by ``parts``: (suffix, kind, input refs, attrs); last part writes n's output.

    Input refs are tensor ids or ``"@<suffix>"`` for an earlier part's output.
    """
    del nodes[n.id]
    produced: dict[str, str] = {}
    for i, (suffix, kind, inputs, attrs) in enumerate(parts):
        nid = f"{n.id}/{suffix}"
        ins = tuple(produced[x[1:]] if x.startswith("@") else x for x in inputs)
        if i == len(parts) - 1:
            out = n.outputs[0]
        else:
            out = f"{nid}:0"
            tensors[out] = TensorSpec(out, (1,), tensors[n.outputs[0]].elem_bits)  # re-derived later
        produced[suffix] = out
        nodes[nid] = OperatorNode(nid, kind, ins, (out,), 0, 0, attrs, n.block)


def _conv_attrs(in_c: int, out_c: int, k: int, stride: int, bias: bool = False, **extra) -> dict:
    return dict(in_c=in_c, out_c=out_c, kernel=k, stride=stride, groups=1, bias=bias, **extra)


def _low_rank(graph: ComputationGraph, op: CompressionOp) -> ComputationGraph:
    nodes, tensors = dict(graph.nodes), dict(graph.tensors)
    for nid in _eligible(graph, op, (OpKind.CONV,), min_kernel=2):
        n = graph.nodes[nid]
        a = n.attrs
        rank = _round_ch(op.ratio * a["out_c"])
        k2 = a["kernel"] ** 2
        if rank * (a["in_c"] * k2 + a["out_c"]) >= a["in_c"] * a["out_c"] * k2:
            continue  # factorization would not save work (e.g. a 3-channel stem)
        _split_node(nodes, tensors, n, [
            ("lr_a", OpKind.CONV, list(n.inputs), _conv_attrs(a["in_c"], rank, a["kernel"], a["stride"])),
            ("lr_b", OpKind.POINTWISE_CONV, ["@lr_a"], _conv_attrs(rank, a["out_c"], 1, 1, a.get("bias", False))),
        ])
    return propagate(_with(graph, nodes, tensors))


def _fire(graph: ComputationGraph, op: CompressionOp) -> ComputationGraph:
    nodes, tensors = dict(graph.nodes), dict(graph.tensors)
    for nid in _eligible(graph, op, (OpKind.CONV,), min_kernel=2):
        n = graph.nodes[nid]
        a = n.attrs
        sq = _round_ch(op.ratio * a["in_c"])
        e1 = a["out_c"] // 2
        e3 = a["out_c"] - e1
        k2 = a["kernel"] ** 2
        if a["in_c"] * sq + sq * e1 + sq * e3 * k2 >= a["in_c"] * a["out_c"] * k2:
            continue
        parts = [
            ("squeeze", OpKind.POINTWISE_CONV, list(n.inputs), _conv_attrs(a["in_c"], sq, 1, a["stride"])),
            ("squeeze_relu", OpKind.RELU, ["@squeeze"], {"fn": "relu"}),
            ("expand1", OpKind.POINTWISE_CONV, ["@squeeze_relu"], _conv_attrs(sq, max(e1, 1), 1, 1)),
            ("expand3", OpKind.CONV, ["@squeeze_relu"], _conv_attrs(sq, e3, a["kernel"], 1)),
            ("concat", OpKind.CONCAT, ["@expand1", "@expand3"], {"out_channels": a["out_c"]}),
        ]
        if e1 == 0:
            parts = [parts[0], parts[1], ("expand3", OpKind.CONV, ["@squeeze_relu"], _conv_attrs(sq, e3, a["kernel"], 1))]
        _split_node(nodes, tensors, n, parts)
    return propagate(_with(graph, nodes, tensors))


def _ghost(graph: ComputationGraph, op: CompressionOp, dw_kernel: int = 3) -> ComputationGraph:
    s = max(1, int(math.floor(1.0 / op.ratio + 0.5)))
    if s == 1:
        return graph
    nodes, tensors = dict(graph.nodes), dict(graph.tensors)
    for nid in _eligible(graph, op, (OpKind.CONV, OpKind.POINTWISE_CONV)):
        n = graph.nodes[nid]
        a = n.attrs
        m = math.ceil(a["out_c"] / s)
        _split_node(nodes, tensors, n, [
            ("primary", n.kind, list(n.inputs), _conv_attrs(a["in_c"], m, a["kernel"], a["stride"], a.get("bias", False))),
            ("cheap", OpKind.DEPTHWISE_CONV, ["@primary"],
             dict(in_c=m, out_c=m * (s - 1), kernel=dw_kernel, stride=1, groups=m, multiplier=s - 1, bias=False)),
            ("concat", OpKind.CONCAT, ["@primary", "@cheap"], {"out_channels": a["out_c"]}),
        ])
    return propagate(_with(graph, nodes, tensors))


def _depth_skip(graph: ComputationGraph, blocks: Iterable[str]) -> ComputationGraph:
    nodes, tensors = dict(graph.nodes), dict(graph.tensors)
    exits = list(graph.exits)
    for bid in blocks:
        if bid not in graph.blocks:
            raise VariantError(f"depth_skip: unknown block {bid!r}")
        b = graph.blocks[bid]
        if not b.skippable:
            raise VariantError(f"depth_skip: block {bid!r} is not skippable")
        for nid in b.nodes:
            nodes.pop(nid, None)
        for nid, n in list(nodes.items()):
            if b.output in n.inputs:
                ins = tuple(b.input if t == b.output else t for t in n.inputs)
                nodes[nid] = OperatorNode(nid, n.kind, ins, n.outputs, n.macs, n.param_bytes, n.attrs, n.block)
        exits = [e for e in exits if e in nodes]
    out = _with(graph, nodes, tensors)
    return propagate(out.evolve(exits=tuple(exits)))


def _composite(graph: ComputationGraph, op: CompressionOp) -> ComputationGraph:
    targets = _targets(graph, op)
    skippable = [b.id for b in graph.blocks.values() if b.skippable and set(b.nodes) <= targets]
    skippable.sort(key=lambda bid: min(graph.blocks[bid].nodes))
    count = int(math.floor((1.0 - op.depth) * len(skippable) + 0.5))
    if count:
        step = len(skippable) / count
        picks = sorted({skippable[min(len(skippable) - 1, int((i + 0.5) * step))] for i in range(count)})
        graph = _depth_skip(graph, picks)
    if op.ratio < 1.0:
        width_op = CompressionOp(Family.CHANNEL_PRUNE, op.ratio, tuple(b for b in op.blocks if b in graph.blocks))
        if op.blocks and not width_op.blocks:
            return graph
        graph = _channel_prune(graph, width_op)
    return graph


def apply_op(graph: ComputationGraph, op: CompressionOp) -> ComputationGraph:
    _targets(graph, op)
    if op.is_identity():
        return graph
    if op.family is Family.CHANNEL_PRUNE:
        return _channel_prune(graph, op)
    if op.family is Family.LOW_RANK:
        return _low_rank(graph, op)
    if op.family is Family.FIRE:
        return _fire(graph, op)
    if op.family is Family.GHOST:
        return _ghost(graph, op)
    if op.family is Family.DEPTH_SKIP:
        return _depth_skip(graph, op.blocks)
    return _composite(graph, op)


def apply_variant(graph: ComputationGraph, config: VariantConfig) -> ComputationGraph:
    """Apply ``config.ops`` in order, then restrict the graph to the chosen exit.

    Purely structural: no data pass or retraining step is involved.
    """
    try:
        validate_variant(graph, config)
    except StructuralError as exc:  # pragma: no cover - defensive
        raise VariantError(str(exc)) from None
    out = graph
    for op in config.ops:
        out = apply_op(out, op)
    if config.exit_index is not None and out.exits:
        out = out.exit_subgraph(min(config.exit_index, len(out.exits) - 1))
    return out
