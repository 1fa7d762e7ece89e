"""Greedy operator fusion over producer-consumer chains.

The scan walks the topological order. From each unfused node it keeps
extending a chain while the tail's only output has exactly one consumer, is
not a graph output, stays inside the same block, and some enabled rule
accepts the (tail, consumer) pair. Rules are tried in a fixed order; the
first match is recorded for that step.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from hmtplan.ir.graph import CONV_KINDS, ELEMENTWISE, ComputationGraph, Mode, OperatorNode, OpKind
from hmtplan.variants.ops import rebuild_blocks


class FusionRule(str, Enum):
    CONV_BATCHNORM = "ConvBatchNorm"
    ELEMENTWISE = "Elementwise"
    LINEAR = "Linear"
    CHANNELWISE = "Channelwise"
    REDUCTION = "Reduction"


RULE_ORDER = (
    FusionRule.CONV_BATCHNORM,
    FusionRule.ELEMENTWISE,
    FusionRule.LINEAR,
    FusionRule.CHANNELWISE,
    FusionRule.REDUCTION,
)

_COMPUTE = CONV_KINDS | ELEMENTWISE | {
    OpKind.BATCH_NORM, OpKind.FULLY_CONNECTED, OpKind.ADD, OpKind.POOL, OpKind.REDUCE,
}


def _matches(rule: FusionRule, prev: OpKind, nxt: OpKind) -> bool:
    if rule is FusionRule.CONV_BATCHNORM:
        return prev in CONV_KINDS and nxt is OpKind.BATCH_NORM
    if rule is FusionRule.ELEMENTWISE:
        return prev in _COMPUTE and nxt in ELEMENTWISE
    if rule is FusionRule.LINEAR:
        return prev is OpKind.FULLY_CONNECTED and nxt in (OpKind.FULLY_CONNECTED, OpKind.ADD, OpKind.BATCH_NORM)
    if rule is FusionRule.CHANNELWISE:
        return (prev in ELEMENTWISE or prev in (OpKind.DEPTHWISE_CONV, OpKind.BATCH_NORM)) and nxt is OpKind.POINTWISE_CONV
    return prev in _COMPUTE and nxt in (OpKind.POOL, OpKind.REDUCE)


@dataclass(frozen=True)
class FusionGroup:
    node_ids: tuple[str, ...]
    rule: FusionRule
    rules: tuple[FusionRule, ...]
    removed_tensors: tuple[str, ...]

    @property
    def fused_id(self) -> str:
        return self.node_ids[0]

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.node_ids),
            "rule": self.rule.value,
            "rules": [r.value for r in self.rules],
            "removed_tensors": list(self.removed_tensors),
        }


def parse_rules(spec: str | Iterable[str | FusionRule] | None) -> tuple[FusionRule, ...]:
    """``"all"``/``None`` -> every rule, ``"none"``/``""`` -> none, else a comma list of rule names."""
    if spec is None:
        return RULE_ORDER
    if isinstance(spec, str):
        s = spec.strip()
        if s.lower() == "all":
            return RULE_ORDER
        if s.lower() in ("", "none"):
            return ()
        spec = [x.strip() for x in s.split(",")]
    wanted = set()
    lookup = {r.value.lower(): r for r in FusionRule} | {r.name.lower(): r for r in FusionRule}
    for item in spec:
        key = item.value.lower() if isinstance(item, FusionRule) else str(item).lower()
        if key not in lookup:
            raise ValueError(f"unknown fusion rule {item!r}")
        wanted.add(lookup[key])
    return tuple(r for r in RULE_ORDER if r in wanted)


def _member(n: OperatorNode) -> list[dict]:
    if n.kind is OpKind.FUSED:
        return [dict(m) for m in n.attrs["members"]]
    return [{"id": n.id, "kind": n.kind.value, "macs": n.macs, "param_bytes": n.param_bytes}]


def find_groups(graph: ComputationGraph, rules: Sequence[FusionRule] = RULE_ORDER) -> list[FusionGroup]:
    rules = [r for r in RULE_ORDER if r in set(rules)]
    if not rules:
        return []
    protected = set(graph.output_tensors)
    taken: set[str] = set()
    groups = []
    for nid in graph.order:
        if nid in taken:
            continue
        chain, steps, removed = [nid], [], []
        tail = graph.nodes[nid]
        while len(tail.outputs) == 1:
            t = tail.outputs[0]
            cons = graph.consumers_of[t]
            if len(cons) != 1 or t in protected:
                break
            nxt = graph.nodes[cons[0]]
            if nxt.id in taken or nxt.block != tail.block or nxt.kind is OpKind.FUSED:
                break
            rule = next((r for r in rules if _matches(r, tail.kind, nxt.kind)), None)
            if rule is None:
                break
            chain.append(nxt.id)
            steps.append(rule)
            removed.append(t)
            tail = nxt
        if len(chain) > 1:
            taken.update(chain)
            groups.append(FusionGroup(tuple(chain), steps[0], tuple(steps), tuple(removed)))
    return groups


def fuse(graph: ComputationGraph, rules: Sequence[FusionRule] | str | None = None
         ) -> tuple[ComputationGraph, list[FusionGroup]]:
    """Collapse legal chains into ``Fused`` nodes (id of the first member).

    The fused node carries the summed MACs and parameters and lists its
    members, so cost models can still charge each member's compute while the
    internal tensors disappear from the memory terms.
    """
    rules = parse_rules(rules) if rules is None or isinstance(rules, str) else tuple(rules)
    groups = find_groups(graph, rules)
    if not groups:
        return graph, []
    nodes = dict(graph.nodes)
    tensors = dict(graph.tensors)
    for g in groups:
        members = [graph.nodes[i] for i in g.node_ids]
        internal = set(g.removed_tensors)
        inputs = tuple(dict.fromkeys(t for m in members for t in m.inputs if t not in internal))
        for m in members:
            del nodes[m.id]
        for t in internal:
            del tensors[t]
        first = members[0]
        attrs = {
            "members": [x for m in members for x in _member(m)],
            "rule": g.rule.value,
            "rules": [r.value for r in g.rules],
        }
        nodes[first.id] = OperatorNode(
            first.id, OpKind.FUSED, inputs, members[-1].outputs,
            sum(m.macs for m in members), sum(m.param_bytes for m in members), attrs, first.block,
        )
    blocks = rebuild_blocks(graph, nodes, tensors)
    return graph.evolve(nodes=nodes, tensors=tensors, blocks=blocks), groups


def fuse_training(graph: ComputationGraph, rules: Sequence[FusionRule] | str | None = None
                  ) -> tuple[ComputationGraph, list[FusionGroup]]:
    """Backprop fusion: fuse the forward part, then rebuild the backward chain over the fused layers."""
    from hmtplan.ir.training import forward_part, make_training_graph

    if graph.mode is not Mode.TRAINING:
        return fuse(graph, rules)
    fwd, groups = fuse(forward_part(graph), rules)
    return make_training_graph(fwd), groups
