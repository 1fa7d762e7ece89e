"""Redundancy elimination for converted graphs.

Three rewrites run in a fixed order until nothing changes:

1. constant folding: a node whose inputs all come from Constant nodes becomes
   a Constant holding its output (constants left without consumers by this
   are dropped);
2. duplicate merging: parameter-free nodes with the same kind, attributes and
   inputs (or Constants with equal attributes) collapse onto the smallest id,
   unless either one produces a graph output;
3. Identity removal: consumers are rewired to the Identity's input.

Folding runs before fusion in the planning pipeline. Nodes whose outputs are
graph outputs, and exit heads, are never removed, so the external interface
is unchanged.
"""
from __future__ import annotations

import json

from hmtplan.ir.graph import ComputationGraph, OperatorNode, OpKind
from hmtplan.variants.ops import rebuild_blocks


def _rewire(nodes: dict[str, OperatorNode], mapping: dict[str, str]) -> None:
    for nid, n in list(nodes.items()):
        if any(t in mapping for t in n.inputs):
            ins = tuple(mapping.get(t, t) for t in n.inputs)
            nodes[nid] = OperatorNode(nid, n.kind, ins, n.outputs, n.macs, n.param_bytes, n.attrs, n.block)


def _finish(graph: ComputationGraph, nodes: dict[str, OperatorNode]) -> ComputationGraph:
    used = {t for n in nodes.values() for t in n.inputs + n.outputs}
    tensors = {tid: t for tid, t in graph.tensors.items() if tid in used}
    exits = tuple(e for e in graph.exits if e in nodes)
    return graph.evolve(nodes=nodes, tensors=tensors, exits=exits, blocks=rebuild_blocks(graph, nodes, tensors))


def fold_constants(graph: ComputationGraph) -> ComputationGraph:
    nodes = dict(graph.nodes)
    producer = graph.producer_of
    orphan_candidates: set[str] = set()
    changed = False
    for nid in graph.order:
        n = nodes[nid]
        if n.kind in (OpKind.CONSTANT, OpKind.EXIT_BRANCH) or not n.inputs:
            continue
        srcs = [producer.get(t) for t in n.inputs]
        if all(s is not None and nodes[s].kind is OpKind.CONSTANT for s in srcs):
            attrs = {"folded": n.kind.value, "from": sorted(set(srcs))}
            nodes[nid] = OperatorNode(nid, OpKind.CONSTANT, (), n.outputs, 0,
                                      graph.tensor_bytes(n.outputs), attrs, n.block)
            orphan_candidates.update(srcs)
            changed = True
    if not changed:
        return graph
    consumed = {t for n in nodes.values() for t in n.inputs}
    outputs = set(graph.output_tensors)
    for c in sorted(orphan_candidates):
        if not any(t in consumed or t in outputs for t in nodes[c].outputs):
            del nodes[c]
    return _finish(graph, nodes)


def _signature(n: OperatorNode) -> str | None:
    if n.kind in (OpKind.EXIT_BRANCH, OpKind.FUSED, OpKind.GRADIENT, OpKind.WEIGHT_UPDATE):
        return None
    if n.kind is OpKind.CONSTANT:
        if not n.attrs:
            return None  # a constant without a recorded value cannot be compared
    elif n.param_bytes:
        return None
    return json.dumps([n.kind.value, list(n.inputs), n.param_bytes, len(n.outputs), n.attrs], sort_keys=True, default=str)


def merge_duplicates(graph: ComputationGraph) -> ComputationGraph:
    outputs = set(graph.output_tensors)
    keep: dict[str, str] = {}
    mapping: dict[str, str] = {}
    drop: set[str] = set()
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        sig = _signature(n)
        if sig is None:
            continue
        if sig in keep:
            first = graph.nodes[keep[sig]]
            # rewiring onto a graph output would make it internal and change the interface
            if any(t in outputs for t in n.outputs + first.outputs):
                continue
            mapping.update(zip(n.outputs, first.outputs))
            drop.add(nid)
        else:
            keep[sig] = nid
    if not drop:
        return graph
    nodes = {k: v for k, v in graph.nodes.items() if k not in drop}
    _rewire(nodes, mapping)
    return _finish(graph, nodes)


def remove_identities(graph: ComputationGraph) -> ComputationGraph:
    outputs = set(graph.output_tensors)
    nodes = dict(graph.nodes)
    mapping: dict[str, str] = {}
    for nid in graph.order:
        n = nodes[nid]
        if n.kind is not OpKind.IDENTITY or len(n.inputs) != 1 or len(n.outputs) != 1:
            continue
        if n.outputs[0] in outputs:
            continue
        src = mapping.get(n.inputs[0], n.inputs[0])
        mapping[n.outputs[0]] = src
        del nodes[nid]
    if not mapping:
        return graph
    _rewire(nodes, mapping)
    return _finish(graph, nodes)


def eliminate_redundancy(graph: ComputationGraph, max_rounds: int = 64) -> ComputationGraph:
    """Run the three rewrites to a fixed point; an already clean graph is returned as is."""
    g = graph
    for _ in range(max_rounds):
        nxt = remove_identities(merge_duplicates(fold_constants(g)))
        if nxt is g:
            return g
        g = nxt
    return g
