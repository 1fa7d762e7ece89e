"""Pre-partitioning into units and operation flows.

Units are contiguous runs of the topological order (one node each, or one
zoo block each), so the unit-level quotient graph is acyclic by
construction. Flows are a greedy vertex-disjoint path cover of the quotient
graph: walk units in order and extend each new flow through its first
uncovered successor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from hmtplan.ir.graph import ComputationGraph


class Granularity(str, Enum):
    PER_OPERATOR = "PerOperator"
    PER_BLOCK = "PerBlock"


@dataclass(frozen=True)
class PartitionUnit:
    id: str
    node_ids: tuple[str, ...]
    boundary_in: tuple[str, ...]
    boundary_out: tuple[str, ...]
    label: str = ""


@dataclass(frozen=True)
class OperationFlow:
    id: str
    unit_ids: tuple[str, ...]
    tensor_map: Mapping[str, tuple[tuple[str, ...], tuple[str, ...]]] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Partition:
    graph: ComputationGraph
    units: tuple[PartitionUnit, ...]
    flows: tuple[OperationFlow, ...]
    edges: Mapping[tuple[str, str], tuple[str, ...]]  # (u, v) -> tensors produced in u and read in v

    @cached_property
    def unit_of(self) -> dict[str, str]:
        return {n: u.id for u in self.units for n in u.node_ids}

    @cached_property
    def index(self) -> dict[str, int]:
        return {u.id: i for i, u in enumerate(self.units)}

    @cached_property
    def by_id(self) -> dict[str, PartitionUnit]:
        return {u.id: u for u in self.units}

    @cached_property
    def tensor_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.graph.tensors))

    @cached_property
    def incidence(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Sparse (units x tensors) matrices: entry 1 where a unit reads / writes a tensor."""
        col = {t: j for j, t in enumerate(self.tensor_ids)}
        reads: list[tuple[int, int]] = []
        writes: list[tuple[int, int]] = []
        for i, u in enumerate(self.units):
            for nid in u.node_ids:
                n = self.graph.nodes[nid]
                reads.extend((i, col[t]) for t in dict.fromkeys(n.inputs))
                writes.extend((i, col[t]) for t in n.outputs)
        shape = (len(self.units), len(self.tensor_ids))

        def build(pairs: list[tuple[int, int]]) -> sp.csr_matrix:
            pairs = sorted(set(pairs))
            rows = np.array([p[0] for p in pairs], dtype=np.int64)
            cols = np.array([p[1] for p in pairs], dtype=np.int64)
            m = sp.csr_matrix((np.ones(len(pairs), dtype=np.int8), (rows, cols)), shape=shape)
            return m

        return build(reads), build(writes)

    def quotient_adjacency(self) -> sp.csr_matrix:
        """Unit-to-unit adjacency derived from the incidence matrices (writes x reads^T)."""
        reads, writes = self.incidence
        adj = (writes.astype(np.int32) @ reads.astype(np.int32).T).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        return adj

    def successors(self, unit_id: str) -> list[str]:
        return sorted({v for (u, v) in self.edges if u == unit_id}, key=self.index.__getitem__)

    def predecessors(self, unit_id: str) -> list[str]:
        return sorted({u for (u, v) in self.edges if v == unit_id}, key=self.index.__getitem__)

    def is_chain(self) -> bool:
        """Quotient graph is a single path u0 -> u1 -> ... with no other edges."""
        ids = [u.id for u in self.units]
        return set(self.edges) == {(a, b) for a, b in zip(ids, ids[1:])}

    def is_connected(self) -> bool:
        if len(self.units) <= 1:
            return True
        adj: dict[str, set[str]] = {u.id: set() for u in self.units}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        seen, stack = set(), [self.units[0].id]
        while stack:
            x = stack.pop()
            if x not in seen:
                seen.add(x)
                stack.extend(adj[x] - seen)
        return len(seen) == len(self.units)

    def reassemble(self) -> tuple[set[str], set[tuple[str, str, str]]]:
        """Union of the units' nodes and the edges among them (must equal the graph's)."""
        nodes = {n for u in self.units for n in u.node_ids}
        sub = self.graph.subgraph(nodes)
        return set(sub.nodes), sub.edges()

    def to_dict(self) -> dict:
        return {
            "units": [
                {"id": u.id, "label": u.label, "nodes": list(u.node_ids),
                 "boundary_in": list(u.boundary_in), "boundary_out": list(u.boundary_out)}
                for u in self.units
            ],
            "flows": [{"id": f.id, "units": list(f.unit_ids)} for f in self.flows],
        }


def pre_partition(graph: ComputationGraph, granularity: Granularity | str = Granularity.PER_OPERATOR) -> Partition:
    granularity = Granularity(granularity)
    runs: list[tuple[str, list[str]]] = []
    for nid in graph.order:
        key = nid if granularity is Granularity.PER_OPERATOR else (graph.nodes[nid].block or nid)
        if granularity is Granularity.PER_BLOCK and runs and runs[-1][0] == key:
            runs[-1][1].append(nid)
        else:
            runs.append((key, [nid]))
    outputs = set(graph.output_tensors)
    unit_of: dict[str, str] = {}
    units: list[PartitionUnit] = []
    for i, (label, members) in enumerate(runs):
        uid = f"u{i:03d}"
        inside = set(members)
        produced = {t for n in members for t in graph.nodes[n].outputs}
        b_in = tuple(dict.fromkeys(
            t for n in members for t in graph.nodes[n].inputs if t not in produced
        ))
        b_out = tuple(
            t for t in sorted(produced)
            if t in outputs or any(c not in inside for c in graph.consumers_of[t]) or not graph.consumers_of[t]
        )
        units.append(PartitionUnit(uid, tuple(members), b_in, b_out, label))
        for n in members:
            unit_of[n] = uid
    edges: dict[tuple[str, str], list[str]] = {}
    for u in units:
        for t in u.boundary_in:
            p = graph.producer_of.get(t)
            if p is not None and unit_of[p] != u.id:
                edges.setdefault((unit_of[p], u.id), []).append(t)
    edges_t = {k: tuple(sorted(set(v))) for k, v in sorted(edges.items())}
    flows = _path_cover(units, edges_t)
    return Partition(graph, tuple(units), flows, edges_t)


def _path_cover(units: list[PartitionUnit], edges: Mapping[tuple[str, str], tuple[str, ...]]
                ) -> tuple[OperationFlow, ...]:
    succ: dict[str, list[str]] = {u.id: [] for u in units}
    for a, b in edges:
        succ[a].append(b)
    for v in succ.values():
        v.sort()
    by_id = {u.id: u for u in units}
    covered: set[str] = set()
    flows = []
    for u in units:
        if u.id in covered:
            continue
        chain = [u.id]
        covered.add(u.id)
        while True:
            nxt = next((s for s in succ[chain[-1]] if s not in covered), None)
            if nxt is None:
                break
            chain.append(nxt)
            covered.add(nxt)
        tmap = {c: (by_id[c].boundary_in, by_id[c].boundary_out) for c in chain}
        flows.append(OperationFlow(f"f{len(flows):03d}", tuple(chain), tmap))
    return tuple(flows)
