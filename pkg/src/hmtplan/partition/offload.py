"""Device assignment for partition units.

Cost model
----------
Each unit has a compute time per device (the roofline latency of its nodes). A quotient
edge whose endpoints sit on different devices costs ``bytes / bandwidth``
(plus the device's fixed transfer latency). Graph inputs start on the home
device and graph outputs must end there. Devices run one unit at a time;
links carry transfers concurrently (no contention).

The simulator is a list schedule: units are taken in decreasing bottom level
(ties by topological index) and each starts at ``max(data ready, device
free)``. The binding constraint of every start is recorded, so the makespan
decomposes exactly into compute and transfer terms along a critical path.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from hmtplan.cost.model import latency, layer_costs
from hmtplan.cost.profiles import Fleet
from hmtplan.errors import OffloadError
from hmtplan.ir.graph import TensorSpec
from hmtplan.partition.units import Partition

BRUTE_FORCE_LIMIT = 12


class SearchMode(str, Enum):
    EXACT_DP = "ExactDP"
    BEAM = "Beam"
    BRUTE_FORCE = "BruteForce"


def transmission_delay(boundary: Iterable[TensorSpec | int], bandwidth: float, same_device: bool = False) -> float:
    """Feature bytes divided by link bandwidth (bytes/s); zero on the same device."""
    if same_device:
        return 0.0
    if not bandwidth > 0:
        raise OffloadError(f"bandwidth must be > 0, got {bandwidth}")
    total = sum(t.bytes if isinstance(t, TensorSpec) else int(t) for t in boundary)
    return total / bandwidth


@dataclass(frozen=True)
class OffloadProblem:
    """Everything the search needs, with units indexed ``0..n-1`` in topological order."""

    unit_ids: tuple[str, ...]
    devices: tuple[str, ...]
    home: int
    compute: tuple[tuple[float, ...], ...]  # [unit][device] seconds
    edges: tuple[tuple[int, int, int], ...]  # (u, v, bytes)
    source_bytes: tuple[int, ...]  # graph-input bytes read by each unit
    sink_bytes: tuple[int, ...]  # graph-output bytes written by each unit
    bandwidth: tuple[tuple[float, ...], ...]  # [device][device] bytes/s, inf on the diagonal
    hop_latency: tuple[float, ...] = ()  # fixed per-transfer latency of the sending device

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    def xfer(self, nbytes: int, a: int, b: int) -> float:
        if a == b or nbytes == 0:
            return 0.0
        bw = self.bandwidth[a][b]
        if bw <= 0:
            return math.inf
        hop = self.hop_latency[a] if self.hop_latency else 0.0
        return nbytes / bw + hop

    @cached_property
    def pred_lists(self) -> list[list[tuple[int, int]]]:
        return self.preds()

    @cached_property
    def succ_lists(self) -> list[list[tuple[int, int]]]:
        return self.succs()

    def preds(self) -> list[list[tuple[int, int]]]:
        out: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for u, v, b in self.edges:
            out[v].append((u, b))
        return out

    def succs(self) -> list[list[tuple[int, int]]]:
        out: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for u, v, b in self.edges:
            out[u].append((v, b))
        return out

    def switches(self, assign: Sequence[int]) -> int:
        return sum(1 for u, v, _ in self.edges if assign[u] != assign[v])

    def is_chain(self) -> bool:
        """A path u0 -> u1 -> ... whose only graph outputs leave from the last unit."""
        path = {(u, v) for u, v, _ in self.edges} == {(i, i + 1) for i in range(self.n - 1)}
        return path and not any(self.sink_bytes[:-1])

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        adj: list[set[int]] = [set() for _ in range(self.n)]
        for u, v, _ in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        seen, stack = set(), [0]
        while stack:
            x = stack.pop()
            if x not in seen:
                seen.add(x)
                stack.extend(adj[x] - seen)
        return len(seen) == self.n


def build_problem(partition: Partition, fleet: Fleet, background_pressure: float = 0.0,
                  devices: Sequence[str] | None = None) -> OffloadProblem:
    g = partition.graph
    devs = tuple(devices) if devices is not None else fleet.device_ids
    if not devs:
        raise OffloadError("fleet has no devices")
    home = fleet.home if fleet.home in devs else devs[0]
    compute = []
    for u in partition.units:
        row = []
        for d in devs:
            prof = fleet.devices[d]
            row.append(latency(layer_costs(g, prof, background_pressure, u.node_ids), prof))
        compute.append(tuple(row))
    idx = partition.index
    edges = tuple(
        (idx[a], idx[b], g.tensor_bytes(ts)) for (a, b), ts in sorted(partition.edges.items(), key=lambda kv: (idx[kv[0][0]], idx[kv[0][1]]))
    )
    inputs = set(g.input_tensors)
    outputs = set(g.output_tensors)
    source = tuple(g.tensor_bytes(t for t in u.boundary_in if t in inputs) for u in partition.units)
    sink = tuple(g.tensor_bytes(t for t in u.boundary_out if t in outputs) for u in partition.units)
    bw = tuple(tuple(fleet.bandwidth(a, b) for b in devs) for a in devs)
    hop = tuple(fleet.devices[d].transfer_latency for d in devs)
    return OffloadProblem(tuple(u.id for u in partition.units), devs, devs.index(home),
                          tuple(compute), edges, source, sink, bw, hop)


@dataclass(frozen=True)
class SimResult:
    makespan: float
    start: tuple[float, ...]
    finish: tuple[float, ...]
    critical_path: tuple[tuple[str, int, float], ...]  # ("compute"|"transfer", unit, seconds)

    @property
    def path_compute(self) -> float:
        return math.fsum(s for k, _, s in self.critical_path if k == "compute")

    @property
    def path_transfer(self) -> float:
        return math.fsum(s for k, _, s in self.critical_path if k == "transfer")


def simulate(problem: OffloadProblem, assign: Sequence[int], trace: bool = False) -> SimResult:
    n = problem.n
    preds = problem.pred_lists
    succs = problem.succ_lists
    comp = [problem.compute[u][assign[u]] for u in range(n)]
    rank = [0.0] * n
    for u in range(n - 1, -1, -1):
        tail = problem.xfer(problem.sink_bytes[u], assign[u], problem.home)
        for v, b in succs[u]:
            tail = max(tail, problem.xfer(b, assign[u], assign[v]) + rank[v])
        rank[u] = comp[u] + tail
    order = sorted(range(n), key=lambda u: (-rank[u], u))
    free = [0.0] * len(problem.devices)
    last_on = [-1] * len(problem.devices)
    start = [0.0] * n
    finish = [0.0] * n
    why: list[tuple] = [()] * n
    for u in order:
        d = assign[u]
        ready = problem.xfer(problem.source_bytes[u], problem.home, d)
        cause: tuple = ("source", ready)
        for p, b in preds[u]:
            x = problem.xfer(b, assign[p], d)
            arr = finish[p] + x
            if arr > ready:
                ready, cause = arr, ("pred", p, x)
        if free[d] > ready:
            ready, cause = free[d], ("device", last_on[d])
        start[u] = ready
        finish[u] = ready + comp[u]
        free[d] = finish[u]
        last_on[d] = u
        why[u] = cause
    makespan, end_u, ret = 0.0, -1, 0.0
    for u in range(n):
        r = problem.xfer(problem.sink_bytes[u], assign[u], problem.home)
        if finish[u] + r > makespan or end_u < 0:
            makespan, end_u, ret = finish[u] + r, u, r
    path: list[tuple[str, int, float]] = []
    if trace and n:
        if ret:
            path.append(("transfer", end_u, ret))
        u = end_u
        while u >= 0:
            path.append(("compute", u, comp[u]))
            cause = why[u]
            if cause[0] == "pred":
                if cause[2]:
                    path.append(("transfer", u, cause[2]))
                u = cause[1]
            elif cause[0] == "device":
                u = cause[1]
            else:
                if cause[1]:
                    path.append(("transfer", u, cause[1]))
                u = -1
        path.reverse()
    return SimResult(makespan, tuple(start), tuple(finish), tuple(path))


def _key(problem: OffloadProblem, assign: Sequence[int], cost: float) -> tuple:
    return (cost, problem.switches(assign), tuple(problem.devices[d] for d in assign))


@dataclass(frozen=True)
class Assignment:
    mapping: Mapping[str, str]  # unit id -> device id
    cost: float
    switches: int
    mode: str

    def devices_used(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.mapping.values())))

    def to_dict(self) -> dict:
        return {"units": dict(sorted(self.mapping.items())), "cost": self.cost, "switches": self.switches,
                "mode": self.mode}


def _result(problem: OffloadProblem, assign: Sequence[int], mode: str) -> Assignment:
    cost = simulate(problem, assign).makespan
    return Assignment({problem.unit_ids[u]: problem.devices[d] for u, d in enumerate(assign)},
                      cost, problem.switches(assign), mode)


def chain_dp(problem: OffloadProblem, units: Sequence[int] | None = None) -> list[int]:
    """Exact minimum of the chain cost ``sum(compute) + sum(transfers)``.

    States carry (cost, switches, device-id path); extending equal suffixes
    preserves that lexicographic order, so the DP is exact under the full
    tie-break. ``units`` restricts the DP to a sub-chain (a flow); then only
    the edges between consecutive listed units are charged.
    """
    chain = list(range(problem.n)) if units is None else list(units)
    nd = len(problem.devices)
    ebytes = {(u, v): b for u, v, b in problem.edges}
    names = problem.devices
    states: list[tuple[float, int, tuple[str, ...], tuple[int, ...]]] = []
    for d in range(nd):
        u = chain[0]
        c = max(problem.xfer(problem.source_bytes[u], problem.home, d), 0.0) + problem.compute[u][d]
        states.append((c, 0, (names[d],), (d,)))
    for prev, u in zip(chain, chain[1:]):
        b = ebytes.get((prev, u), 0)
        nxt = []
        for d in range(nd):
            best = None
            src = problem.xfer(problem.source_bytes[u], problem.home, d)
            for c, sw, key, path in states:
                pd = path[-1]
                ready = max(src, c + problem.xfer(b, pd, d))  # non-decreasing in c, so the DP stays exact
                cand = (ready + problem.compute[u][d], sw + (pd != d), key + (names[d],), path + (d,))
                if best is None or cand[:3] < best[:3]:
                    best = cand
            nxt.append(best)
        states = nxt
    last = chain[-1]
    final = [(c + problem.xfer(problem.sink_bytes[last], path[-1], problem.home), sw, key, path)
             for c, sw, key, path in states]
    return list(min(final, key=lambda s: s[:3])[3])


def brute_force(problem: OffloadProblem, limit: int = BRUTE_FORCE_LIMIT) -> list[int]:
    if problem.n > limit:
        raise OffloadError(f"BruteForce limited to {limit} units, got {problem.n}")
    best, best_key = None, None
    for assign in itertools.product(range(len(problem.devices)), repeat=problem.n):
        k = _key(problem, assign, simulate(problem, assign).makespan)
        if best_key is None or k < best_key:
            best, best_key = list(assign), k
    return best


def beam_search(problem: OffloadProblem, width: int = 8, flows: Sequence[Sequence[int]] = (),
                local_rounds: int = 4) -> list[int]:
    """Beam over units in topological order, scored by the makespan of the assigned prefix.

    Seeds: all units at home, and every flow solved by the chain DP on its own.
    The best complete assignment is then polished by single-unit moves.
    """
    n, nd = problem.n, len(problem.devices)
    seeds = [[problem.home] * n]
    if flows:
        a = [problem.home] * n
        for f in flows:
            for u, d in zip(f, chain_dp(problem, f)):
                a[u] = d
        seeds.append(a)

    def prefix_cost(partial: Sequence[int]) -> float:
        k = len(partial)
        sub = OffloadProblem(
            problem.unit_ids[:k], problem.devices, problem.home, problem.compute[:k],
            tuple(e for e in problem.edges if e[1] < k),
            problem.source_bytes[:k],
            tuple(problem.sink_bytes[u] + sum(b for x, v, b in problem.edges if x == u and v >= k) for u in range(k)),
            problem.bandwidth, problem.hop_latency,
        )
        return simulate(sub, partial).makespan

    beam: list[tuple[int, ...]] = [()]
    for u in range(n):
        cands: dict[tuple[int, ...], float] = {}
        for p in beam:
            for d in range(nd):
                cands[p + (d,)] = prefix_cost(p + (d,))
        for s in seeds:
            a = tuple(s[: u + 1])
            if a not in cands:
                cands[a] = prefix_cost(a)
        ranked = sorted(cands, key=lambda a: (cands[a], _prefix_switches(problem, a), tuple(problem.devices[d] for d in a)))
        beam = ranked[:width]
    pool = [list(a) for a in beam] + seeds
    best = min(pool, key=lambda a: _key(problem, a, simulate(problem, a).makespan))
    return _local_search(problem, best, local_rounds)


def _prefix_switches(problem: OffloadProblem, a: Sequence[int]) -> int:
    k = len(a)
    return sum(1 for u, v, _ in problem.edges if v < k and a[u] != a[v])


def _local_search(problem: OffloadProblem, assign: list[int], rounds: int) -> list[int]:
    best_key = _key(problem, assign, simulate(problem, assign).makespan)
    for _ in range(rounds):
        improved = False
        for u in range(problem.n):
            for d in range(len(problem.devices)):
                if d == assign[u]:
                    continue
                cand = list(assign)
                cand[u] = d
                k = _key(problem, cand, simulate(problem, cand).makespan)
                if k < best_key:
                    assign, best_key, improved = cand, k, True
        if not improved:
            break
    return assign


def offload_search(
    partition: Partition,
    fleet: Fleet,
    mode: SearchMode | str = SearchMode.BEAM,
    background_pressure: float = 0.0,
    width: int = 8,
    brute_force_limit: int = BRUTE_FORCE_LIMIT,
    problem: OffloadProblem | None = None,
) -> Assignment:
    mode = SearchMode(mode)
    if problem is None:
        problem = build_problem(partition, fleet, background_pressure)
    if not problem.is_connected():
        raise OffloadError("unit flow graph is disconnected")
    if len(problem.devices) == 1:
        return _result(problem, [0] * problem.n, mode.value)
    if mode is SearchMode.EXACT_DP:
        if not problem.is_chain():
            raise OffloadError("ExactDP needs a chain-shaped unit graph; use Beam")
        return _result(problem, chain_dp(problem), mode.value)
    if mode is SearchMode.BRUTE_FORCE:
        return _result(problem, brute_force(problem, brute_force_limit), mode.value)
    idx = partition.index
    flows = [[idx[u] for u in f.unit_ids] for f in partition.flows]
    return _result(problem, beam_search(problem, width, flows), mode.value)
