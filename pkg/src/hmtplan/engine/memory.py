"""Tensor-lifetime analysis and static offset allocation.

Steps are positions in an execution order. A tensor is live from the step of
its producer (step 0 for graph inputs) through its last consumer; graph
outputs and unconsumed tensors stay live to the final step. Weights are not
tensors here: they stay resident and are accounted for separately.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from hmtplan.errors import StructuralError
from hmtplan.ir.graph import ComputationGraph


@dataclass(frozen=True)
class Lifetime:
    id: str
    start: int
    end: int
    size: int

    def overlaps(self, other: "Lifetime") -> bool:
        return not (self.end < other.start or other.end < self.start)


@dataclass(frozen=True)
class Placement:
    offset: int
    size: int
    start: int
    end: int


@dataclass(frozen=True)
class MemoryLayout:
    placements: Mapping[str, Placement]
    peak_bytes: int
    lower_bound: int
    strategy: str = "first_fit"

    def to_dict(self) -> dict:
        return {
            "peak_bytes": self.peak_bytes,
            "lower_bound": self.lower_bound,
            "strategy": self.strategy,
            "tensors": {
                t: {"offset": p.offset, "size": p.size, "live": [p.start, p.end]}
                for t, p in sorted(self.placements.items())
            },
        }


def tensor_lifetimes(
    graph: ComputationGraph,
    order: Sequence[str] | None = None,
    sizes: Mapping[str, int] | None = None,
) -> dict[str, Lifetime]:
    """Live intervals for every tensor touched by ``order`` (defaults to the topological order).

    ``sizes`` overrides tensor byte sizes (e.g. after compression).
    """
    order = list(graph.order if order is None else order)
    pos = {nid: i for i, nid in enumerate(order)}
    if len(pos) != len(order) or set(pos) != set(graph.nodes):
        raise StructuralError("execution order must list every node exactly once")
    for nid in order:
        for p in graph.predecessors(nid):
            if pos[p] > pos[nid]:
                raise StructuralError(f"execution order runs {nid!r} before its producer {p!r}")
    last = len(order) - 1
    outputs = set(graph.output_tensors)
    out: dict[str, Lifetime] = {}
    for tid in graph.tensors:
        prod = graph.producer_of.get(tid)
        cons = graph.consumers_of[tid]
        if prod is None and not cons:
            continue
        start = pos[prod] if prod is not None else 0
        end = max((pos[c] for c in cons), default=last)
        if tid in outputs or not cons:
            end = last
        size = graph.tensors[tid].bytes if sizes is None or tid not in sizes else int(sizes[tid])
        out[tid] = Lifetime(tid, start, end, size)
    return out


def live_profile(lifetimes: Iterable[Lifetime]) -> list[int]:
    """Bytes live at each step (difference-array sweep)."""
    lifetimes = list(lifetimes)
    if not lifetimes:
        return []
    n = max(lt.end for lt in lifetimes) + 1
    diff = [0] * (n + 1)
    for lt in lifetimes:
        diff[lt.start] += lt.size
        diff[lt.end + 1] -= lt.size
    acc, prof = 0, []
    for k in range(n):
        acc += diff[k]
        prof.append(acc)
    return prof


def live_lower_bound(lifetimes: Iterable[Lifetime]) -> int:
    return max(live_profile(lifetimes), default=0)


def _first_fit(items: Sequence[Lifetime], order: Sequence[int]) -> tuple[dict[str, Placement], int]:
    placed: list[tuple[Lifetime, int]] = []
    result: dict[str, Placement] = {}
    peak = 0
    for i in order:
        lt = items[i]
        busy = sorted((off, off + other.size) for other, off in placed if other.overlaps(lt))
        off = 0
        for lo, hi in busy:
            if off + lt.size <= lo:
                break
            off = max(off, hi)
        placed.append((lt, off))
        result[lt.id] = Placement(off, lt.size, lt.start, lt.end)
        peak = max(peak, off + lt.size)
    return result, peak


_ORDERS: dict[str, Callable[[Lifetime], tuple]] = {
    "first_fit": lambda lt: (lt.start, -lt.size, lt.id),
    "size_desc": lambda lt: (-lt.size, lt.start, lt.id),
    "lifetime_desc": lambda lt: (-(lt.end - lt.start), -lt.size, lt.id),
}


def allocate_memory(lifetimes: Mapping[str, Lifetime] | Iterable[Lifetime], refine: bool = True,
                    search_budget: int = 20_000, search_max_tensors: int = 16) -> MemoryLayout:
    """Offset assignment by first fit in (start step, size descending) order.

    When that leaves a gap above the live-set lower bound and ``refine`` is
    set, two other placement orders are tried, then a bounded depth-first
    search over placement orders (small instances only); the best layout found
    is kept.
    """
    items = sorted(lifetimes.values() if isinstance(lifetimes, Mapping) else lifetimes, key=lambda lt: lt.id)
    lb = live_lower_bound(items)
    idx = range(len(items))
    best_name = "first_fit"
    best, best_peak = _first_fit(items, sorted(idx, key=lambda i: _ORDERS["first_fit"](items[i])))
    if refine and best_peak > lb:
        for name in ("size_desc", "lifetime_desc"):
            cand, peak = _first_fit(items, sorted(idx, key=lambda i: _ORDERS[name](items[i])))
            if peak < best_peak:
                best, best_peak, best_name = cand, peak, name
        if best_peak > lb and len(items) <= search_max_tensors:
            found = _search(items, lb, best_peak, search_budget)
            if found is not None:
                best, best_peak, best_name = found[0], found[1], "search"
    return MemoryLayout(best, best_peak, lb, best_name)


def _search(items: Sequence[Lifetime], lb: int, bound: int, budget: int):
    """Depth-first search over first-fit placement orders, pruned by the incumbent peak."""
    state = {"best": None, "bound": bound, "nodes": 0}
    by_size = sorted(range(len(items)), key=lambda i: (-items[i].size, items[i].id))

    def rec(placed: list[tuple[int, int]], remaining: list[int], peak: int) -> None:
        if peak >= state["bound"] or state["nodes"] > budget or state["bound"] == lb:
            return
        state["nodes"] += 1
        if not remaining:
            state["bound"] = peak
            state["best"] = list(placed)
            return
        for j, i in enumerate(remaining):
            lt = items[i]
            busy = sorted((off, off + items[k].size) for k, off in placed if items[k].overlaps(lt))
            off = 0
            for lo, hi in busy:
                if off + lt.size <= lo:
                    break
                off = max(off, hi)
            placed.append((i, off))
            rec(placed, remaining[:j] + remaining[j + 1:], max(peak, off + lt.size))
            placed.pop()

    rec([], by_size, 0)
    if state["best"] is None:
        return None
    result = {items[i].id: Placement(off, items[i].size, items[i].start, items[i].end) for i, off in state["best"]}
    return result, state["bound"]


def find_overlaps(layout: MemoryLayout) -> list[tuple[str, str]]:
    """Every pair of tensors that are live together and share a byte (exhaustive check)."""
    items = sorted(layout.placements.items())
    bad = []
    for i, (a, pa) in enumerate(items):
        for b, pb in items[i + 1:]:
            live = not (pa.end < pb.start or pb.end < pa.start)
            space = pa.offset < pb.offset + pb.size and pb.offset < pa.offset + pa.size
            if live and space and pa.size and pb.size:
                bad.append((a, b))
    return bad
