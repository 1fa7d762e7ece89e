"""Inter-operator parallelism: list scheduling of a DAG on k identical cores."""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Mapping, Sequence

from hmtplan.cost.model import node_latency
from hmtplan.cost.profiles import DeviceProfile
from hmtplan.ir.graph import ComputationGraph


@dataclass(frozen=True)
class ScheduleEntry:
    lane: int
    start: float
    end: float


@dataclass(frozen=True)
class Schedule:
    entries: Mapping[str, ScheduleEntry]
    makespan: float
    critical_path: float
    total_work: float
    lanes: int

    @property
    def lower_bound(self) -> float:
        return max(self.critical_path, self.total_work / self.lanes)

    @property
    def upper_bound(self) -> float:
        return self.critical_path + self.total_work / self.lanes

    def order(self) -> list[str]:
        return sorted(self.entries, key=lambda n: (self.entries[n].start, self.entries[n].lane, n))

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "lanes": self.lanes,
            "nodes": {n: {"lane": e.lane, "start": e.start, "end": e.end} for n, e in sorted(self.entries.items())},
        }


def bottom_levels(succ: Mapping[str, Sequence[str]], order: Sequence[str], dur: Mapping[str, float]) -> dict[str, float]:
    bl: dict[str, float] = {}
    for n in reversed(order):
        bl[n] = dur[n] + max((bl[s] for s in succ[n]), default=0.0)
    return bl


def list_schedule(
    order: Sequence[str],
    preds: Mapping[str, Sequence[str]],
    durations: Mapping[str, float],
    k: int,
) -> Schedule:
    """Non-delay list schedule: whenever a lane is free, start the ready task with the largest bottom level."""
    if k < 1:
        raise ValueError("need at least one lane")
    succ: dict[str, list[str]] = {n: [] for n in order}
    for n in order:
        for p in preds[n]:
            succ[p].append(n)
    bl = bottom_levels(succ, order, durations)
    missing = {n: len(set(preds[n])) for n in order}
    ready = [(-bl[n], n) for n in order if missing[n] == 0]
    heapq.heapify(ready)
    free = list(range(k))
    running: list[tuple[float, int, str]] = []
    entries: dict[str, ScheduleEntry] = {}
    now = 0.0
    while ready or running:
        while ready and free:
            _, n = heapq.heappop(ready)
            lane = heapq.heappop(free)
            end = now + durations[n]
            entries[n] = ScheduleEntry(lane, now, end)
            heapq.heappush(running, (end, lane, n))
        if not running:
            break
        now, lane, n = heapq.heappop(running)
        done = [(lane, n)]
        while running and running[0][0] == now:
            _, l2, n2 = heapq.heappop(running)
            done.append((l2, n2))
        for lane, n in done:
            heapq.heappush(free, lane)
            for s in succ[n]:
                missing[s] -= 1
                if missing[s] == 0:
                    heapq.heappush(ready, (-bl[s], s))
    makespan = max((e.end for e in entries.values()), default=0.0)
    cp = max(bl.values(), default=0.0)
    return Schedule(entries, makespan, cp, sum(durations[n] for n in order), k)


def node_durations(graph: ComputationGraph, device: DeviceProfile, background_pressure: float = 0.0,
                   per_core: bool = True) -> dict[str, float]:
    """Roofline latency of each node; with ``per_core`` the compute runs on a single core (k times slower)."""
    out = {}
    for nid in graph.order:
        t = node_latency(graph, nid, device, background_pressure)
        out[nid] = t * device.cores if per_core else t
    return out


def schedule_parallel(
    graph: ComputationGraph,
    k: int,
    durations: Mapping[str, float] | None = None,
    device: DeviceProfile | None = None,
    speed: float = 1.0,
    background_pressure: float = 0.0,
) -> Schedule:
    """List-schedule ``graph`` on ``k`` cores of relative ``speed``.

    Durations default to each node's roofline latency on one core of ``device``.
    """
    if durations is None:
        if device is None:
            raise ValueError("pass durations or a device profile")
        durations = node_durations(graph, device, background_pressure)
    dur = {n: durations[n] / speed for n in graph.order}
    preds = {n: graph.predecessors(n) for n in graph.order}
    return list_schedule(graph.order, preds, dur, k)
