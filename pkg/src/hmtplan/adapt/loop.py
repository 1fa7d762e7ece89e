"""The adaptation loop: build a front offline, then re-select on every context event."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from hmtplan.adapt.ahp import DEFAULT_PAIRWISE
from hmtplan.adapt.context import ContextEvent, validate_trace
from hmtplan.adapt.pareto import (Candidate, DesignSpace, Evaluator, ParetoFront, candidate_id, evolve_front,
                                  exact_front)
from hmtplan.adapt.select import Selection, select_online
from hmtplan.cost.estimate import DeploymentPlan, PerformanceEstimate, materialize
from hmtplan.cost.profiles import Fleet
from hmtplan.ir.graph import ComputationGraph
from hmtplan.variants.accuracy import AccuracyModel

TIMELINE_COLUMNS = ("t", "candidate_id", "A", "T", "E", "M_peak", "feasible", "switched")


@dataclass(frozen=True)
class LoopConfig:
    space: Mapping[str, Any] = field(default_factory=dict)
    search: str = "evolve"  # or "exact"
    population: int = 16
    generations: int = 30
    seed: int = 0
    norm: str = "minmax"
    tie_band: float = 0.01
    pairwise: Sequence[Sequence[float]] = DEFAULT_PAIRWISE
    reference: DeploymentPlan = field(default_factory=DeploymentPlan)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], seed: int | None = None) -> "LoopConfig":
        ref = DeploymentPlan.from_dict(d["reference"]) if "reference" in d else DeploymentPlan()
        return cls(
            d.get("space", {}),
            d.get("search", "evolve"),
            int(d.get("population", 16)),
            int(d.get("generations", 30)),
            int(seed if seed is not None else d.get("seed", 0)),
            d.get("norm", "minmax"),
            float(d.get("tie_band", 0.01)),
            tuple(tuple(float(x) for x in row) for row in d.get("pairwise", DEFAULT_PAIRWISE)),
            ref,
        )


@dataclass(frozen=True)
class Step:
    event: ContextEvent  # budgets resolved to absolute values
    selection: Selection
    switched: bool

    @property
    def candidate(self) -> Candidate:
        return self.selection.candidate

    @property
    def estimate(self) -> PerformanceEstimate:
        return self.selection.estimate

    def row(self) -> list[str]:
        e = self.estimate
        return [repr(self.event.t), self.candidate.id, repr(e.accuracy), repr(e.latency), repr(e.energy),
                str(e.memory), str(self.selection.feasible).lower(), str(self.switched).lower()]


@dataclass(frozen=True)
class Timeline:
    steps: tuple[Step, ...]
    front: ParetoFront
    reference: PerformanceEstimate

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for s in self.steps:
            w.writerow(s.row())
        return buf.getvalue()


def build_front(space: DesignSpace, evaluator: Evaluator, config: LoopConfig) -> ParetoFront:
    if config.search == "exact":
        return exact_front(space, evaluator)
    if config.search != "evolve":
        raise ValueError("search must be 'evolve' or 'exact'")
    return evolve_front(space, evaluator, config.population, config.generations, config.seed)


def run_loop(graph: ComputationGraph, fleet: Fleet, trace: Sequence[ContextEvent], config: LoopConfig,
             accuracy: AccuracyModel | None = None, front: ParetoFront | None = None) -> Timeline:
    validate_trace(trace)
    evaluator = Evaluator(graph, fleet, accuracy)
    if front is None:
        front = build_front(DesignSpace.from_config(graph, config.space, fleet), evaluator, config)
    ref_plan = config.reference
    ref = evaluator(Candidate(candidate_id(ref_plan), ref_plan))
    steps: list[Step] = []
    prev: str | None = None
    for raw in trace:
        ev = raw.resolve(ref.memory, ref.latency)

        def evaluate(c: Candidate, ev=ev) -> PerformanceEstimate:
            return evaluator(c, ev.background_pressure, ev.freq_scale, ev.bandwidth)

        sel = select_online(front.candidates, ev, evaluate, config.norm, config.tie_band, config.pairwise)
        steps.append(Step(ev, sel, prev is not None and sel.candidate.id != prev))
        prev = sel.candidate.id
    return Timeline(tuple(steps), front, ref)


def step_document(step: Step, graph: ComputationGraph, fleet: Fleet) -> dict[str, Any]:
    ev = step.event
    ctx = fleet.with_context(ev.freq_scale, ev.bandwidth)
    mp = materialize(step.candidate.plan, graph, ctx, ev.background_pressure)
    return {
        "event": ev.to_dict(),
        "candidate": step.candidate.to_dict(),
        "feasible": step.selection.feasible,
        "switched": step.switched,
        "mu": step.selection.mu,
        "score": step.selection.score if step.selection.feasible else None,
        "deployment": mp.to_dict(),
    }


def write_timeline(timeline: Timeline, graph: ComputationGraph, fleet: Fleet, out_dir: str) -> list[str]:
    """Write ``timeline.csv``, ``front.json`` and ``steps/step_NNN.json``; returns the written paths."""
    os.makedirs(os.path.join(out_dir, "steps"), exist_ok=True)
    paths = []
    p = os.path.join(out_dir, "timeline.csv")
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(timeline.to_csv())
    paths.append(p)
    p = os.path.join(out_dir, "front.json")
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(timeline.front.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(p)
    for i, step in enumerate(timeline.steps):
        p = os.path.join(out_dir, "steps", f"step_{i:03d}.json")
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(step_document(step, graph, fleet), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
    return paths
