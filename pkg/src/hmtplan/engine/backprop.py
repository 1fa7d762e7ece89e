"""Training-time memory planning.

``reorder_backprop`` runs every weight update right after its gradient, so
each weight gradient lives for a single step. ``plan_training_memory`` then
shrinks the remaining peak with a greedy priority loop over saved
activations: at the peak step it picks the tensor/action pair with the best
bytes-saved per second-added ratio among

* Compress: outputs of Pool/ReLU/elementwise producers are stored at 8 (or 4)
  bits between their last forward use and their backward use;
* SwapOut: the tensor leaves device memory for that gap (moved out and back);
* Recompute: the tensor is dropped and rebuilt from its producer's inputs,
  which must stay resident until then.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from hmtplan.cost.model import node_latency
from hmtplan.cost.profiles import DeviceProfile
from hmtplan.engine.fusion import FusionGroup, fuse_training
from hmtplan.engine.memory import Lifetime, live_profile, tensor_lifetimes
from hmtplan.errors import PlanError, StructuralError
from hmtplan.ir.graph import ELEMENTWISE, ComputationGraph, Mode, OpKind
from hmtplan.ir.training import GRAD_PREFIX, UPDATE_PREFIX, gradient_chain

COMPRESSIBLE = ELEMENTWISE | {OpKind.POOL}


def reorder_backprop(graph: ComputationGraph) -> list[str]:
    """Forward pass, then each gradient immediately followed by its weight update."""
    if graph.mode is not Mode.TRAINING:
        raise StructuralError("reorder_backprop needs a Training graph")
    backward = {n for n, x in graph.nodes.items() if x.kind in (OpKind.GRADIENT, OpKind.WEIGHT_UPDATE)}
    order = [n for n in graph.order if n not in backward]
    for g in gradient_chain(graph):
        order.append(g)
        upd = UPDATE_PREFIX + g.removeprefix(GRAD_PREFIX)
        if upd in graph.nodes:
            order.append(upd)
    pos = {n: i for i, n in enumerate(order)}
    if len(pos) != len(graph.nodes):
        raise StructuralError("reordered schedule does not cover every node")
    for n in order:
        for p in graph.predecessors(n):
            if pos[p] > pos[n]:
                raise StructuralError(f"reordering would run {n!r} before {p!r}")
    return order


def peak_bytes(graph: ComputationGraph, order: Sequence[str], sizes: Mapping[str, int] | None = None) -> int:
    return max(live_profile(tensor_lifetimes(graph, order, sizes).values()), default=0)


class Action(str, Enum):
    KEEP = "Keep"
    RECOMPUTE = "Recompute"
    SWAP_OUT = "SwapOut"
    COMPRESS = "Compress"


@dataclass(frozen=True)
class TensorAction:
    action: Action
    gap: tuple[int, int]  # steps strictly between these two are affected
    resident_bytes: int  # bytes held during the gap
    latency: float
    bits: int = 32

    def to_dict(self) -> dict:
        d = {"action": self.action.value, "gap": list(self.gap), "resident_bytes": self.resident_bytes,
             "latency": self.latency}
        if self.action is Action.COMPRESS:
            d["bits"] = self.bits
        return d


@dataclass(frozen=True)
class TrainingMemoryConfig:
    compress_bits: int = 8
    enable_compress: bool = True
    enable_swap: bool = True
    enable_recompute: bool = True
    backprop_fusion: bool = True
    fusion_rules: str | None = None
    batch_splitting: bool = False
    min_batch: int = 1
    compress_accuracy_delta: Mapping[int, float] = field(default_factory=lambda: {8: -0.1, 4: -0.5})

    def __post_init__(self) -> None:
        if self.compress_bits not in (4, 8):
            raise PlanError("activation compression stores 8 or 4 bits")


@dataclass(frozen=True)
class TrainingMemoryPlan:
    graph: ComputationGraph
    order: tuple[str, ...]
    sizes: Mapping[str, int]
    actions: Mapping[str, TensorAction]
    added_latency: float
    peak_bytes: int
    baseline_peak: int
    budget: int
    feasible: bool
    batch_size: int
    accumulation_steps: int = 1
    fusion_groups: tuple[FusionGroup, ...] = field(default_factory=tuple)
    accuracy_delta: float = 0.0

    def to_dict(self) -> dict:
        return {
            "accuracy_delta": self.accuracy_delta,
            "budget": self.budget,
            "peak_bytes": self.peak_bytes,
            "baseline_peak": self.baseline_peak,
            "feasible": self.feasible,
            "added_latency": self.added_latency,
            "batch_size": self.batch_size,
            "accumulation_steps": self.accumulation_steps,
            "actions": {t: a.to_dict() for t, a in sorted(self.actions.items())},
            "fusion_groups": [g.to_dict() for g in self.fusion_groups],
        }


def _batch_sizes(graph: ComputationGraph, batch: int, new_batch: int) -> dict[str, int]:
    out = {}
    for tid, t in graph.tensors.items():
        if tid.endswith(":w") and tid.startswith(GRAD_PREFIX):
            out[tid] = t.bytes
        elif t.shape[0] == batch:
            out[tid] = math.ceil(t.bytes * new_batch / batch)
        else:
            out[tid] = t.bytes
    return out


def _gaps(graph: ComputationGraph, order: Sequence[str], lifetimes: Mapping[str, Lifetime]) -> dict[str, tuple[int, int]]:
    """Saved activations: (last forward use, first backward use), with a non-empty gap between."""
    pos = {n: i for i, n in enumerate(order)}
    backward = {n for n, x in graph.nodes.items() if x.kind in (OpKind.GRADIENT, OpKind.WEIGHT_UPDATE)}
    out = {}
    for tid, lt in lifetimes.items():
        prod = graph.producer_of.get(tid)
        if prod in backward:
            continue
        cons = graph.consumers_of[tid]
        bwd = [pos[c] for c in cons if c in backward]
        if not bwd:
            continue
        fwd = [pos[c] for c in cons if c not in backward]
        last_fwd = max(fwd, default=lt.start)
        first_bwd = min(bwd)
        if first_bwd - last_fwd > 1:
            out[tid] = (last_fwd, first_bwd)
    return out


def _apply(profile: np.ndarray, gap: tuple[int, int], delta: int) -> None:
    profile[gap[0] + 1: gap[1]] += delta


def resimulate(plan: TrainingMemoryPlan) -> list[int]:
    """Step-by-step live bytes with the plan's actions applied (independent of the planner's bookkeeping)."""
    g = plan.graph
    pos = {n: i for i, n in enumerate(plan.order)}
    last = len(plan.order) - 1
    outputs = set(g.output_tensors)
    live = [0] * len(plan.order)
    for tid in g.tensors:
        prod = g.producer_of.get(tid)
        cons = g.consumers_of[tid]
        if prod is None and not cons:
            continue
        start = pos[prod] if prod is not None else 0
        end = last if (tid in outputs or not cons) else max(pos[c] for c in cons)
        size = plan.sizes[tid]
        act = plan.actions.get(tid)
        for step in range(start, end + 1):
            if act is not None and act.gap[0] < step < act.gap[1]:
                live[step] += act.resident_bytes
            else:
                live[step] += size
    return live


def plan_training_memory(
    graph: ComputationGraph,
    budget: int,
    device: DeviceProfile,
    config: TrainingMemoryConfig = TrainingMemoryConfig(),
    background_pressure: float = 0.0,
) -> TrainingMemoryPlan:
    if budget <= 0:
        raise PlanError("memory budget must be > 0")
    if graph.mode is not Mode.TRAINING:
        raise PlanError("plan_training_memory needs a Training graph")
    groups: tuple[FusionGroup, ...] = ()
    if config.backprop_fusion:
        graph, grp = fuse_training(graph, config.fusion_rules)
        groups = tuple(grp)
    order = reorder_backprop(graph)
    inputs = graph.input_tensors
    batch = graph.tensors[inputs[0]].shape[0] if inputs else 1
    baseline = peak_bytes(graph, order)
    b, steps = batch, 1
    while True:
        sizes = _batch_sizes(graph, batch, b)
        plan = _greedy(graph, order, sizes, budget, device, config, background_pressure)
        if plan[3] or not config.batch_splitting or b <= config.min_batch:
            break
        b, steps = max(config.min_batch, b // 2), steps * 2
    actions, added, peak, ok = plan
    compressed = any(a.action is Action.COMPRESS for a in actions.values())
    acc = config.compress_accuracy_delta.get(config.compress_bits, 0.0) if compressed else 0.0
    return TrainingMemoryPlan(graph, tuple(order), sizes, actions, added, peak, baseline, int(budget), ok,
                              b, steps, groups, acc)


def _greedy(graph, order, sizes, budget, device, config, pressure):
    lifetimes = tensor_lifetimes(graph, order, sizes)
    profile = np.array(live_profile(lifetimes.values()), dtype=np.int64)
    gaps = _gaps(graph, order, lifetimes)
    actions: dict[str, TensorAction] = {}
    pinned: dict[str, int] = {}  # tensor -> step it must stay resident through
    added = 0.0
    recompute_cost: dict[str, float] = {}
    while profile.size and profile.max() > budget:
        k = int(profile.argmax())
        best = None
        for tid, gap in sorted(gaps.items()):
            if tid in actions or not gap[0] < k < gap[1]:
                continue
            size = sizes[tid]
            if size == 0:
                continue
            if pinned.get(tid, -1) > gap[0]:
                continue  # a recomputation still needs it in memory
            prod = graph.producer_of.get(tid)
            options = []
            if config.enable_compress and prod is not None and _compressible(graph, prod):
                kept = math.ceil(size * config.compress_bits / 32)
                options.append((Action.COMPRESS, kept, device.codec_rate * size, config.compress_bits))
            if config.enable_swap:
                options.append((Action.SWAP_OUT, 0, 2.0 * size / device.swap_bandwidth, 32))
            if config.enable_recompute and prod is not None and _can_recompute(graph, prod, actions, gap):
                if prod not in recompute_cost:
                    recompute_cost[prod] = node_latency(graph, prod, device, pressure)
                options.append((Action.RECOMPUTE, 0, recompute_cost[prod], 32))
            for act, kept, lat, bits in options:
                saved = size - kept
                if saved <= 0:
                    continue
                score = saved / lat if lat > 0 else math.inf
                key = (score, saved, -list(Action).index(act))
                if best is None or key > best[0]:
                    best = (key, tid, act, kept, lat, bits, gap)
        if best is None:
            return actions, added, int(profile.max()), False
        _, tid, act, kept, lat, bits, gap = best
        actions[tid] = TensorAction(act, gap, kept, lat, bits)
        added += lat
        _apply(profile, gap, kept - sizes[tid])
        if act is Action.RECOMPUTE:
            for t in graph.nodes[graph.producer_of[tid]].inputs:
                pinned[t] = max(pinned.get(t, -1), gap[1])
    return actions, added, int(profile.max()) if profile.size else 0, True


def _compressible(graph: ComputationGraph, node_id: str) -> bool:
    n = graph.nodes[node_id]
    if n.kind is OpKind.FUSED:
        return OpKind(n.attrs["members"][-1]["kind"]) in COMPRESSIBLE
    return n.kind in COMPRESSIBLE


def _can_recompute(graph: ComputationGraph, prod: str, actions: Mapping[str, TensorAction], gap: tuple[int, int]) -> bool:
    """The producer's inputs must be resident at the backward use (not dropped over that step)."""
    n = graph.nodes[prod]
    if n.kind in (OpKind.GRADIENT, OpKind.WEIGHT_UPDATE, OpKind.CONSTANT):
        return False
    for t in n.inputs:
        a = actions.get(t)
        if a is not None and a.gap[0] < gap[1] < a.gap[1]:
            return False
        if a is not None and a.action is not Action.KEEP and a.gap[1] > gap[0]:
            return False
    return True
