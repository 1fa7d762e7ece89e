"""Plan-level performance estimation.

A ``DeploymentPlan`` names the knobs (variant, quantization, fusion rules,
parallel toggle, placement); ``materialize`` runs the planning pipeline

    variant -> redundancy elimination -> quantization -> fusion
            -> per-block units -> device assignment -> memory layouts

and ``estimate_plan`` turns the result into (A, T, E, M, C):

* T is the makespan of the unit list schedule, transfers included;
* E sums the layer energy of every node on the device it runs on;
* M is the largest per-device footprint (resident weights plus the
  activation peak of that device's offset layout);
* C is the MAC count of the transformed graph; A comes from the accuracy table.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from hmtplan.cost.model import energy, latency, layer_costs, node_latency
from hmtplan.cost.profiles import Fleet
from hmtplan.engine.backprop import (TensorAction, TrainingMemoryConfig, TrainingMemoryPlan, peak_bytes, plan_training_memory,
                                     reorder_backprop)
from hmtplan.engine.fusion import RULE_ORDER, FusionGroup, FusionRule, fuse, fuse_training, parse_rules
from hmtplan.engine.memory import Lifetime, MemoryLayout, allocate_memory, tensor_lifetimes
from hmtplan.engine.parallel import list_schedule
from hmtplan.errors import OffloadError, PlanError
from hmtplan.ir.graph import ComputationGraph, Mode, OperatorNode, TensorSpec
from hmtplan.ir.training import forward_part, make_training_graph
from hmtplan.partition.offload import (Assignment, OffloadProblem, SearchMode, SimResult, build_problem,
                                       offload_search, simulate)
from hmtplan.partition.redundancy import eliminate_redundancy
from hmtplan.partition.units import Granularity, Partition, pre_partition
from hmtplan.variants.accuracy import AccuracyModel, load_accuracy_table, predict_accuracy
from hmtplan.variants.ops import VariantConfig, apply_variant

QUANT_BITS = (4, 8, 16, 32)
PLACEMENTS = ("local", "offload", "split")


@dataclass(frozen=True)
class DeploymentPlan:
    """Decision variables of one deployment.

    ``placement`` is ``"local"`` (everything on ``device``, default the fleet's
    home), ``"offload"`` (unit assignment searched over the fleet) or
    ``"split"`` (the units holding the first ``split`` share of the weights
    stay on the home device, the rest runs on ``remote``, default the fastest
    linked device).
    An explicit ``assignment`` (unit id -> device id) overrides all three.
    """

    variant: VariantConfig = field(default_factory=lambda: VariantConfig(()))
    quant_bits: int = 32
    fusion_rules: tuple[FusionRule, ...] | str = RULE_ORDER
    parallel: bool = False
    placement: str = "local"
    device: str | None = None
    assignment: Mapping[str, str] | None = None
    search: SearchMode = SearchMode.BEAM
    granularity: Granularity = Granularity.PER_BLOCK
    redundancy: bool = True
    training_actions: bool = True
    split: float = 0.5
    remote: str | None = None

    def __post_init__(self) -> None:
        if self.quant_bits not in QUANT_BITS:
            raise PlanError(f"quant_bits must be one of {QUANT_BITS}")
        if self.placement not in PLACEMENTS:
            raise PlanError(f"placement must be one of {PLACEMENTS}")
        if not 0.0 < self.split < 1.0:
            raise PlanError("split must be in (0, 1)")
        rules = self.fusion_rules
        object.__setattr__(self, "fusion_rules", parse_rules(rules if isinstance(rules, str) else list(rules)))
        object.__setattr__(self, "search", SearchMode(self.search))
        object.__setattr__(self, "granularity", Granularity(self.granularity))

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant.to_dict(),
            "quant_bits": self.quant_bits,
            "fusion_rules": [r.value for r in self.fusion_rules],
            "parallel": self.parallel,
            "placement": self.placement,
            "device": self.device,
            "assignment": dict(sorted(self.assignment.items())) if self.assignment is not None else None,
            "search": self.search.value,
            "granularity": self.granularity.value,
            "redundancy": self.redundancy,
            "training_actions": self.training_actions,
            "split": self.split,
            "remote": self.remote,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DeploymentPlan":
        return cls(
            VariantConfig.from_dict(doc.get("variant", {"ops": []})),
            int(doc.get("quant_bits", 32)),
            tuple(doc.get("fusion_rules", [r.value for r in RULE_ORDER])),
            bool(doc.get("parallel", False)),
            doc.get("placement", "local"),
            doc.get("device"),
            doc.get("assignment"),
            doc.get("search", SearchMode.BEAM.value),
            doc.get("granularity", Granularity.PER_BLOCK.value),
            bool(doc.get("redundancy", True)),
            bool(doc.get("training_actions", True)),
            float(doc.get("split", 0.5)),
            doc.get("remote"),
        )


@dataclass(frozen=True)
class PerformanceEstimate:
    accuracy: float
    latency: float
    energy: float
    memory: int
    macs: int
    transfer: float = 0.0
    devices: tuple[str, ...] = ()
    offloaded: bool = False
    per_device: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    @property
    def A(self) -> float:
        return self.accuracy

    @property
    def T(self) -> float:
        return self.latency

    @property
    def E(self) -> float:
        return self.energy

    @property
    def M(self) -> int:
        return self.memory

    @property
    def C(self) -> int:
        return self.macs

    def to_dict(self) -> dict[str, Any]:
        return {
            "A": self.accuracy,
            "T": self.latency,
            "E": self.energy,
            "M": self.memory,
            "C": self.macs,
            "transfer": self.transfer,
            "devices": list(self.devices),
            "offloaded": self.offloaded,
            "per_device": {d: dict(v) for d, v in sorted(self.per_device.items())},
        }


@dataclass(frozen=True, eq=False)
class MaterializedPlan:
    plan: DeploymentPlan
    graph: ComputationGraph
    fusion_groups: tuple[FusionGroup, ...]
    partition: Partition | None
    assignment: Assignment | None
    problem: OffloadProblem | None
    schedule: SimResult | None
    layouts: Mapping[str, MemoryLayout]
    training: TrainingMemoryPlan | None = None
    device_of: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "plan": self.plan.to_dict(),
            "graph": {"name": self.graph.name, "nodes": len(self.graph.nodes), "macs": self.graph.total_macs},
            "fusion_groups": [g.to_dict() for g in self.fusion_groups],
            "layouts": {d: lay.to_dict() for d, lay in sorted(self.layouts.items())},
        }
        if self.partition is not None:
            out["partition"] = self.partition.to_dict()
        if self.assignment is not None:
            out["assignment"] = self.assignment.to_dict()
        if self.schedule is not None and self.problem is not None:
            out["schedule"] = {
                "makespan": self.schedule.makespan,
                "units": {
                    uid: {"device": self.problem.devices[self._assign[i]], "start": self.schedule.start[i],
                          "finish": self.schedule.finish[i]}
                    for i, uid in enumerate(self.problem.unit_ids)
                },
            }
        if self.training is not None:
            out["training"] = self.training.to_dict()
        return out

    @property
    def _assign(self) -> list[int]:
        idx = {d: i for i, d in enumerate(self.problem.devices)}
        return [idx[self.assignment.mapping[u]] for u in self.problem.unit_ids]


def quantize(graph: ComputationGraph, bits: int) -> ComputationGraph:
    """Store weights and activations at ``bits`` (graph inputs keep their width)."""
    if bits == 32:
        return graph
    inputs = set(graph.input_tensors)
    tensors = {tid: t if tid in inputs else TensorSpec(t.id, t.shape, bits) for tid, t in graph.tensors.items()}
    nodes = {nid: dataclasses.replace(n, param_bytes=math.ceil(n.param_bytes * bits / 32))
             for nid, n in graph.nodes.items()}
    return graph.evolve(nodes=nodes, tensors=tensors)


def transform(graph: ComputationGraph, plan: DeploymentPlan) -> ComputationGraph:
    """Variant, redundancy elimination and quantization (everything before fusion)."""
    g = apply_variant(graph, plan.variant)
    if plan.redundancy:
        g = eliminate_redundancy(g)
    return quantize(g, plan.quant_bits)


def _parallel_compute(problem: OffloadProblem, partition: Partition, fleet: Fleet,
                      background_pressure: float) -> OffloadProblem:
    """Per-unit compute time with inter-operator parallelism: the better of sequential and k-lane makespan."""
    g = partition.graph
    rows = []
    for u, row in zip(partition.units, problem.compute):
        members = set(u.node_ids)
        preds = {n: [p for p in g.predecessors(n) if p in members] for n in u.node_ids}
        new = []
        for d, seq in zip(problem.devices, row):
            prof = fleet.devices[d]
            if prof.cores <= 1 or len(u.node_ids) <= 1:
                new.append(seq)
                continue
            dur = {n: node_latency(g, n, prof, background_pressure) * prof.cores for n in u.node_ids}
            new.append(min(seq, list_schedule(u.node_ids, preds, dur, prof.cores).makespan))
        rows.append(tuple(new))
    return dataclasses.replace(problem, compute=tuple(rows))


def remote_device(fleet: Fleet, home: str) -> str | None:
    """Fastest device with a link to ``home`` (ties by id)."""
    linked = [d for d in fleet.device_ids if d != home and fleet.bandwidth(home, d) > 0]
    if not linked:
        return None
    return max(linked, key=lambda d: (fleet.devices[d].mac_throughput, [-ord(c) for c in d]))


def split_assignment(partition: Partition, fleet: Fleet, share: float, remote: str | None,
                     home: str) -> dict[str, str]:
    remote = remote or remote_device(fleet, home)
    if remote is None:
        raise PlanError(f"no device is linked to {home!r}; cannot split")
    if remote not in fleet.devices:
        raise PlanError(f"unknown remote device {remote!r}")
    n = len(partition.units)
    g = partition.graph
    weights = [sum(g.nodes[x].param_bytes for x in u.node_ids) for u in partition.units]
    total = sum(weights)
    cut, acc = n, 0
    for i, w in enumerate(weights):
        if acc >= share * total:
            cut = i
            break
        acc += w
    cut = min(n - 1, max(1, cut)) if n > 1 else 1
    return {u.id: (home if i < cut else remote) for i, u in enumerate(partition.units)}


def _device_layout(graph: ComputationGraph, node_ids: list[str]) -> tuple[int, MemoryLayout]:
    sub = graph.subgraph(node_ids)
    layout = allocate_memory(tensor_lifetimes(sub, [n for n in graph.order if n in sub.nodes]))
    return sub.total_param_bytes, layout


def materialize(plan: DeploymentPlan, graph: ComputationGraph, fleet: Fleet, background_pressure: float = 0.0,
                memory_budget: int | None = None) -> MaterializedPlan:
    if plan.device is not None and plan.device not in fleet.devices:
        raise PlanError(f"plan device {plan.device!r} is not in the fleet")
    if graph.mode is Mode.TRAINING:
        return _materialize_training(plan, graph, fleet, background_pressure, memory_budget)
    g, groups = fuse(transform(graph, plan), plan.fusion_rules)
    partition = pre_partition(g, plan.granularity)
    local = plan.device or fleet.home
    if plan.placement == "split" and plan.assignment is None:
        plan_assignment = split_assignment(partition, fleet, plan.split, plan.remote, local)
        plan = dataclasses.replace(plan, assignment=plan_assignment)
    if plan.assignment is not None:
        unknown_units = set(plan.assignment) ^ {u.id for u in partition.units}
        if unknown_units:
            raise PlanError(f"assignment does not match the partition units: {sorted(unknown_units)[:5]}")
        unknown_dev = set(plan.assignment.values()) - set(fleet.devices)
        if unknown_dev:
            raise PlanError(f"assignment references unknown device(s): {sorted(unknown_dev)}")
        devices = tuple(sorted(set(plan.assignment.values()) | {local}))
    elif plan.placement == "local":
        devices = (local,)
    else:
        devices = fleet.device_ids
    problem = build_problem(partition, fleet, background_pressure, devices)
    if plan.parallel:
        problem = _parallel_compute(problem, partition, fleet, background_pressure)
    if plan.assignment is not None:
        idx = {d: i for i, d in enumerate(problem.devices)}
        assign = [idx[plan.assignment[u]] for u in problem.unit_ids]
        res = simulate(problem, assign)
        assignment = Assignment(dict(plan.assignment), res.makespan, problem.switches(assign), "explicit")
    elif len(devices) == 1:
        assign = [0] * problem.n
        res = simulate(problem, assign)
        assignment = Assignment({u: devices[0] for u in problem.unit_ids}, res.makespan, 0, "local")
    else:
        try:
            assignment = offload_search(partition, fleet, plan.search, background_pressure, problem=problem)
        except OffloadError as exc:
            raise PlanError(str(exc)) from None
        idx = {d: i for i, d in enumerate(problem.devices)}
        assign = [idx[assignment.mapping[u]] for u in problem.unit_ids]
        res = simulate(problem, assign)
    if not math.isfinite(res.makespan):
        raise PlanError("assignment uses a device pair without a link")
    res = simulate(problem, assign, trace=True)
    device_of = {n: assignment.mapping[u.id] for u in partition.units for n in u.node_ids}
    layouts = {}
    for d in sorted(set(device_of.values())):
        _, layouts[d] = _device_layout(g, [n for n in g.order if device_of[n] == d])
    return MaterializedPlan(plan, g, tuple(groups), partition, assignment, problem, res, layouts, None, device_of)


def _split_actioned(lifetimes: dict[str, Lifetime], actions: Mapping[str, TensorAction]) -> dict[str, Lifetime]:
    """Cut each saved activation with an action into before/during/after-gap pieces."""
    out = dict(lifetimes)
    for tid, act in actions.items():
        lt = out.pop(tid)
        lo, hi = act.gap
        out[tid] = Lifetime(tid, lt.start, lo, lt.size)
        if act.resident_bytes > 0 and hi - lo > 1:
            out[f"{tid}@gap"] = Lifetime(f"{tid}@gap", lo + 1, hi - 1, act.resident_bytes)
        out[f"{tid}@back"] = Lifetime(f"{tid}@back", hi, lt.end, lt.size)
    return out


def _materialize_training(plan: DeploymentPlan, graph: ComputationGraph, fleet: Fleet,
                          background_pressure: float, memory_budget: int | None) -> MaterializedPlan:
    if plan.placement != "local" or plan.assignment is not None:
        raise PlanError("training graphs are planned on a single device")
    dev = plan.device or fleet.home
    fwd = transform(forward_part(graph), plan)
    tg = make_training_graph(fwd)
    training = None
    if plan.training_actions and memory_budget is not None:
        cfg = TrainingMemoryConfig(backprop_fusion=bool(plan.fusion_rules),
                                   fusion_rules=",".join(r.value for r in plan.fusion_rules) or "none")
        # the device budget covers weights too; the planner only manages tensors
        tensor_budget = max(1, int(memory_budget) - tg.total_param_bytes)
        training = plan_training_memory(tg, tensor_budget, fleet.devices[dev], cfg, background_pressure)
        g, groups = training.graph, training.fusion_groups
    else:
        g, grp = fuse_training(tg, plan.fusion_rules)
        groups = tuple(grp)
    order = list(training.order) if training is not None else reorder_backprop(g)
    lifetimes = tensor_lifetimes(g, order, training.sizes if training is not None else None)
    if training is not None:
        lifetimes = _split_actioned(lifetimes, training.actions)
    layout = allocate_memory(lifetimes, refine=False)
    return MaterializedPlan(plan, g, groups, None, None, None, None, {dev: layout}, training,
                            {n: dev for n in g.nodes})


def estimate_materialized(mp: MaterializedPlan, fleet: Fleet, background_pressure: float = 0.0,
                          accuracy: AccuracyModel | None = None) -> PerformanceEstimate:
    g = mp.graph
    model = accuracy if accuracy is not None else load_accuracy_table("imagenet")
    acc = predict_accuracy(model, mp.plan.variant, mp.plan.quant_bits)
    per_device: dict[str, dict[str, float]] = {}
    energy_total = 0.0
    for d in sorted(set(mp.device_of.values())):
        prof = fleet.devices[d]
        nodes = [n for n in g.order if mp.device_of[n] == d]
        layers = layer_costs(g, prof, background_pressure, nodes)
        e = energy(layers, prof)
        params = sum(g.nodes[n].param_bytes for n in nodes)
        per_device[d] = {
            "compute": latency(layers, prof),
            "energy": e,
            "params": params,
            "activations": mp.layouts[d].peak_bytes if d in mp.layouts else 0,
            "memory": params + (mp.layouts[d].peak_bytes if d in mp.layouts else 0),
        }
        energy_total += e
    if mp.training is not None:
        d = next(iter(per_device))
        peak = mp.training.peak_bytes if mp.training.feasible else max(mp.training.peak_bytes, mp.layouts[d].peak_bytes)
        per_device[d]["activations"] = peak
        per_device[d]["memory"] = per_device[d]["params"] + peak
        t = per_device[d]["compute"] + mp.training.added_latency
        transfer = 0.0
        acc = max(0.0, min(100.0, acc + mp.training.accuracy_delta))
    elif mp.schedule is not None:
        t = mp.schedule.makespan
        transfer = mp.schedule.path_transfer
    else:
        t = math.fsum(v["compute"] for v in per_device.values())
        transfer = 0.0
    devices = tuple(sorted(per_device))
    home = mp.plan.device or fleet.home
    return PerformanceEstimate(
        accuracy=acc,
        latency=t,
        energy=energy_total,
        memory=int(max(v["memory"] for v in per_device.values())),
        macs=g.total_macs,
        transfer=transfer,
        devices=devices,
        offloaded=any(d != home for d in devices),
        per_device=per_device,
    )


def estimate_plan(plan: DeploymentPlan, graph: ComputationGraph, fleet: Fleet, background_pressure: float = 0.0,
                  accuracy: AccuracyModel | None = None, memory_budget: int | None = None) -> PerformanceEstimate:
    """Estimate (A, T, E, M, C) of ``plan`` for ``graph`` on ``fleet`` (apply context with ``Fleet.with_context``)."""
    mp = materialize(plan, graph, fleet, background_pressure, memory_budget)
    return estimate_materialized(mp, fleet, background_pressure, accuracy)
