"""Layer-wise energy and latency models.

For a layer with ``C`` MACs, ``M`` bytes and cache-hit rate ``eps``::

    E = delta1*C + eps*delta2*M + (1-eps)*delta3*M + delta_sm*M      (delta_sm = 0 on CPU)
    T = [lambda1*rho*C + eps*lambda2*M + (1-eps)*lambda3*M] / freq_scale

``rho = max(1, ridge_intensity / (C/M))`` is the arithmetic-intensity factor:
layers whose MAC/byte ratio sits below the device ridge point cannot keep the
MAC units busy, so their compute term is inflated. A layer with large ``C/M``
runs at exactly ``mac_throughput`` (``lambda1 = 1/mac_throughput``).
Both sums are additive over layers and monotone in ``C``, ``M`` and ``eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from hmtplan.cost.profiles import DeviceProfile, Processor
from hmtplan.ir.graph import ComputationGraph, OpKind


@dataclass(frozen=True)
class LayerCost:
    C: float
    M: float
    eps: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        if self.C < 0 or self.M < 0:
            raise ValueError("C and M must be >= 0")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must be in [0, 1]")

    @property
    def intensity(self) -> float:
        """Arithmetic intensity C/M (MAC per byte); infinite for memory-free layers."""
        return self.C / self.M if self.M > 0 else math.inf


def cache_hit_rate(m_bytes: float, device: DeviceProfile, background_pressure: float = 0.0) -> float:
    """Share of accesses served from the cache left over by background load."""
    if not 0.0 <= background_pressure <= 1.0:
        raise ValueError("background_pressure must be in [0, 1]")
    if m_bytes <= 0:
        return 1.0
    avail = device.cache_bytes * (1.0 - background_pressure)
    return min(1.0, max(device.eps_min, avail / m_bytes))


def layer_energy(layer: LayerCost, device: DeviceProfile) -> float:
    d1, d2, d3, dsm = device.energy_coefficients
    e = d1 * layer.C + layer.eps * d2 * layer.M + (1.0 - layer.eps) * d3 * layer.M
    if device.processor is Processor.GPU:
        e += dsm * layer.M
    return e


def energy(layers: Iterable[LayerCost], device: DeviceProfile) -> float:
    return math.fsum(layer_energy(layer, device) for layer in layers)


def compute_factor(layer: LayerCost, device: DeviceProfile) -> float:
    """Roofline slowdown: how far below peak rate a layer under the ridge intensity runs."""
    if device.ridge_intensity <= 0 or layer.M <= 0 or layer.C <= 0:
        return 1.0
    return compute_term(layer, device) / layer.C


def compute_term(layer: LayerCost, device: DeviceProfile) -> float:
    """``compute_factor * C`` written as ``max(C, ridge * M)`` so tiny C cannot overflow."""
    if device.ridge_intensity <= 0 or layer.M <= 0 or layer.C <= 0:
        return layer.C
    return max(layer.C, device.ridge_intensity * layer.M)


def layer_latency(layer: LayerCost, device: DeviceProfile) -> float:
    l1, l2, l3 = device.latency_coefficients
    t = (l1 * compute_term(layer, device)
         + layer.eps * l2 * layer.M + (1.0 - layer.eps) * l3 * layer.M)
    return t / device.freq_scale


def latency(layers: Iterable[LayerCost], device: DeviceProfile) -> float:
    return math.fsum(layer_latency(layer, device) for layer in layers)


def node_terms(graph: ComputationGraph, node_id: str, include_inputs: bool = False) -> list[tuple[str, int, int]]:
    """(name, C, M) for the layers a node stands for.

    A fused node expands to its members: each keeps its own parameters and
    only the last one writes the group output, so fusion drops the internal
    tensors from the memory terms and nothing else.
    """
    n = graph.nodes[node_id]
    out_bytes = graph.tensor_bytes(n.outputs)
    in_bytes = graph.tensor_bytes(dict.fromkeys(n.inputs)) if include_inputs else 0
    if n.kind is OpKind.FUSED:
        members = n.attrs["members"]
        scale = n.param_bytes / max(1, sum(m["param_bytes"] for m in members))
        terms = []
        for i, m in enumerate(members):
            mem = math.ceil(m["param_bytes"] * scale)
            if i == len(members) - 1:
                mem += out_bytes
            if i == 0:
                mem += in_bytes
            terms.append((m["id"], m["macs"], mem))
        return terms
    return [(n.id, n.macs, n.param_bytes + out_bytes + in_bytes)]


def layer_costs(
    graph: ComputationGraph,
    device: DeviceProfile,
    background_pressure: float = 0.0,
    node_ids: Sequence[str] | None = None,
    include_inputs: bool = False,
) -> list[LayerCost]:
    """Per-layer costs in topological order (optionally restricted to ``node_ids``)."""
    ids = graph.order if node_ids is None else node_ids
    out = []
    for nid in ids:
        for name, c, m in node_terms(graph, nid, include_inputs):
            out.append(LayerCost(c, m, cache_hit_rate(m, device, background_pressure), name))
    return out


def graph_energy(graph: ComputationGraph, device: DeviceProfile, background_pressure: float = 0.0) -> float:
    return energy(layer_costs(graph, device, background_pressure), device)


def graph_latency(graph: ComputationGraph, device: DeviceProfile, background_pressure: float = 0.0) -> float:
    """Sequential roofline latency of the whole graph on one device."""
    return latency(layer_costs(graph, device, background_pressure), device)


def node_latency(graph: ComputationGraph, node_id: str, device: DeviceProfile,
                 background_pressure: float = 0.0) -> float:
    return latency(layer_costs(graph, device, background_pressure, [node_id]), device)


def node_energy(graph: ComputationGraph, node_id: str, device: DeviceProfile,
                background_pressure: float = 0.0) -> float:
    return energy(layer_costs(graph, device, background_pressure, [node_id]), device)
