"""Training-graph construction: one gradient and one update node per parameterized layer."""
from __future__ import annotations

from hmtplan.errors import StructuralError
from hmtplan.ir.graph import ComputationGraph, Mode, OperatorNode, OpKind, TensorSpec

GRAD_PREFIX = "~grad/"
UPDATE_PREFIX = "~update/"


def make_training_graph(graph: ComputationGraph) -> ComputationGraph:
    """Mirror the forward graph with a linearized backward chain.

    Backward nodes run over the parameterized forward nodes in reverse
    topological order. Gradient node ``g_f`` reads the saved input activation
    of ``f`` (what the weight gradient needs) and the upstream activation
    gradient, and emits a weight gradient (``param_bytes`` large) plus the
    activation gradient for the next backward node. Update node ``u_f``
    consumes the weight gradient.
    """
    if graph.mode is not Mode.INFERENCE:
        raise StructuralError("make_training_graph expects an InferenceOnly graph")
    params = [nid for nid in graph.order if graph.nodes[nid].param_bytes > 0]
    nodes = dict(graph.nodes)
    tensors = dict(graph.tensors)
    upstream = list(graph.output_tensors)
    for nid in reversed(params):
        fwd = graph.nodes[nid]
        saved = fwd.inputs or fwd.outputs
        wgrad = TensorSpec(f"{GRAD_PREFIX}{nid}:w", (max(1, fwd.param_bytes // 4),))
        in_shape = graph.tensors[saved[0]].shape
        agrad = TensorSpec(f"{GRAD_PREFIX}{nid}:a", in_shape)
        tensors[wgrad.id] = wgrad
        tensors[agrad.id] = agrad
        gid = GRAD_PREFIX + nid
        nodes[gid] = OperatorNode(
            gid,
            OpKind.GRADIENT,
            tuple(dict.fromkeys([*saved, *upstream])),
            (wgrad.id, agrad.id),
            macs=2 * fwd.macs,
            attrs={"role": "gradient", "forward": nid},
            block=fwd.block,
        )
        uid = UPDATE_PREFIX + nid
        nodes[uid] = OperatorNode(
            uid,
            OpKind.WEIGHT_UPDATE,
            (wgrad.id,),
            (),
            macs=fwd.param_bytes // 4,
            attrs={"role": "update", "forward": nid},
            block=fwd.block,
        )
        upstream = [agrad.id]
    return graph.evolve(nodes=nodes, tensors=tensors, mode=Mode.TRAINING)


def forward_part(graph: ComputationGraph) -> ComputationGraph:
    """The inference graph a training graph was built from."""
    if graph.mode is not Mode.TRAINING:
        return graph
    keep = [nid for nid, n in graph.nodes.items() if n.kind not in (OpKind.GRADIENT, OpKind.WEIGHT_UPDATE)]
    return graph.subgraph(keep).evolve(mode=Mode.INFERENCE)


def gradient_chain(graph: ComputationGraph) -> list[str]:
    """Gradient node ids in backward execution order."""
    if graph.mode is not Mode.TRAINING:
        raise StructuralError("not a training graph")
    fwd_order = [nid for nid in graph.order if graph.nodes[nid].kind not in (OpKind.GRADIENT, OpKind.WEIGHT_UPDATE)]
    return [GRAD_PREFIX + nid for nid in reversed(fwd_order) if GRAD_PREFIX + nid in graph.nodes]


def baseline_order(graph: ComputationGraph) -> list[str]:
    """Conventional training order: forward pass, every gradient, then every update."""
    grads = gradient_chain(graph)
    forward = [nid for nid in graph.order if graph.nodes[nid].kind not in (OpKind.GRADIENT, OpKind.WEIGHT_UPDATE)]
    updates = [UPDATE_PREFIX + g.removeprefix(GRAD_PREFIX) for g in grads]
    return forward + grads + updates
