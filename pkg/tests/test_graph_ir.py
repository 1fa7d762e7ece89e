import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import diamond, fc_chain, random_dag
from hmtplan.errors import SchemaError, StructuralError
from hmtplan.ir.graph import ComputationGraph, OperatorNode, OpKind, TensorSpec, topo_sort
from hmtplan.ir.training import GRAD_PREFIX, UPDATE_PREFIX, baseline_order, gradient_chain, make_training_graph
from hmtplan.ir.zoo import ZOO_MODELS, build_zoo_model
from hmtplan.engine.memory import tensor_lifetimes


def test_tensor_bytes_and_validation():
    assert TensorSpec("t", (2, 3)).bytes == 24
    assert TensorSpec("t", (1000,), 8).bytes == 1000
    assert TensorSpec("t", (3,), 4).bytes == 2  # rounded up to whole bytes
    with pytest.raises(StructuralError):
        TensorSpec("t", (0, 3))
    with pytest.raises(StructuralError):
        TensorSpec("t", (3,), 12)


def test_constant_nodes_take_no_inputs():
    with pytest.raises(StructuralError):
        OperatorNode("k", OpKind.CONSTANT, ("x",), ("y",))


def test_topo_single_node():
    g = ComputationGraph.build([OperatorNode("only", OpKind.RELU, ("x",), ("y",))],
                               [TensorSpec("x", (1,)), TensorSpec("y", (1,))])
    assert topo_sort(g) == ["only"]


def test_topo_diamond_tie_break():
    assert topo_sort(diamond()) == ["A", "B", "C", "D"]


def test_cycle_names_back_edge():
    t = [TensorSpec(x, (1,)) for x in ("a", "b")]
    n = [OperatorNode("P", OpKind.RELU, ("b",), ("a",)), OperatorNode("Q", OpKind.RELU, ("a",), ("b",))]
    with pytest.raises(StructuralError, match="back-edge"):
        ComputationGraph.build(n, t)


def test_resnet18_order_respects_every_edge():
    g = build_zoo_model("resnet18")
    pos = {n: i for i, n in enumerate(topo_sort(g))}
    assert len(pos) == len(g.nodes)
    for producer, _, consumer in g.edges():
        assert pos[producer] < pos[consumer]
    for nid, node in g.nodes.items():
        if node.kind is OpKind.ADD:
            assert all(pos[p] < pos[nid] for p in g.predecessors(nid))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 15))
def test_topo_is_a_valid_permutation(seed, n):
    g = random_dag(np.random.default_rng(seed), n)
    order = topo_sort(g)
    assert sorted(order) == sorted(g.nodes)
    pos = {x: i for i, x in enumerate(order)}
    assert all(pos[a] < pos[b] for a, _, b in g.edges())
    assert topo_sort(g) == order


def test_fc_and_conv_counting_rules():
    g = fc_chain([100, 10])
    fc = g.nodes["fc0"]
    assert fc.macs == 1000 and fc.param_bytes == (100 * 10 + 10) * 4
    # 3x3 conv, 16 -> 32 channels, 8x8 output
    assert 8 * 8 * 32 * 16 * 9 == 294_912


# Analytic per-model totals computed layer by layer from the counting rules
# in the zoo docstring (backbone = ancestors of the final exit).
BACKBONE = {
    "resnet18": (11_689_512, 1_818_388_480),
    "resnet34": (21_797_672, 3_669_330_944),
    "vgg16": (138_357_544, 15_476_385_792),
    "mobilenetv2": (3_504_872, 307_515_104),
}


@pytest.mark.parametrize("name", sorted(BACKBONE))
def test_zoo_backbone_totals(name):
    g = build_zoo_model(name)
    keep = g.ancestors([g.exits[-1]])
    params = sum(g.nodes[n].param_bytes for n in keep) // 4
    macs = sum(g.nodes[n].macs for n in keep)
    assert (params, macs) == BACKBONE[name]


def test_vgg16_params_near_reference_count():
    g = build_zoo_model("vgg16")
    params = sum(g.nodes[n].param_bytes for n in g.ancestors([g.exits[-1]])) / 4
    assert abs(params - 138e6) / 138e6 < 0.05


def test_resnet18_conv_macs_follow_formula():
    g = build_zoo_model("resnet18")
    for n in g.nodes.values():
        if n.kind is OpKind.CONV:
            b, oc, oh, ow = g.tensors[n.outputs[0]].shape
            ic = g.tensors[n.inputs[0]].shape[1]
            k = n.attrs["kernel"]
            assert n.macs == b * oh * ow * oc * (ic // n.attrs.get("groups", 1)) * k * k


def test_unknown_zoo_model():
    with pytest.raises(StructuralError):
        build_zoo_model("alexnet")


@pytest.mark.parametrize("name", ZOO_MODELS)
def test_exit_macs_strictly_increase(name):
    g = build_zoo_model(name)
    macs = [g.exit_subgraph(k).total_macs for k in range(len(g.exits))]
    assert all(a < b for a, b in zip(macs, macs[1:]))


@pytest.mark.parametrize("name", ZOO_MODELS)
def test_json_round_trip(name):
    g = build_zoo_model(name)
    back = ComputationGraph.from_json(g.to_json())
    assert back.structurally_equal(g)
    assert set(back.nodes) == set(g.nodes) and back.edges() == g.edges()
    assert back.to_json() == g.to_json()


def test_graph_json_rejects_unknown_fields():
    doc = json.loads(fc_chain([4, 4]).to_json())
    doc["surprise"] = 1
    with pytest.raises(SchemaError):
        ComputationGraph.from_dict(doc)
    doc = json.loads(fc_chain([4, 4]).to_json())
    doc["ir_version"] = 2
    with pytest.raises(SchemaError):
        ComputationGraph.from_dict(doc)


def test_training_graph_one_layer():
    tg = make_training_graph(fc_chain([8, 4]))
    kinds = sorted(n.kind.value for n in tg.nodes.values())
    assert kinds == ["FullyConnected", "Gradient", "WeightUpdate"]
    grad = tg.nodes[GRAD_PREFIX + "fc0"]
    assert "x" in grad.inputs  # the saved activation stays live until the gradient


def test_training_chain_backward_is_reversed():
    tg = make_training_graph(fc_chain([8, 8, 8, 8]))
    assert gradient_chain(tg) == [GRAD_PREFIX + f"fc{i}" for i in (2, 1, 0)]
    order = baseline_order(tg)
    assert order[-3:] == [UPDATE_PREFIX + f"fc{i}" for i in (2, 1, 0)]


def test_training_chain_first_activation_lives_longest():
    tg = make_training_graph(fc_chain([8, 8, 8, 8]))
    lt = tensor_lifetimes(tg, baseline_order(tg))
    spans = {t: lt[t].end - lt[t].start for t in ("x", "t0", "t1")}
    assert max(spans, key=spans.get) == "x"
    assert spans["x"] > spans["t0"] > spans["t1"]


def test_training_graph_needs_inference_mode():
    tg = make_training_graph(fc_chain([4, 4]))
    with pytest.raises(StructuralError):
        make_training_graph(tg)
