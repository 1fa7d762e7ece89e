import math

import pytest
from hypothesis import given, settings, strategies as st

from hmtplan.errors import VariantError
from hmtplan.ir.graph import ComputationGraph, OperatorNode, OpKind, TensorSpec
from hmtplan.ir.zoo import build_zoo_model
from hmtplan.variants.accuracy import AccuracyModel, load_accuracy_table, predict_accuracy, predict_accuracy_detail
from hmtplan.variants.ops import CompressionOp, Family, VariantConfig, apply_variant
from hmtplan.variants.space import enumerate_design_space


def recount_macs(g: ComputationGraph) -> int:
    """Independent MAC count from tensor shapes alone (CNN node kinds)."""
    total = 0
    for n in g.nodes.values():
        out = g.tensors[n.outputs[0]].shape if n.outputs else ()
        inp = g.tensors[n.inputs[0]].shape if n.inputs else ()
        if n.kind in (OpKind.CONV, OpKind.DEPTHWISE_CONV, OpKind.POINTWISE_CONV):
            b, oc, oh, ow = out
            # a pruned conv reads only the first in_c channels of its input
            ic = min(inp[1], n.attrs["in_c"])
            total += b * oh * ow * oc * (ic // n.attrs.get("groups", 1)) * n.attrs["kernel"] ** 2
        elif n.kind is OpKind.BATCH_NORM:
            total += math.prod(out)
        elif n.kind is OpKind.POOL:
            total += math.prod(inp) if n.attrs.get("global_") else math.prod(out) * n.attrs["kernel"] ** 2
        elif n.kind is OpKind.FULLY_CONNECTED:
            total += math.prod(out) * n.attrs["in_features"]
        elif n.kind is OpKind.REDUCE:
            total += math.prod(inp)
    return total


def lone_conv(in_c=16, out_c=32) -> ComputationGraph:
    t = [TensorSpec("x", (1, in_c, 8, 8)), TensorSpec("y", (1, out_c, 8, 8))]
    n = [OperatorNode("conv", OpKind.CONV, ("x",), ("y",), macs=64 * out_c * in_c * 9, param_bytes=4 * out_c * in_c * 9,
                      attrs={"in_c": in_c, "out_c": out_c, "kernel": 3, "stride": 1, "groups": 1, "bias": False})]
    return ComputationGraph.build(n, t)


def test_identity_variant_is_unchanged():
    g = build_zoo_model("resnet18")
    out = apply_variant(g, VariantConfig(()))
    assert out.structurally_equal(g)


def test_channel_prune_half_quarters_lone_conv():
    g = lone_conv()
    out = apply_variant(g, VariantConfig((CompressionOp(Family.CHANNEL_PRUNE, 0.5),)))
    assert out.total_macs * 4 == g.total_macs


def test_low_rank_plus_depth_skip_on_mobilenetv2_matches_recount():
    g = build_zoo_model("mobilenetv2")
    assert recount_macs(g) == g.total_macs
    cfg = VariantConfig((CompressionOp(Family.LOW_RANK, 0.5), CompressionOp(Family.DEPTH_SKIP, blocks=("ir4", "ir8"))))
    out = apply_variant(g, cfg)
    assert recount_macs(out) == out.total_macs
    assert out.total_macs < g.total_macs
    assert not any(n.block in ("ir4", "ir8") for n in out.nodes.values())


@pytest.mark.parametrize("family,kw", [
    (Family.LOW_RANK, {"ratio": 0.5}),
    (Family.FIRE, {"ratio": 0.25}),
    (Family.COMPOSITE, {"ratio": 0.75, "depth": 0.6}),
    (Family.DEPTH_SKIP, {"blocks": ("layer2.1",)}),
    (Family.CHANNEL_PRUNE, {"ratio": 0.5}),
])
def test_families_never_increase_macs_and_recount(family, kw):
    g = build_zoo_model("resnet18")
    out = apply_variant(g, VariantConfig((CompressionOp(family, **kw),)))
    assert out.total_macs <= g.total_macs
    assert recount_macs(out) == out.total_macs


def test_unknown_block_rejected():
    g = build_zoo_model("resnet18")
    with pytest.raises(VariantError):
        apply_variant(g, VariantConfig((CompressionOp(Family.DEPTH_SKIP, blocks=("nope",)),)))


def test_ratio_bounds():
    with pytest.raises(VariantError):
        CompressionOp(Family.LOW_RANK, 0.0)
    with pytest.raises(VariantError):
        CompressionOp(Family.CHANNEL_PRUNE, 1.5)


def test_space_single_identity():
    g = build_zoo_model("resnet18")
    space = enumerate_design_space(g, {Family.CHANNEL_PRUNE: [CompressionOp(Family.CHANNEL_PRUNE, 1.0)]}, exits=[None])
    assert space == [VariantConfig((), None)]


def test_space_counting_and_dedup():
    g = build_zoo_model("resnet18")
    grid = {
        Family.DEPTH_SKIP: [None, CompressionOp(Family.DEPTH_SKIP, blocks=("layer4.1",))],
        Family.CHANNEL_PRUNE: [None, CompressionOp(Family.CHANNEL_PRUNE, 0.75), CompressionOp(Family.CHANNEL_PRUNE, 0.5)],
    }
    space = enumerate_design_space(g, grid, exits=[2, None])
    assert len(space) <= 12
    assert len(space) == len(set(space))
    graphs = [apply_variant(g, c) for c in space]
    for i in range(len(graphs)):
        for j in range(i + 1, len(graphs)):
            assert not graphs[i].structurally_equal(graphs[j])


def test_table_combos_from_the_accuracy_table():
    ubi = load_accuracy_table("ubisound")
    cfg = VariantConfig((CompressionOp(Family.LOW_RANK, 0.5), CompressionOp(Family.CHANNEL_PRUNE, 0.5)))
    assert predict_accuracy(ubi, cfg) == pytest.approx(ubi.base_accuracy + 1.30, abs=1e-12)
    cifar = load_accuracy_table("cifar100")
    cfg = VariantConfig((CompressionOp(Family.FIRE, 0.25), CompressionOp(Family.CHANNEL_PRUNE, 0.5)))
    assert predict_accuracy(cifar, cfg) == pytest.approx(cifar.base_accuracy - 2.10, abs=1e-12)


def test_empty_config_gives_base():
    m = load_accuracy_table("imagenet")
    assert predict_accuracy(m, VariantConfig(())) == m.base_accuracy


def test_untabulated_combo_falls_back_and_flags():
    m = load_accuracy_table("imagenet")
    cfg = VariantConfig((CompressionOp(Family.GHOST, 0.5), CompressionOp(Family.FIRE, 0.25)))
    value, meta = predict_accuracy_detail(m, cfg)
    assert meta["fallback"]
    assert value == pytest.approx(m.base_accuracy + m.op_delta(cfg.ops[0]) + m.op_delta(cfg.ops[1]))


RATIO_FAMILIES = [Family.LOW_RANK, Family.FIRE, Family.GHOST, Family.CHANNEL_PRUNE]


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.lists(st.tuples(st.sampled_from(RATIO_FAMILIES), st.floats(0.05, 1.0)),
                                    max_size=4, unique_by=lambda x: x[0]))
def test_prediction_clamped(base, ops):
    m = AccuracyModel(base_accuracy=base + 50)
    cfg = VariantConfig(tuple(CompressionOp(f, r) for f, r in ops))
    assert 0.0 <= predict_accuracy(m, cfg) <= 100.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(RATIO_FAMILIES), st.floats(0.05, 0.95)), min_size=1, max_size=3,
                unique_by=lambda x: x[0]))
def test_order_independent_and_monotone_in_fallback_regime(ops):
    m = AccuracyModel(base_accuracy=70.0)  # no tabulated combos: additive regime
    seq = [CompressionOp(f, r) for f, r in ops]
    fwd = predict_accuracy(m, VariantConfig(tuple(seq)))
    assert fwd == pytest.approx(predict_accuracy(m, VariantConfig(tuple(reversed(seq)))))
    # adding a negative-delta op never raises the prediction
    assert predict_accuracy(m, VariantConfig(tuple(seq[:-1]))) >= fwd
