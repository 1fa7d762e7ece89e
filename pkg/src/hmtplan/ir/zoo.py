"""Synthetic model zoo with analytic MAC / parameter counts.

The graphs are structural analogs of the torchvision models (no weights).
Counting rules, per node, with B the batch size:

* Conv / PointwiseConv / DepthwiseConv: ``B * oh * ow * oc * (ic / groups) * k^2`` MACs,
  ``oc * (ic / groups) * k^2`` weights plus ``oc`` biases when ``bias`` is set.
* FullyConnected: ``B * rows * in * out`` MACs, ``in * out + out`` parameters.
  Attention matmuls are FullyConnected nodes with ``attrs["op"] == "matmul"`` and
  no parameters.
* BatchNorm (``norm="batch"`` or ``"layer"``): one MAC per output element,
  ``2 * C`` parameters (scale and shift).
* Pool: ``B * oh * ow * c * k^2`` MACs (global pooling reads every input element once).
* Reduce (mean over tokens, softmax): one MAC per input element.
* ReLU / Sigmoid / Tanh / Add / Concat / ExitBranch: no MACs.

Parameters are 4 bytes each. Every model has early-exit heads
(global pool -> FullyConnected -> ExitBranch); the final classifier is the last exit.

Backbone totals (ancestors of the final exit, 3x224x224 input, 1000 classes,
batch 1); the parameter counts match the well-known ones::

    resnet18     11,689,512 params   1,818,388,480 MACs
    resnet34     21,797,672 params   3,669,330,944 MACs
    vgg16       138,357,544 params  15,476,385,792 MACs
    mobilenetv2   3,504,872 params     307,515,104 MACs
    transformer   4,741,130 params     655,133,184 MACs  (1x128x256 tokens, 10 classes)

Whole graphs including the early-exit heads: resnet18 1,819,187,712 MACs,
resnet34 3,670,130,176, vgg16 15,477,984,256, mobilenetv2 307,687,008,
transformer 655,203,840.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator

from hmtplan.errors import StructuralError
from hmtplan.ir.graph import Block, ComputationGraph, OperatorNode, OpKind, TensorSpec

ZOO_MODELS = ("resnet18", "resnet34", "vgg16", "mobilenetv2", "transformer")
PARAM_BYTES = 4


class GraphBuilder:
    """Incrementally builds a zoo graph; node ids sort in creation order."""

    def __init__(self, name: str, input_shape: tuple[int, ...]) -> None:
        self.name = name
        self._nodes: list[OperatorNode] = []
        self._tensors: dict[str, TensorSpec] = {}
        self._blocks: list[Block] = []
        self._block: str | None = None
        self._block_nodes: list[str] = []
        self.exits: list[str] = []
        self.input = self._new_tensor("input", input_shape)

    def _new_tensor(self, tid: str, shape: tuple[int, ...]) -> str:
        self._tensors[tid] = TensorSpec(tid, shape)
        return tid

    def shape(self, tid: str) -> tuple[int, ...]:
        return self._tensors[tid].shape

    def add(
        self,
        kind: OpKind,
        label: str,
        inputs: list[str],
        out_shape: tuple[int, ...],
        macs: int = 0,
        params: int = 0,
        **attrs,
    ) -> str:
        nid = f"{len(self._nodes):04d}.{label}"
        out = self._new_tensor(nid + ":0", out_shape)
        self._nodes.append(
            OperatorNode(nid, kind, tuple(inputs), (out,), int(macs), int(params) * PARAM_BYTES, attrs, self._block)
        )
        if self._block is not None:
            self._block_nodes.append(nid)
        return out

    @contextmanager
    def block(self, block_id: str, x: str, skippable: bool = False) -> Iterator[list[str]]:
        """Collect nodes into ``block_id``; the caller appends the block output to the yielded list."""
        prev_block, prev_nodes = self._block, self._block_nodes
        self._block, self._block_nodes = block_id, []
        out: list[str] = []
        try:
            yield out
        finally:
            output = out[-1] if out else None
            ok = skippable and output is not None and self.shape(output) == self.shape(x)
            self._blocks.append(Block(block_id, tuple(self._block_nodes), x, output, ok))
            self._block, self._block_nodes = prev_block, prev_nodes

    # -- layers ---------------------------------------------------------------

    def conv(self, x: str, out_c: int, k: int, stride: int = 1, groups: int = 1,
             bias: bool = False, label: str = "conv") -> str:
        b, c, h, w = self.shape(x)
        if c % groups or out_c % groups:
            raise StructuralError(f"{label}: channels not divisible by groups")
        pad = k // 2
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        if groups == c and groups == out_c and groups > 1:
            kind = OpKind.DEPTHWISE_CONV
        elif k == 1:
            kind = OpKind.POINTWISE_CONV
        else:
            kind = OpKind.CONV
        macs = b * oh * ow * out_c * (c // groups) * k * k
        params = out_c * (c // groups) * k * k + (out_c if bias else 0)
        return self.add(kind, label, [x], (b, out_c, oh, ow), macs, params,
                        in_c=c, out_c=out_c, kernel=k, stride=stride, groups=groups, bias=bias)

    def bn(self, x: str, label: str = "bn", norm: str = "batch") -> str:
        shape = self.shape(x)
        channels = shape[1] if norm == "batch" else shape[-1]
        return self.add(OpKind.BATCH_NORM, label, [x], shape, math.prod(shape), 2 * channels,
                        norm=norm, channels=channels)

    def act(self, x: str, label: str = "relu", fn: str = "relu") -> str:
        kind = {"relu": OpKind.RELU, "relu6": OpKind.RELU, "gelu": OpKind.RELU,
                "sigmoid": OpKind.SIGMOID, "tanh": OpKind.TANH}[fn]
        return self.add(kind, label, [x], self.shape(x), fn=fn)

    def add_(self, a: str, b: str, label: str = "add") -> str:
        return self.add(OpKind.ADD, label, [a, b], self.shape(a))

    def pool(self, x: str, k: int, stride: int, pad: int = 0, mode: str = "max",
             label: str = "pool") -> str:
        b, c, h, w = self.shape(x)
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        return self.add(OpKind.POOL, label, [x], (b, c, oh, ow), b * oh * ow * c * k * k,
                        mode=mode, kernel=k, stride=stride, pad=pad)

    def global_pool(self, x: str, label: str = "gap") -> str:
        shape = self.shape(x)
        if len(shape) == 4:
            b, c, h, w = shape
            return self.add(OpKind.POOL, label, [x], (b, c), b * c * h * w, mode="avg", kernel=h, stride=1,
                            global_=True)
        b, l, d = shape
        return self.add(OpKind.REDUCE, label, [x], (b, d), b * l * d, reduce="mean")

    def fc(self, x: str, out: int, label: str = "fc") -> str:
        shape = self.shape(x)
        b = shape[0]
        if len(shape) == 3:  # token-wise projection
            rows, fin = shape[1], shape[2]
            out_shape: tuple[int, ...] = (b, rows, out)
        else:
            rows, fin = 1, math.prod(shape[1:])
            out_shape = (b, out)
        return self.add(OpKind.FULLY_CONNECTED, label, [x], out_shape, b * rows * fin * out,
                        fin * out + out, in_features=fin, out_features=out)

    def matmul(self, a: str, b_: str, out_shape: tuple[int, ...], macs: int, label: str) -> str:
        return self.add(OpKind.FULLY_CONNECTED, label, [a, b_], out_shape, macs, 0, op="matmul")

    def softmax(self, x: str, label: str = "softmax") -> str:
        return self.add(OpKind.REDUCE, label, [x], self.shape(x), math.prod(self.shape(x)), reduce="softmax")

    def exit_head(self, x: str, classes: int, index: int, final: bool = False) -> str:
        with self.block(f"exit{index}" if not final else "head", x) as out:
            y = x
            if len(self.shape(y)) != 2:
                y = self.global_pool(y, label=f"exit{index}.gap" if not final else "head.gap")
            y = self.fc(y, classes, label=f"exit{index}.fc" if not final else "head.fc")
            y = self.add(OpKind.EXIT_BRANCH, f"exit{index}", [y], self.shape(y), exit_index=index)
            out.append(y)
        self.exits.append(self._nodes[-1].id)
        return y

    def finish(self) -> ComputationGraph:
        return ComputationGraph.build(self._nodes, self._tensors.values(), self.exits,
                                      blocks=self._blocks, name=self.name)


def _resnet(name: str, layers: tuple[int, ...], input_shape, classes: int) -> ComputationGraph:
    g = GraphBuilder(name, input_shape)
    with g.block("stem", g.input) as out:
        x = g.conv(g.input, 64, 7, 2, label="stem.conv")
        x = g.bn(x, "stem.bn")
        x = g.act(x, "stem.relu")
        x = g.pool(x, 3, 2, 1, label="stem.maxpool")
        out.append(x)
    in_c = 64
    n_exit = 0
    for stage, (blocks, width) in enumerate(zip(layers, (64, 128, 256, 512)), start=1):
        for i in range(blocks):
            stride = 2 if (i == 0 and stage > 1) else 1
            bid = f"layer{stage}.{i}"
            identity = stride == 1 and in_c == width
            with g.block(bid, x, skippable=identity) as out:
                y = g.conv(x, width, 3, stride, label=f"{bid}.conv1")
                y = g.bn(y, f"{bid}.bn1")
                y = g.act(y, f"{bid}.relu1")
                y = g.conv(y, width, 3, 1, label=f"{bid}.conv2")
                y = g.bn(y, f"{bid}.bn2")
                if identity:
                    sc = x
                else:
                    sc = g.conv(x, width, 1, stride, label=f"{bid}.down.conv")
                    sc = g.bn(sc, f"{bid}.down.bn")
                y = g.add_(y, sc, f"{bid}.add")
                y = g.act(y, f"{bid}.relu2")
                out.append(y)
            x, in_c = y, width
        if stage < len(layers):
            g.exit_head(x, classes, n_exit)
            n_exit += 1
    g.exit_head(x, classes, n_exit, final=True)
    return g.finish()


_VGG16_CFG = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def _vgg16(input_shape, classes: int) -> ComputationGraph:
    g = GraphBuilder("vgg16", input_shape)
    x = g.input
    in_c = input_shape[1]
    n_exit = 0
    for s, widths in enumerate(_VGG16_CFG, start=1):
        for i, width in enumerate(widths, start=1):
            bid = f"conv{s}_{i}"
            with g.block(bid, x, skippable=(in_c == width)) as out:
                y = g.conv(x, width, 3, 1, bias=True, label=f"{bid}.conv")
                y = g.act(y, f"{bid}.relu")
                out.append(y)
            x, in_c = y, width
        with g.block(f"pool{s}", x) as out:
            x = g.pool(x, 2, 2, label=f"pool{s}")
            out.append(x)
        if s in (2, 3, 4):
            g.exit_head(x, classes, n_exit)
            n_exit += 1
    with g.block("classifier", x) as out:
        y = g.fc(x, 4096, "classifier.fc1")
        y = g.act(y, "classifier.relu1")
        y = g.fc(y, 4096, "classifier.fc2")
        y = g.act(y, "classifier.relu2")
        out.append(y)
    g.exit_head(y, classes, n_exit, final=True)
    return g.finish()


_MBV2_CFG = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
             (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def _mobilenetv2(input_shape, classes: int) -> ComputationGraph:
    g = GraphBuilder("mobilenetv2", input_shape)
    with g.block("stem", g.input) as out:
        x = g.conv(g.input, 32, 3, 2, label="stem.conv")
        x = g.bn(x, "stem.bn")
        x = g.act(x, "stem.relu", fn="relu6")
        out.append(x)
    in_c = 32
    idx = 0
    n_exit = 0
    for stage, (t, c, n, s) in enumerate(_MBV2_CFG):
        for i in range(n):
            stride = s if i == 0 else 1
            bid = f"ir{idx}"
            residual = stride == 1 and in_c == c
            hidden = in_c * t
            with g.block(bid, x, skippable=residual) as out:
                y = x
                if t != 1:
                    y = g.conv(y, hidden, 1, label=f"{bid}.expand")
                    y = g.bn(y, f"{bid}.expand.bn")
                    y = g.act(y, f"{bid}.expand.relu", fn="relu6")
                y = g.conv(y, hidden, 3, stride, groups=hidden, label=f"{bid}.dw")
                y = g.bn(y, f"{bid}.dw.bn")
                y = g.act(y, f"{bid}.dw.relu", fn="relu6")
                y = g.conv(y, c, 1, label=f"{bid}.project")
                y = g.bn(y, f"{bid}.project.bn")
                if residual:
                    y = g.add_(y, x, f"{bid}.add")
                out.append(y)
            x, in_c = y, c
            idx += 1
        if c in (32, 96):
            g.exit_head(x, classes, n_exit)
            n_exit += 1
    with g.block("last", x) as out:
        x = g.conv(x, 1280, 1, label="last.conv")
        x = g.bn(x, "last.bn")
        x = g.act(x, "last.relu", fn="relu6")
        out.append(x)
    g.exit_head(x, classes, n_exit, final=True)
    return g.finish()


def _transformer(input_shape, classes: int, layers: int = 6, heads: int = 4) -> ComputationGraph:
    """Encoder-only block chain over ``(B, L, d)`` token embeddings."""
    g = GraphBuilder("transformer", input_shape)
    b, seq, d = input_shape
    x = g.input
    n_exit = 0
    for i in range(layers):
        bid = f"block{i}"
        with g.block(bid, x, skippable=True) as out:
            h = g.bn(x, f"{bid}.ln1", norm="layer")
            q = g.fc(h, d, f"{bid}.q")
            k = g.fc(h, d, f"{bid}.k")
            v = g.fc(h, d, f"{bid}.v")
            scores = g.matmul(q, k, (b, heads, seq, seq), b * seq * seq * d, f"{bid}.scores")
            probs = g.softmax(scores, f"{bid}.softmax")
            ctx = g.matmul(probs, v, (b, seq, d), b * seq * seq * d, f"{bid}.context")
            o = g.fc(ctx, d, f"{bid}.proj")
            x1 = g.add_(o, x, f"{bid}.add1")
            h2 = g.bn(x1, f"{bid}.ln2", norm="layer")
            f = g.fc(h2, 4 * d, f"{bid}.ffn1")
            f = g.act(f, f"{bid}.gelu", fn="gelu")
            f = g.fc(f, d, f"{bid}.ffn2")
            y = g.add_(f, x1, f"{bid}.add2")
            out.append(y)
        x = y
        if i in (layers // 3 - 1, 2 * layers // 3 - 1):
            g.exit_head(x, classes, n_exit)
            n_exit += 1
    g.exit_head(x, classes, n_exit, final=True)
    return g.finish()


DEFAULT_INPUT = {
    "resnet18": (1, 3, 224, 224),
    "resnet34": (1, 3, 224, 224),
    "vgg16": (1, 3, 224, 224),
    "mobilenetv2": (1, 3, 224, 224),
    "transformer": (1, 128, 256),
}


def build_zoo_model(name: str, input_shape: tuple[int, ...] | None = None,
                    classes: int | None = None) -> ComputationGraph:
    """Build a zoo graph by name (``resnet18``, ``resnet34``, ``vgg16``, ``mobilenetv2``, ``transformer``)."""
    key = name.lower().removeprefix("zoo:")
    if key not in ZOO_MODELS:
        raise StructuralError(f"unsupported zoo model {name!r}; choose from {', '.join(ZOO_MODELS)}")
    shape = tuple(input_shape) if input_shape is not None else DEFAULT_INPUT[key]
    if key == "transformer":
        if len(shape) != 3:
            raise StructuralError("transformer input_shape must be (batch, tokens, width)")
        return _transformer(shape, classes or 10)
    if len(shape) != 4:
        raise StructuralError(f"{key} input_shape must be (batch, channels, height, width)")
    classes = classes or 1000
    if key == "resnet18":
        return _resnet(key, (2, 2, 2, 2), shape, classes)
    if key == "resnet34":
        return _resnet(key, (3, 4, 6, 3), shape, classes)
    if key == "vgg16":
        return _vgg16(shape, classes)
    return _mobilenetv2(shape, classes)
