from hmtplan.ir.graph import (
    CONV_KINDS,
    ELEMENTWISE,
    Block,
    ComputationGraph,
    Mode,
    OperatorNode,
    OpKind,
    TensorSpec,
    topo_sort,
)
from hmtplan.ir.training import baseline_order, forward_part, make_training_graph
from hmtplan.ir.zoo import ZOO_MODELS, build_zoo_model

__all__ = [
    "CONV_KINDS",
    "ELEMENTWISE",
    "Block",
    "ComputationGraph",
    "Mode",
    "OperatorNode",
    "OpKind",
    "TensorSpec",
    "ZOO_MODELS",
    "baseline_order",
    "build_zoo_model",
    "forward_part",
    "make_training_graph",
    "topo_sort",
]
