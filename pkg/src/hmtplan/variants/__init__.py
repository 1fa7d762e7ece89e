"""Compression variants, early-exit selection, design space and accuracy proxy."""
from hmtplan.variants.accuracy import AccuracyModel, load_accuracy_table, predict_accuracy, predict_accuracy_detail
from hmtplan.variants.ops import (
    FAMILY_ORDER,
    CompressionOp,
    Family,
    VariantConfig,
    apply_op,
    apply_variant,
    propagate,
    validate_variant,
)
from hmtplan.variants.space import canonical_config, enumerate_design_space

__all__ = [
    "FAMILY_ORDER", "AccuracyModel", "CompressionOp", "Family", "VariantConfig", "apply_op", "apply_variant",
    "canonical_config", "enumerate_design_space", "load_accuracy_table", "predict_accuracy",
    "predict_accuracy_detail", "propagate", "validate_variant",
]
