"""Fixed-point CNN quantization and bit-exact inference."""

__version__ = "0.1.0"

from .fixedpoint import (  # noqa: E402
    FxpValue,
    OverflowCounter,
    QFormat,
    RoundingStrategy,
    dot9,
    fxp_add,
    fxp_mul,
    to_fixed,
)
from .nn import (  # noqa: E402
    Conv3x3,
    Dense,
    GlobalMaxPool,
    MaxPool2,
    ModelConfig,
    build_lwdd,
    infer_float,
)
from .quantization import (  # noqa: E402
    QuantizedModel,
    ReductionProfile,
    calibrated_ranges,
    quantize,
    reduce_weights,
    sweep_bitwidths,
    worst_case_ranges,
)
from .engine import infer_fxp, infer_fxp_batch, mismatch_rate, overflow_audit  # noqa: E402
from .cycles import CycleConstants, total_cycles  # noqa: E402

__all__ = [
    "FxpValue", "OverflowCounter", "QFormat", "RoundingStrategy", "dot9", "fxp_add", "fxp_mul",
    "to_fixed", "Conv3x3", "Dense", "GlobalMaxPool", "MaxPool2", "ModelConfig", "build_lwdd",
    "infer_float", "QuantizedModel", "ReductionProfile", "calibrated_ranges", "quantize",
    "reduce_weights", "sweep_bitwidths", "worst_case_ranges", "infer_fxp", "infer_fxp_batch",
    "mismatch_rate", "overflow_audit", "CycleConstants", "total_cycles",
]
