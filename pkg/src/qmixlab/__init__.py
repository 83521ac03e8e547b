"""qmixlab: channel-mixing compression workbench for YOLOv8-style graphs."""

from .tensor import Tensor, ParamBlock, Tape, finite_diff_check, resolve_dtype
from .layers import (
    ConvBlock,
    C2fBlock,
    SppfBlock,
    DetectHead,
    QMixBlock,
    SharedMixer,
    build_layer,
    layer_flop_count,
    layer_param_count,
)
from .arch import (
    ArchSpec,
    ModelGraph,
    SurgeryPlan,
    apply_surgery,
    build_model,
    forward_model,
    load_arch,
    load_bundled,
    parse_arch,
    resolve_scaling,
    serialize_arch,
)
from .analysis import (
    AnalysisReport,
    emit_report,
    flop_report,
    param_report,
    sparsify_unstructured,
    verify_complexity_model,
)
from .trainer import (
    AdamW,
    LossProbe,
    SyntheticTask,
    TrainConfig,
    gen_synthetic,
    run_ablation,
    shared_grad_audit,
    train,
)

__version__ = "0.1.0"
