"""Transformer toolkit with gated normalization removal and norm-free export.

The library trains small causal transformers whose normalization layers can
be tapered into fixed, sample-independent maps and folded into neighboring
projections for inference, with a fixed-target scale loss available as an
explicit anchor for the pre-logit stream.
"""

from .errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    InputError,
    NumericError,
    TaperNormError,
    TrainingError,
)
from .tensor import Tape, Tensor, grad_check, no_grad
from .norms import (
    GateSchedule,
    LayerNorm,
    RMSNorm,
    TaperNorm,
    calibrate,
    count_reductions,
    ema_update,
    gate_value,
    layernorm,
    rmsnorm,
    tapernorm,
    taperln,
)
from .model import Block, Model, ModelConfig
from .objective import AuxAnchor, combined_loss, cross_entropy, scale_stat
from .data import Vocab, build_default_corpus, load_corpus, sample_batch, split_stream
from .trainer import (
    AdamW,
    RunMetrics,
    TrainConfig,
    TrainResult,
    build_model,
    evaluate_ce,
    lr_at,
    train,
)
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .fold import export_fused, export_unfused, fold_ln, fold_plan, fold_rms, max_logit_gap
from .bench import BenchConfig, count_norm_ops, run_bench, throughput_ktoks
from . import verify

__version__ = "0.1.0"
