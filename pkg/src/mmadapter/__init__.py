"""Cross-modal adapter fine-tuning and evaluation over frozen embeddings."""

from . import errors
from .adapters import (
    AdapterModel,
    AttentionMask,
    ClipAdapter,
    IdentityClip,
    MMAConfig,
    MaskedMultiHeadAttention,
    MultiModalAdapter,
    blend_and_logits,
    build_adapter,
    build_input_sequence,
    load_checkpoint,
    make_mask,
    parameter_count,
    save_checkpoint,
)
from .evaluation import (
    ClassSplit,
    EvalReport,
    evaluate,
    harmonic_mean,
    run_ablation_grid,
    run_base_new_experiment,
    run_class_share_sweep,
    run_noise_experiment,
    split_classes,
)
from .store import (
    EmbeddingStore,
    add_gaussian_noise,
    generate_synthetic,
    load_store,
    save_store,
)
from .tensor import (
    MASK_NEG_INF,
    Parameter,
    Tensor,
    backward,
    concatenate,
    cross_entropy,
    gelu,
    l2_normalize,
    matmul,
    relu,
    softmax,
    split,
)
from .trainer import Adam, Episode, TrainConfig, predict, sample_few_shot, train

__all__ = [
    "errors",
    "AdapterModel",
    "AttentionMask",
    "ClipAdapter",
    "IdentityClip",
    "MMAConfig",
    "MaskedMultiHeadAttention",
    "MultiModalAdapter",
    "blend_and_logits",
    "build_adapter",
    "build_input_sequence",
    "load_checkpoint",
    "make_mask",
    "parameter_count",
    "save_checkpoint",
    "ClassSplit",
    "EvalReport",
    "evaluate",
    "harmonic_mean",
    "run_ablation_grid",
    "run_base_new_experiment",
    "run_class_share_sweep",
    "run_noise_experiment",
    "split_classes",
    "EmbeddingStore",
    "add_gaussian_noise",
    "generate_synthetic",
    "load_store",
    "save_store",
    "MASK_NEG_INF",
    "Parameter",
    "Tensor",
    "backward",
    "concatenate",
    "cross_entropy",
    "gelu",
    "l2_normalize",
    "matmul",
    "relu",
    "softmax",
    "split",
    "Adam",
    "Episode",
    "TrainConfig",
    "predict",
    "sample_few_shot",
    "train",
]
