"""clinfuse: clinical-attention fusion classifier for image + tabular data."""

from .tensor import (
    Tensor,
    RunningStats,
    ShapeError,
    NonFiniteError,
    GraphError,
    add,
    relu,
    sigmoid,
    fully_connected,
    conv2d,
    batch_norm,
    global_avg_pool,
    channel_scale,
    concat_channels,
    softmax,
    cross_entropy_loss,
    tensor_sum,
    backward,
    computation_record,
    finite_difference_check,
)
from .model import (
    ModelConfig,
    ModelParams,
    Variant,
    tiny_config,
    clinical_encoder_forward,
    clinical_attention_forward,
    residual_block_forward,
    backbone_forward,
    decision_head_forward,
    model_forward,
    named_parameters,
    named_running_stats,
    count_parameters,
)
from .training import (
    TrainConfig,
    AdamState,
    he_init,
    init_model_params,
    adam_step,
    train,
    resume_training,
    checkpoint_save,
    checkpoint_load,
    TrainingAborted,
    CheckpointError,
    ConfigError,
)
from .data import (
    Dataset,
    DatasetMeta,
    PatientRecord,
    SynthSpec,
    FoldAssignment,
    NormalizationStats,
    DatasetError,
    synth_generate,
    save_dataset,
    load_dataset,
    compute_normalization_stats,
    preprocess,
    bilinear_resize,
    kfold_split,
    slice_arrays,
    signal_region,
)
from .evaluation import (
    ConfusionCounts,
    MetricsReport,
    confusion,
    metrics,
    evaluate_model,
    cross_validate,
    ablation_run,
)
from .seeding import derive_seed

__version__ = "0.1.0"
