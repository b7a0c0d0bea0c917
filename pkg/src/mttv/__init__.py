"""Fused-pair contrastive pretraining for long-tailed data."""

from .config import (
    ConfigError,
    DataConfig,
    OptimizerConfig,
    RunConfig,
    ScheduleConfig,
    cifar_preset,
    load_config,
    save_config,
    toy_preset,
)
from .core import (
    FusedPairBatch,
    FusionKind,
    InfoRatios,
    InfoVolumeModel,
    LossConfig,
    build_fused_pairs,
    cosine_similarity_matrix,
    elimination_rate,
    fuse,
    info_ratios,
    mi_lower_bound,
    mttv_loss,
    nt_xent_loss,
    option_pairs,
    threshold_mask,
)
from .data import (
    ClassCountProfile,
    DistributionKind,
    LabeledDataset,
    SubsampleSpec,
    SyntheticLTConfig,
    build_exponential_counts,
    build_pareto_counts,
    generate_synthetic_eval,
    generate_synthetic_lt,
    read_manifest,
    stratified_subsample,
    write_manifest,
)
from .encoders import (
    Encoder,
    EncoderSpec,
    MomentumPair,
    build_encoder,
    ema_update,
    encode,
    forward_quadruple,
    parameter_fingerprint,
)
from .evaluation import (
    FeatureBank,
    GroupPartition,
    GroupReport,
    RunTracker,
    compute_feature_bank,
    group_partition,
    knn_evaluate,
    linear_probe,
    load_metrics,
)
from .training import (
    CollapseError,
    NumericsError,
    PretrainResult,
    analyze_options,
    evaluate_checkpoint,
    learning_rate,
    pretrain,
)
from .views import (
    AugmentationPolicy,
    ImageBatch,
    NormalizationStats,
    TransformSpec,
    ViewQuadruple,
    augmented_view,
    default_image_policy,
    default_vector_policy,
    denormalize_view,
    identity_policy,
    make_view_quadruples,
    normalized_view,
    sample_counterparts,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
