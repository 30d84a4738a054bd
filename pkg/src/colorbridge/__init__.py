"""Colorization-bridged transfer learning for grayscale classification.

Three-stage pipeline: pretrain a residual encoder on an RGB source task,
train a colorizer front end to feed that encoder grayscale images it can
digest, then fine-tune the composed model on the grayscale target task.
Everything runs on a small numpy tensor library with reverse-mode
autodiff; no deep-learning framework is involved.
"""

from .autodiff import ComputeTape, NonFiniteError, ShapeMismatch, TapeError, Tensor, Variable
from .backbone import (
    ChannelReplicate,
    CheckpointError,
    ClassifierHead,
    ComposedModel,
    Encoder,
    EncoderConfig,
    TrainableFlags,
    compose,
    desk_encoder_config,
    full_scale_encoder_config,
    load_checkpoint,
    save_checkpoint,
)
from .colorizers import (
    ColorizerConfig,
    ColorizerKind,
    build_colorizer,
    colorize,
    desk_config,
    full_scale_config,
)
from .datasets import (
    LabelState,
    NormalizationStats,
    SyntheticDataset,
    SyntheticTaskSpec,
    UncertainPolicy,
    apply_policy,
    compute_norm_stats,
    generate_dataset,
    load_dataset,
    normalize_images,
    reference_split,
    reference_task_spec,
    save_dataset,
    subsample,
)
from .stats import (
    aggregate_runs,
    benjamini_hochberg,
    format_mean_std,
    mean_auc,
    paired_t_test,
    roc_auc,
)
from .training import (
    AugmentConfig,
    MissingDependencyError,
    OneCycleConfig,
    Sgd,
    SgdConfig,
    Strategy,
    StrategyConfig,
    TrainConfig,
    TrainRun,
    augment,
    build_model,
    evaluate_model,
    lr_find,
    masked_bce_loss,
    one_cycle_lr,
    pretrain_source,
    restore_model,
    run_strategy,
)

__version__ = "0.1.0"
