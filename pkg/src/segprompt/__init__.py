"""Segmentation-map prompt tuning of a frozen vision transformer, at desk scale."""

from .backbone import (
    PretrainedBundle,
    ViTBackbone,
    ViTConfig,
    build_backbone,
    load_pretrained,
    pretext_pretrain,
    pretext_pretrain_stem,
    save_pretrained,
)
from .data import (
    FoldPlan,
    GeneratorConfig,
    Sample,
    dataset_checksum,
    degrade_mask,
    generate,
    generate_pretext,
    load_dataset,
    plan_folds,
    save_dataset,
    split_fold,
)
from .errors import ConfigurationError, ContractError, DimensionError
from .metrics import AggregateReport, MetricsReport, aggregate, compute, dice
from .model import (
    ModelConfig,
    PromptSet,
    SegEncoder,
    SegMap,
    StoneClassifier,
    TokenSequence,
    TuningMode,
    assemble,
    binarize,
    crop_to_foreground,
    encode_segmap,
)
from .optim import Adam
from .tensor import Tape, Tensor, backward
from .trainer import (
    CVResult,
    TrainConfig,
    TrainReport,
    evaluate,
    run_cross_validation,
    train_fold,
)

__version__ = "0.1.0"
