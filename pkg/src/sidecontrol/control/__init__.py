"""Side networks over a frozen base LM: fusion, knowledge copy/coverage, label control."""
from .generate import ControlledDecoder, ControlledOutput, generate_controlled
from .nets import (
    AttributeClassifier,
    CompatibilityError,
    FrozenClassifierError,
    KnowledgeSideNet,
    LabelSideNet,
    SideBatch,
    SideOutput,
    collate,
    load_side,
    side_net_for,
)
from .ops import (
    attend,
    classifier_loss,
    cclm_loss,
    cclm_loss_from_gold,
    copy_gate,
    copy_mix,
    coverage_loss,
    coverage_terms,
    encode_knowledge,
    fuse,
    knowledge_side_step,
    label_side_rep,
    total_objective,
)
from .train import (
    DEFAULT_LAMBDA,
    KNOWLEDGE_LAMBDA_GRID,
    LABEL_LAMBDA_GRID,
    CachedSet,
    ClassifierConfig,
    SideTrainResult,
    TrainingConfig,
    cache_states,
    classifier_accuracy,
    default_grid,
    evaluate_side,
    pretrain_classifier,
    side_losses,
    train_side,
)

__all__ = [name for name in dir() if not name.startswith("_")]
