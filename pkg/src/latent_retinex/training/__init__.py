from .losses import loss_con, loss_diff, loss_ill, loss_rec, loss_ref, loss_scc
from .optim import AdamState, NonFiniteGradient, adam_step
from .stages import (
    LossWeights,
    Stage1Report,
    Stage2Features,
    TrainConfig,
    TrainResult,
    stage1_report,
    stage2_features,
    train_stage1,
    train_stage2,
)

__all__ = [
    "AdamState", "LossWeights", "NonFiniteGradient", "Stage1Report", "Stage2Features", "TrainConfig",
    "TrainResult", "adam_step", "loss_con", "loss_diff", "loss_ill", "loss_rec",
    "loss_ref", "loss_scc", "stage1_report", "stage2_features", "train_stage1", "train_stage2",
]
