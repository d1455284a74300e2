"""Small numpy network engine: layers with explicit backward passes, losses,
Adam, finite-difference checks and the three model families."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_module, numerical_gradient, rel_error
from .losses import bce_with_logits, dice_with_logits, loss_bce, loss_dice
from .models import DESK_PRESETS, PAPER_PRESETS, ArchSpec, Network, build_model, param_count, preset
from .ops import (
    activation_backward,
    activation_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    pool_backward,
    pool_forward,
    sigmoid,
)
from .optim import Adam, adam_step
from .train import PAPER_TRAIN, ArrayDataset, EpochRecord, TrainConfig, TrainResult, evaluate, loss_and_gradients, predict, recalibrate_batchnorm, predict_mask, train
