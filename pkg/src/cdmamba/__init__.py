"""Change detection on bi-temporal image pairs with a selective state-space
encoder-decoder, built on a small numpy autodiff engine."""

from . import autodiff
from .autodiff import Tensor, grad_check, no_grad, set_debug_guard
from .blocks import AGLGF, GGF, LGF, BlockConfig, ConvMamba, SRCM
from .data import SamplePair, load_pair, patch_split, synth_generate
from .model import CDMamba, ModelConfig, load_checkpoint, save_checkpoint
from .ssm import SelectiveSSM, scan_convolution_oracle, ssm_scan, zoh_discretize
from .training import (Adam, ConfusionCounts, LossConfig, MetricReport, ce_loss,
                       confusion, dice_loss, evaluate, metrics, total_loss, train_loop)

__version__ = "0.1.0"

__all__ = [
    "AGLGF",
    "Adam",
    "BlockConfig",
    "CDMamba",
    "ConfusionCounts",
    "ConvMamba",
    "GGF",
    "LGF",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "SRCM",
    "SamplePair",
    "SelectiveSSM",
    "Tensor",
    "autodiff",
    "ce_loss",
    "confusion",
    "dice_loss",
    "evaluate",
    "grad_check",
    "load_checkpoint",
    "load_pair",
    "metrics",
    "no_grad",
    "patch_split",
    "save_checkpoint",
    "scan_convolution_oracle",
    "set_debug_guard",
    "ssm_scan",
    "synth_generate",
    "total_loss",
    "train_loop",
    "zoh_discretize",
]
