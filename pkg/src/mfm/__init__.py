"""Masked feature modeling as an auxiliary task for domain-adaptive segmentation."""

from .metrics import ConfusionMatrix, miou
from .rebuilder import Rebuilder, RebuilderConfig, fuse, resize_mask, sample_mask
from .segmodel import SegModelMulti, SegModelSingle, supervised_loss
from .uda import ObjectiveKind, TrainConfig, Trainer, comparator_loss, ema_update, mfm_loss, pseudo_label

__version__ = "0.1.0"
