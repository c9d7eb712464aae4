"""CSwin UNet lesion detection: stripe attention, SSL pretraining, finetuning and lesion metrics."""
from .attention import CSwinAttention, CSwinBlock, cswin_attention, merge_stripes, partition_stripes, scaled_cosine_attention
from .augment import AugmentConfig, AugmentedPair, augment
from .checkpoint import ArchitectureMismatch, load_checkpoint, save_checkpoint
from .data import PreprocessConfig, SynthConfig, Volume, preprocess, read_volume, synth, write_volume
from .evaluation import (auroc, average_precision, evaluate, extract_candidates, holm_bonferroni, match_lesions,
                         wilcoxon_signed_rank)
from .finetune import CSwinSegmenter, FinetuneConfig, finetune
from .losses import AutomaticWeightedLoss, awl_combine, contrastive_loss, dice_focal_loss, restoration_loss, rotation_loss
from .model import CSwinConfig, CSwinUNet
from .numeric import ShapeError, grad_check
from .pretrain import PretrainConfig, SSLPretrainer, pretrain

__version__ = "0.1.0"

__all__ = [
    "ArchitectureMismatch", "AugmentConfig", "AugmentedPair", "AutomaticWeightedLoss", "CSwinAttention",
    "CSwinBlock", "CSwinConfig", "CSwinSegmenter", "CSwinUNet", "FinetuneConfig", "PreprocessConfig",
    "PretrainConfig", "SSLPretrainer", "ShapeError", "SynthConfig", "Volume", "augment", "auroc",
    "average_precision", "awl_combine", "contrastive_loss", "cswin_attention", "dice_focal_loss", "evaluate",
    "extract_candidates", "finetune", "grad_check", "holm_bonferroni", "load_checkpoint", "match_lesions",
    "merge_stripes", "partition_stripes", "preprocess", "pretrain", "read_volume", "restoration_loss",
    "rotation_loss", "save_checkpoint", "scaled_cosine_attention", "synth", "wilcoxon_signed_rank", "write_volume",
]
