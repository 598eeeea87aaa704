"""Partial-spoof detection at utterance and segment level."""

from .datagen import SynthSpec, generate_corpus, load_corpus
from .evaluation import compute_eer, evaluate_scores
from .features import LFCCConfig, extract
from .model import VARIANTS, ModelConfig, build_model
from .objective import ScoreRecord, fused_loss, loss_seg, loss_utt
from .training import TrainConfig, train, warmup_expand

__all__ = [
    "LFCCConfig", "ModelConfig", "ScoreRecord", "SynthSpec", "TrainConfig", "VARIANTS", "build_model",
    "compute_eer", "evaluate_scores", "extract", "fused_loss", "generate_corpus", "load_corpus",
    "loss_seg", "loss_utt", "train", "warmup_expand",
]
__version__ = "0.1.0"
