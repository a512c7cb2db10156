"""PPO with a dual-signal (entropy / reward-progress) adaptive clipping threshold."""
from .clipping import ClipConfig, ClipSignals, VARIANTS
from .estimator import AdaptiveClipPPO
from .trainer import RunRecord, TrainConfig, Trainer, train

__version__ = "0.1.0"
__all__ = [
    "AdaptiveClipPPO", "ClipConfig", "ClipSignals", "VARIANTS",
    "RunRecord", "TrainConfig", "Trainer", "train",
]
