"""More-to-less cooperative multimodal learning on wearable time series."""

from .backbone import EncoderConfig, ModalityNetwork, init_network
from .core import GateConfig, M2LConfig, full_objective, gate, train
from .data import ModalitySpec, MultimodalDataset, SyntheticConfig, generate_synthetic, subject_split
from .evaluation import compare, evaluate_reduced

__all__ = [
    "EncoderConfig",
    "GateConfig",
    "M2LConfig",
    "ModalityNetwork",
    "ModalitySpec",
    "MultimodalDataset",
    "SyntheticConfig",
    "compare",
    "evaluate_reduced",
    "full_objective",
    "gate",
    "generate_synthetic",
    "init_network",
    "subject_split",
    "train",
]
