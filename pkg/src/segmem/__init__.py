"""Segment-level recurrent transformers with fast-weight associative memory.

Subpackages: `nn` (numerical substrate), `assoc` (delta-rule key-value
memory), `models` (armt / rmt / prmt variants), `tasks` (remember / rewrite
generators), `trainer` (curriculum engine), `evaluator` (exact match,
capacity estimation, sweeps), `cli` (command-line tools).
"""

__version__ = "0.1.0"

from .assoc import AssociativeState, FeatureMapSpec
from .models import ModelConfig, RecurrentCarry, SegmentRecurrentModel, build_model
from .tasks import RetrievalSample, gen_remember, gen_rewrite, render
from .trainer import CurriculumStage, TrainConfig, train
from .evaluator import capacity_estimate, exact_match, sweep

__all__ = [
    "AssociativeState",
    "FeatureMapSpec",
    "ModelConfig",
    "RecurrentCarry",
    "SegmentRecurrentModel",
    "build_model",
    "RetrievalSample",
    "gen_remember",
    "gen_rewrite",
    "render",
    "CurriculumStage",
    "TrainConfig",
    "train",
    "capacity_estimate",
    "exact_match",
    "sweep",
]
