"""Desk-scale hybrid adaptation laboratory.

A frozen base language model acquires multimodal capability through fully
trained copies of scheduled transformer blocks plus low-rank adapters on the
rest, and deploys with separated base/delta artifacts so the pure-text path
binds the pristine base weights.
"""

from .autograd import GradTape, NonFiniteError, ShapeMismatch, Tensor, backward
from .adaptation import (
    HybridModel,
    LoraAdapter,
    PlacementSchedule,
    VisualExpertModel,
    build_cogvlm,
    build_full_lora,
    build_genieblue,
    count_trainable,
    freeze_mask,
    merge_lora,
    plan_placement,
)
from .data import Dataset, Sample, TaskSpec, collate, read_cache, synth_dataset, write_cache
from .model import (
    ModelConfig,
    MultimodalBase,
    TokenBatch,
    build_model,
    encode_and_project,
    forward_lm,
)
from .optim import AdamWHyper, AdamWState, LrSchedule, adamw_step, lr_at
from .training import StageConfig, TrainReport, cross_entropy, layerwise_lr, run_stage

__version__ = "0.1.0"
