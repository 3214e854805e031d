"""
PRLF: progressive multimodal fusion that stays robust to missing inputs.

The package trains and evaluates a three-modality (visual / acoustic /
language) classifier in which a reliability router scores each modality
per sample — classification confidence blended with the trace of the
Fisher information matrix of the modality branch — and a progressive
interaction loop aligns the auxiliary modalities to the dominant one
through importance-weighted cross attention, gated projection/residual
decomposition and residual denoising.

Library entry points live in the submodules; the ``prlf`` console script
(see :mod:`prlf.cli`) drives data generation, training, sweeps and plots.
"""

from .amre import (FisherRecord, FisherStore, ImportanceVector, fisher_importance,
                   fisher_trace, fusion_weight, modality_importance)
from .datagen import (Dataset, SynthConfig, apply_inter_mask, apply_intra_mask,
                      generate)
from .encoders import MODALITIES, SampleRecord, TokenFeature, encode, pool
from .errors import (ConfigError, ContractViolation, DataFormatError, NumericError,
                     PRLFError)
from .model import Ablation, ModelDims, ModelHyper, PRLFModel, Predictor
from .training import (Checkpoint, TrainConfig, fit, load_checkpoint,
                       save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "Ablation", "Checkpoint", "ConfigError", "ContractViolation", "Dataset",
    "DataFormatError", "FisherRecord", "FisherStore", "ImportanceVector",
    "MODALITIES", "ModelDims", "ModelHyper", "NumericError", "PRLFError",
    "PRLFModel", "Predictor", "SampleRecord", "SynthConfig", "TokenFeature",
    "TrainConfig", "apply_inter_mask", "apply_intra_mask", "encode",
    "fisher_importance", "fisher_trace", "fit", "fusion_weight", "generate",
    "load_checkpoint", "modality_importance", "pool", "save_checkpoint",
]
