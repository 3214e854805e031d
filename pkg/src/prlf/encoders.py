"""
Per-modality encoders: raw frame sequences to fixed-size token features.

Each modality (visual V, acoustic A, language L) arrives as a (T, d)
frame sequence with a boolean per-frame presence mask. Encoding is a
bias-free per-frame linear projection to the shared width D, a ReLU, and
mask-aware mean pooling over K contiguous frame segments. The bias-free
projection guarantees that a fully missing (all-zero) modality encodes to
exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractViolation

MODALITIES = ("V", "A", "L")
# Fixed preference order used wherever ties or role ordering need breaking.
MODALITY_PRIORITY = ("L", "A", "V")


@dataclass
class SampleRecord:
    """One multimodal sample: per-modality sequences, masks, and a label.

    Frames whose mask bit is cleared must hold exact zero vectors; the
    masking helpers in :mod:`prlf.datagen` maintain this.
    """

    id: str
    label: int
    sequences: dict[str, np.ndarray] = field(default_factory=dict)  # (T_m, d_m)
    masks: dict[str, np.ndarray] = field(default_factory=dict)      # (T_m,) bool
    score: float | None = None

    def validate(self) -> None:
        for m in MODALITIES:
            if m not in self.sequences or m not in self.masks:
                raise ContractViolation(f"sample {self.id}: missing modality {m}")
            seq, mask = self.sequences[m], self.masks[m]
            if seq.ndim != 2 or seq.shape[0] < 1:
                raise ContractViolation(f"sample {self.id}/{m}: bad sequence shape {seq.shape}")
            if mask.shape != (seq.shape[0],):
                raise ContractViolation(f"sample {self.id}/{m}: mask shape {mask.shape}")
            dead = ~np.asarray(mask, dtype=bool)
            if dead.any() and np.any(seq[dead] != 0.0):
                raise ContractViolation(
                    f"sample {self.id}/{m}: masked-out frames must be zero vectors")

    def copy(self) -> "SampleRecord":
        return SampleRecord(
            id=self.id,
            label=self.label,
            sequences={m: s.copy() for m, s in self.sequences.items()},
            masks={m: k.copy() for m, k in self.masks.items()},
            score=self.score,
        )


@dataclass
class TokenFeature:
    """K x D token matrix for one modality, with a liveness flag.

    ``live`` is false when the whole modality is absent, in which case the
    tokens are exactly zero.
    """

    tokens: nc.Tensor
    modality: str
    live: bool


def encode(sequence: np.ndarray, mask: np.ndarray, weight: nc.Tensor,
           tokens: int, modality: str) -> TokenFeature:
    """Project frames with ``weight`` (d x D), ReLU, segment-mean into K tokens.

    An all-false mask yields live=False and exactly-zero tokens. A segment
    whose frames are all masked pools to a zero token; live frames within
    a segment are averaged, so permuting them does not change the output.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if seq.ndim != 2:
        raise ContractViolation(f"encode: sequence must be 2-d, got {seq.shape}")
    if mask.shape != (seq.shape[0],):
        raise ContractViolation(f"encode: mask shape {mask.shape} vs {seq.shape[0]} frames")
    if seq.shape[1] != weight.data.shape[0]:
        raise ContractViolation(
            f"encode: frame dim {seq.shape[1]} does not match weight {weight.data.shape}")
    projected = nc.matmul(nc.constant(seq), weight)
    activated = nc.relu(projected)
    pooled = nc.masked_segment_mean(activated, mask, tokens)
    return TokenFeature(tokens=pooled, modality=modality, live=bool(mask.any()))


def pool(feature: TokenFeature) -> nc.Tensor:
    """Mean over the K token rows -> (D,)."""
    return nc.mean_rows(feature.tokens)
