"""
Synthetic multimodal datasets with controlled ground truth, plus masking.

Each generated sample carries the label signal in exactly one designated
"informative" modality: a per-class prototype direction is embedded into a
few designated key frames at amplitude 3 * noise_scale, everything else is
zero-mean Gaussian noise. Which modality is informative, and which frames
are key, is recorded in a ground-truth sidecar that the model path never
sees (SampleRecord stays signal-only).

Masking protocols:
  * intra-modality: every frame of every modality dropped independently
    with probability p (dropped frames zeroed, mask bit cleared),
  * inter-modality: modalities outside a given subset zeroed entirely.

Per-frame uniforms are drawn once per (rng stream, modality) in a fixed
order, so two calls with the same stream and increasing p produce nested
drop sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import MODALITIES, SampleRecord
from .errors import ContractViolation, DataFormatError
from .seeding import make_rng

DATASET_FORMAT = "prlf-dataset"
DATASET_VERSION = 1
TRUTH_SUFFIX = ".truth"

DEFAULT_SEQ_LENS = {"V": 16, "A": 16, "L": 16}
DEFAULT_FEAT_DIMS = {"V": 20, "A": 20, "L": 32}
# Mirrors language dominance in common benchmarks while leaving the router
# real work on the other half of the samples.
DEFAULT_INFORMATIVE_PROBS = {"V": 0.25, "A": 0.25, "L": 0.5}
SIGNAL_AMPLITUDE_FACTOR = 3.0


@dataclass(frozen=True)
class SynthConfig:
    samples: int = 1000
    classes: int = 2
    seq_lens: dict = field(default_factory=lambda: dict(DEFAULT_SEQ_LENS))
    feat_dims: dict = field(default_factory=lambda: dict(DEFAULT_FEAT_DIMS))
    noise_scale: float = 1.0
    key_frames: int = 4
    informative_probs: dict = field(
        default_factory=lambda: dict(DEFAULT_INFORMATIVE_PROBS))
    with_scores: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.samples < 1 or self.classes < 2:
            raise ContractViolation("SynthConfig: need samples >= 1 and classes >= 2")
        if self.noise_scale <= 0:
            raise ContractViolation("SynthConfig: noise_scale must be positive")
        for m in MODALITIES:
            if self.key_frames > self.seq_lens[m]:
                raise ContractViolation(
                    f"SynthConfig: key_frames {self.key_frames} exceeds T_{m}")
        total = sum(self.informative_probs[m] for m in MODALITIES)
        if abs(total - 1.0) > 1e-9 or any(self.informative_probs[m] < 0 for m in MODALITIES):
            raise ContractViolation("SynthConfig: informative_probs must be a distribution")


@dataclass
class GroundTruth:
    """Generator-side metadata for one sample; never enters the model path."""

    id: str
    informative: str
    key_frames: list[int]


@dataclass
class Dataset:
    samples: list[SampleRecord]
    split: str = "train"
    classes: int = 2
    provenance: dict = field(default_factory=dict)
    truth: dict[str, GroundTruth] | None = None

    def shapes(self) -> dict:
        first = self.samples[0]
        return {m: list(first.sequences[m].shape) for m in MODALITIES}

    def by_id(self) -> dict[str, SampleRecord]:
        return {s.id: s for s in self.samples}


def class_score(label: int, classes: int) -> float:
    """Map a class index linearly onto [-1, 1] for MAE-style evaluation."""
    if classes < 2:
        raise ContractViolation("class_score: need at least 2 classes")
    return 2.0 * label / (classes - 1) - 1.0


def _class_prototypes(config: SynthConfig) -> dict[str, np.ndarray]:
    """Fixed unit direction per (modality, class), from the config seed only."""
    protos = {}
    for m in MODALITIES:
        rng = make_rng(config.seed, "prototype", m)
        raw = rng.normal(size=(config.classes, config.feat_dims[m]))
        protos[m] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return protos


def generate(config: SynthConfig, split: str = "train",
             id_prefix: str | None = None) -> Dataset:
    """Draw a dataset per the config; deterministic in (seed, split)."""
    config.validate()
    protos = _class_prototypes(config)
    amplitude = SIGNAL_AMPLITUDE_FACTOR * config.noise_scale
    prefix = id_prefix if id_prefix is not None else (split[:2] if split else "s")
    mod_probs = np.array([config.informative_probs[m] for m in MODALITIES])

    samples: list[SampleRecord] = []
    truth: dict[str, GroundTruth] = {}
    for i in range(config.samples):
        sid = f"{prefix}-{i:05d}"
        rng = make_rng(config.seed, "sample", split, sid)
        label = int(rng.integers(config.classes))
        informative = MODALITIES[int(rng.choice(len(MODALITIES), p=mod_probs))]
        sequences, masks = {}, {}
        key: list[int] = []
        for m in MODALITIES:
            t, d = config.seq_lens[m], config.feat_dims[m]
            seq = rng.normal(scale=config.noise_scale, size=(t, d))
            if m == informative:
                key = sorted(rng.choice(t, size=config.key_frames, replace=False).tolist())
                seq[key] += amplitude * protos[m][label]
            sequences[m] = seq
            masks[m] = np.ones(t, dtype=bool)
        score = class_score(label, config.classes) if config.with_scores else None
        samples.append(SampleRecord(id=sid, label=label, sequences=sequences,
                                    masks=masks, score=score))
        truth[sid] = GroundTruth(id=sid, informative=informative, key_frames=key)

    provenance = {
        "kind": "synthetic",
        "seed": config.seed,
        "samples": config.samples,
        "noise_scale": config.noise_scale,
        "key_frames": config.key_frames,
        "informative_probs": {m: config.informative_probs[m] for m in MODALITIES},
    }
    return Dataset(samples=samples, split=split, classes=config.classes,
                   provenance=provenance, truth=truth)


# ---------------------------------------------------------------------------
# masking protocols
# ---------------------------------------------------------------------------


def apply_intra_mask(sample: SampleRecord, p: float,
                     rng: np.random.Generator) -> SampleRecord:
    """Drop each frame of each modality independently with probability p.

    Dropped frames are zeroed and their mask bits cleared; already-dead
    frames stay dead. A fully dropped modality is legal. Uniform draws
    happen in fixed modality order, one vector per modality, so the same
    rng stream yields nested drops as p grows.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"apply_intra_mask: p={p} outside [0,1]")
    out = sample.copy()
    for m in MODALITIES:
        u = rng.random(out.masks[m].shape[0])
        drop = u < p
        out.sequences[m][drop] = 0.0
        out.masks[m] &= ~drop
    return out


def apply_inter_mask(sample: SampleRecord, available: set[str]) -> SampleRecord:
    """Zero out every modality not in ``available`` (mask bits cleared)."""
    if not available:
        raise ContractViolation("apply_inter_mask: available subset must be non-empty")
    unknown = set(available) - set(MODALITIES)
    if unknown:
        raise ContractViolation(f"apply_inter_mask: unknown modalities {sorted(unknown)}")
    out = sample.copy()
    for m in MODALITIES:
        if m not in available:
            out.sequences[m][...] = 0.0
            out.masks[m][...] = False
    return out


def subset_from_string(text: str) -> set[str]:
    """Parse condition strings like 'la' or 'l,a' into modality tags."""
    letters = [c for c in text.lower().replace(",", "").replace(" ", "")]
    table = {"l": "L", "a": "A", "v": "V"}
    try:
        return {table[c] for c in letters}
    except KeyError as exc:
        raise ContractViolation(f"unknown modality letter {exc.args[0]!r} in {text!r}") from None


# ---------------------------------------------------------------------------
# file format: one JSON header line, then one JSON record per sample
# ---------------------------------------------------------------------------


def save(dataset: Dataset, path: str) -> None:
    """Write the dataset (and its ground-truth sidecar, if any).

    Line 1 is a JSON header carrying shapes, class count, split, and
    provenance; each following line is one sample. Ground truth goes to
    ``path + '.truth'`` so the model-facing file stays signal-only.
    """
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "classes": dataset.classes,
        "split": dataset.split,
        "samples": len(dataset.samples),
        "shapes": dataset.shapes(),
        "provenance": dataset.provenance,
        "has_scores": dataset.samples[0].score is not None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            row = {"id": s.id, "label": s.label}
            if s.score is not None:
                row["score"] = s.score
            for m in MODALITIES:
                row[m] = {
                    "x": s.sequences[m].tolist(),
                    "mask": [int(b) for b in s.masks[m]],
                }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if dataset.truth is not None:
        with open(path + TRUTH_SUFFIX, "w", encoding="utf-8") as fh:
            for s in dataset.samples:
                gt = dataset.truth[s.id]
                fh.write(json.dumps({"id": gt.id, "informative": gt.informative,
                                     "key_frames": gt.key_frames}, sort_keys=True) + "\n")


def load(path: str) -> Dataset:
    """Read a dataset file, validating shapes and mask/zero consistency."""
    import os

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty dataset file", line=1)
    header = _parse_json(lines[0], 1)
    if header.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"not a {DATASET_FORMAT} file", line=1)
    if header.get("version") != DATASET_VERSION:
        raise DataFormatError(f"unsupported version {header.get('version')}", line=1)
    missing = {"classes", "shapes", "samples"} - set(header)
    if missing:
        raise DataFormatError(f"header lacks {sorted(missing)}", line=1)
    classes = int(header["classes"])
    shapes = header["shapes"]
    expected = int(header["samples"])
    if len(lines) - 1 != expected:
        raise DataFormatError(
            f"header promises {expected} samples, file has {len(lines) - 1}",
            line=len(lines))

    samples = []
    for lineno, raw in enumerate(lines[1:], start=2):
        row = _parse_json(raw, lineno)
        try:
            sid, label = str(row["id"]), int(row["label"])
        except (KeyError, TypeError, ValueError):
            raise DataFormatError("record needs string id and integer label",
                                  line=lineno) from None
        if not 0 <= label < classes:
            raise DataFormatError(f"label {label} outside [0,{classes})", line=lineno)
        sequences, masks = {}, {}
        for m in MODALITIES:
            if m not in row:
                raise DataFormatError(f"missing modality {m}", line=lineno)
            try:
                seq = np.asarray(row[m]["x"], dtype=np.float64)
                mask = np.asarray(row[m]["mask"], dtype=bool)
            except (KeyError, TypeError, ValueError):
                raise DataFormatError(f"modality {m}: non-numeric content",
                                      line=lineno) from None
            if list(seq.shape) != shapes[m]:
                raise DataFormatError(
                    f"modality {m}: shape {list(seq.shape)} != header {shapes[m]}",
                    line=lineno)
            if mask.shape != (seq.shape[0],):
                raise DataFormatError(f"modality {m}: mask length {mask.shape}",
                                      line=lineno)
            dead = ~mask
            if dead.any() and np.any(seq[dead] != 0.0):
                raise DataFormatError(
                    f"modality {m}: masked-out frame holds nonzero values",
                    line=lineno)
            sequences[m], masks[m] = seq, mask
        score = float(row["score"]) if "score" in row else None
        samples.append(SampleRecord(id=sid, label=label, sequences=sequences,
                                    masks=masks, score=score))

    truth = None
    truth_path = path + TRUTH_SUFFIX
    if os.path.exists(truth_path):
        truth = {}
        with open(truth_path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                row = _parse_json(raw, lineno)
                truth[row["id"]] = GroundTruth(
                    id=row["id"], informative=row["informative"],
                    key_frames=list(row["key_frames"]))
    return Dataset(samples=samples, split=header.get("split", "train"),
                   classes=classes, provenance=header.get("provenance", {}),
                   truth=truth)


def _parse_json(raw: str, lineno: int) -> dict:
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON ({exc.msg})", line=lineno) from None
