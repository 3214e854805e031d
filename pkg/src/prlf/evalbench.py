"""
Metrics and missingness sweeps over a frozen predictor.

Sweeps walk either intra-modality drop rates p in {0, ..., 0.9} or the
seven availability subsets {l}, {a}, {v}, {l,a}, {l,v}, {a,v}, {l,a,v},
evaluating F1 / accuracy / MAE per evaluation seed and reporting mean and
spread. The "avg" row of the subset sweep averages the six missing
conditions, excluding the complete one.

Per-sample mask randomness derives from (eval seed, sample id) only — not
from p — so one seed induces nested drop sets as p grows and results are
invariant to dataset order. The "phase difference" diagnostic is the mean
angle, in degrees, between a sample's fused feature under masking and
under complete inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .datagen import Dataset, apply_inter_mask, apply_intra_mask, class_score
from .errors import ContractViolation
from .model import Predictor
from .seeding import make_rng

INTER_CONDITIONS = ("l", "a", "v", "la", "lv", "av", "lav")
DEFAULT_RATES = tuple(round(0.1 * i, 1) for i in range(10))
DEFAULT_EVAL_SEED_COUNT = 5


@dataclass
class MetricResult:
    f1: float
    acc2: float
    mae: float | None
    n: int

    def as_dict(self) -> dict:
        return {"f1": self.f1, "acc2": self.acc2, "mae": self.mae, "n": self.n}


def _binary_f1(pred: np.ndarray, true: np.ndarray, positive: int) -> float:
    tp = int(np.sum((pred == positive) & (true == positive)))
    fp = int(np.sum((pred == positive) & (true != positive)))
    fn = int(np.sum((pred != positive) & (true == positive)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def metrics(pred_classes, labels, pred_scores=None, true_scores=None,
            f1_mode: str = "binary") -> MetricResult:
    """F1 (binary, positive class 1, or support-weighted), accuracy, MAE.

    MAE is included only when both score arrays are supplied.
    """
    pred = np.asarray(pred_classes, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size < 1:
        raise ContractViolation("metrics: predictions and labels must align, length >= 1")
    if f1_mode == "binary":
        f1 = _binary_f1(pred, true, positive=1)
    elif f1_mode == "weighted":
        classes, counts = np.unique(true, return_counts=True)
        f1 = float(sum(_binary_f1(pred, true, int(c)) * n
                       for c, n in zip(classes, counts)) / counts.sum())
    else:
        raise ContractViolation(f"metrics: unknown f1_mode {f1_mode!r}")
    acc = float(np.mean(pred == true))
    mae = None
    if pred_scores is not None and true_scores is not None:
        ps = np.asarray(pred_scores, dtype=np.float64)
        ts = np.asarray(true_scores, dtype=np.float64)
        if ps.shape != true.shape or ts.shape != true.shape:
            raise ContractViolation("metrics: score arrays must align with labels")
        mae = float(np.mean(np.abs(ps - ts)))
    return MetricResult(f1=float(f1), acc2=acc, mae=mae, n=int(pred.size))


def expected_score(probs: np.ndarray, classes: int) -> float:
    """Probability-weighted class score on the [-1, 1] label scale."""
    return float(sum(probs[c] * class_score(c, classes) for c in range(classes)))


def evaluate(predictor: Predictor, samples, f1_mode: str = "binary") -> MetricResult:
    """Predict every sample (ordered by id) and score the batch."""
    ordered = sorted(samples, key=lambda s: s.id)
    if not ordered:
        raise ContractViolation("evaluate: empty sample list")
    classes = predictor.model.dims.classes
    preds, labels, pred_scores, true_scores = [], [], [], []
    with_scores = all(s.score is not None for s in ordered)
    for s in ordered:
        out = predictor.predict(s)
        preds.append(out.pred_class)
        labels.append(s.label)
        if with_scores:
            pred_scores.append(expected_score(out.probs.data, classes))
            true_scores.append(s.score)
    return metrics(preds, labels,
                   pred_scores if with_scores else None,
                   true_scores if with_scores else None,
                   f1_mode=f1_mode)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    condition: str
    seeds: list[int]
    f1_values: list[float]
    acc_values: list[float]
    mae_values: list[float] | None
    n: int

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1_values))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.f1_values))

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.acc_values))

    @property
    def mean_mae(self) -> float | None:
        return None if self.mae_values is None else float(np.mean(self.mae_values))


def default_eval_seeds(base_seed: int,
                       count: int = DEFAULT_EVAL_SEED_COUNT) -> list[int]:
    from .seeding import derive_seed

    return [derive_seed(base_seed, "eval-seed", i) for i in range(count)]


def mask_dataset_intra(dataset: Dataset, p: float, seed: int) -> list:
    """Mask every sample at rate p with per-sample streams from (seed, id)."""
    return [apply_intra_mask(s, p, make_rng(seed, "intra", s.id))
            for s in dataset.samples]


def sweep_intra(predictor: Predictor, dataset: Dataset, rates=DEFAULT_RATES,
                seeds=None, f1_mode: str = "binary") -> list[SweepRow]:
    """Evaluate each drop rate under each evaluation seed."""
    if seeds is None:
        seeds = list(range(DEFAULT_EVAL_SEED_COUNT))
    rows = []
    has_scores = all(s.score is not None for s in dataset.samples)
    for p in rates:
        if not 0.0 <= p <= 1.0:
            raise ContractViolation(f"sweep_intra: rate {p} outside [0,1]")
        f1s, accs, maes = [], [], []
        for seed in seeds:
            masked = mask_dataset_intra(dataset, p, seed)
            result = evaluate(predictor, masked, f1_mode=f1_mode)
            f1s.append(result.f1)
            accs.append(result.acc2)
            if result.mae is not None:
                maes.append(result.mae)
        rows.append(SweepRow(condition=f"p={p:g}", seeds=list(seeds),
                             f1_values=f1s, acc_values=accs,
                             mae_values=maes if has_scores else None,
                             n=len(dataset.samples)))
    return rows


def sweep_inter(predictor: Predictor, dataset: Dataset, seeds=None,
                f1_mode: str = "binary") -> list[SweepRow]:
    """Evaluate the seven availability subsets plus the six-condition average.

    Subset masking is deterministic, so per-seed values coincide; seeds are
    still recorded for a uniform row format.
    """
    from .datagen import subset_from_string

    if seeds is None:
        seeds = list(range(DEFAULT_EVAL_SEED_COUNT))
    rows = []
    has_scores = all(s.score is not None for s in dataset.samples)
    for condition in INTER_CONDITIONS:
        available = subset_from_string(condition)
        masked = [apply_inter_mask(s, available) for s in dataset.samples]
        f1s, accs, maes = [], [], []
        for _ in seeds:
            result = evaluate(predictor, masked, f1_mode=f1_mode)
            f1s.append(result.f1)
            accs.append(result.acc2)
            if result.mae is not None:
                maes.append(result.mae)
        rows.append(SweepRow(condition="{" + ",".join(sorted(condition)) + "}",
                             seeds=list(seeds), f1_values=f1s, acc_values=accs,
                             mae_values=maes if has_scores else None,
                             n=len(dataset.samples)))
    missing = rows[:6]  # every condition except the complete {l,a,v}
    avg = SweepRow(
        condition="avg",
        seeds=list(seeds),
        f1_values=list(np.mean([r.f1_values for r in missing], axis=0)),
        acc_values=list(np.mean([r.acc_values for r in missing], axis=0)),
        mae_values=(list(np.mean([r.mae_values for r in missing], axis=0))
                    if has_scores else None),
        n=len(dataset.samples))
    rows.append(avg)
    return rows


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def phase_difference(predictor: Predictor, dataset: Dataset, p: float,
                     seed: int = 0) -> tuple[float, int]:
    """Mean angle (degrees) between masked and unmasked fused features.

    Samples where either feature has zero norm are skipped and counted
    (also bumped under diagnostics['phase_zero_norm_skipped']).
    """
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"phase_difference: p={p} outside [0,1]")
    ordered = sorted(dataset.samples, key=lambda s: s.id)
    angles = []
    skipped = 0
    for s in ordered:
        full = predictor.predict(s).final_feature
        masked = predictor.predict(
            apply_intra_mask(s, p, make_rng(seed, "intra", s.id))).final_feature
        norm_f, norm_m = np.linalg.norm(full), np.linalg.norm(masked)
        if norm_f == 0.0 or norm_m == 0.0:
            skipped += 1
            diagnostics.bump("phase_zero_norm_skipped")
            continue
        cos = float(np.dot(full, masked) / (norm_f * norm_m))
        angles.append(math.degrees(math.acos(max(-1.0, min(1.0, cos)))))
    mean_angle = float(np.mean(angles)) if angles else 0.0
    return mean_angle, skipped


def routing_accuracy(predictor: Predictor, dataset: Dataset,
                     use_labels: bool = True) -> float:
    """Fraction of samples whose dominant modality matches the ground truth.

    On a labeled benchmark the confidence side is scored for the correct
    class (its defining form); ``use_labels=False`` scores each head's own
    top class instead, as unlabeled deployment would.
    """
    if dataset.truth is None:
        raise ContractViolation("routing_accuracy: dataset has no ground-truth sidecar")
    hits = 0
    ordered = sorted(dataset.samples, key=lambda s: s.id)
    for s in ordered:
        iv = predictor.route(s, label=s.label if use_labels else None)
        hits += int(iv.dominant == dataset.truth[s.id].informative)
    return hits / len(ordered)


def mean_projection_alignment(predictor: Predictor, dataset: Dataset) -> float:
    """Mean |cos(projection, residual)| over samples, iterations and tokens."""
    values = []
    for s in sorted(dataset.samples, key=lambda s: s.id):
        out = predictor.predict(s, collect_phase_stats=True)
        if out.mean_abs_cos is not None:
            values.append(out.mean_abs_cos)
    if not values:
        raise ContractViolation("mean_projection_alignment: no usable samples")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("condition", "n", "mean_f1", "std_f1", "mean_acc", "std_acc",
                 "mean_mae", "seeds", "f1_values")


def write_sweep_table(path: str, rows: list[SweepRow]) -> None:
    """Tab-separated sweep table, one row per condition."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(TABLE_COLUMNS) + "\n")
        for r in rows:
            mae = "" if r.mean_mae is None else repr(r.mean_mae)
            fh.write("\t".join([
                r.condition, str(r.n), repr(r.mean_f1), repr(r.std_f1),
                repr(r.mean_acc), repr(float(np.std(r.acc_values))), mae,
                ",".join(str(s) for s in r.seeds),
                ",".join(repr(v) for v in r.f1_values),
            ]) + "\n")


def read_sweep_table(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    out = []
    for ln in lines[1:]:
        out.append(dict(zip(header, ln.split("\t"))))
    return out
