"""
Adaptive modality reliability estimation.

Per sample, each modality gets two importance signals:
  * confidence: its classification head's probability for the correct
    class (training) or for its own top class (inference), L1-normalized
    across modalities,
  * Fisher signal: the trace of the Fisher information matrix for the
    modality branch — squared L2 gradient norms taken with respect to the
    branch's own parameters (encoder projection + head), L1-normalized.
    See :func:`fisher_trace` for the two gradient scalarizations.

A dynamic weight w — the sigmoid of the relative epoch-over-epoch growth
of each modality's trace — blends the two into the fused importance mu.
Early in training (no trace history) w is pinned to zero so the blend
falls back to pure confidence.

Vectors are ordered (V, A, L). Near-exact ties in mu (within 1e-12)
resolve by the fixed preference order L > A > V.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import MODALITIES, MODALITY_PRIORITY, TokenFeature, encode, pool
from .errors import ContractViolation

TRACE_EPS = 1e-12
TIE_EPS = 1e-12


@dataclass
class FisherRecord:
    """Per-sample modality traces for the current and previous epoch."""

    sample_id: str
    current: np.ndarray            # (3,) traces, order (V, A, L)
    previous: np.ndarray | None    # None only at epoch 0
    epoch: int

    def validate(self) -> None:
        if self.current.shape != (3,) or np.any(self.current < 0):
            raise ContractViolation("FisherRecord: current traces must be 3 non-negatives")
        if (self.previous is None) != (self.epoch == 0):
            raise ContractViolation("FisherRecord: previous slot empty iff epoch 0")
        if self.previous is not None and np.any(self.previous < 0):
            raise ContractViolation("FisherRecord: previous traces must be non-negative")


class FisherStore:
    """Single-writer map sample id -> FisherRecord, rotated between epochs."""

    def __init__(self):
        self._records: dict[str, FisherRecord] = {}

    def get(self, sample_id: str) -> FisherRecord | None:
        return self._records.get(sample_id)

    def rotate(self, traces: dict[str, np.ndarray], epoch: int) -> None:
        """Install this epoch's traces; the old current slot becomes previous."""
        for sid, tr in traces.items():
            tr = np.asarray(tr, dtype=np.float64)
            old = self._records.get(sid)
            prev = old.current if old is not None else None
            rec = FisherRecord(sample_id=sid, current=tr, previous=prev, epoch=epoch)
            rec.validate()
            self._records[sid] = rec

    def items(self):
        return self._records.items()

    def __len__(self) -> int:
        return len(self._records)

    def to_payload(self) -> dict:
        out = {}
        for sid, rec in self._records.items():
            out[sid] = {
                "current": rec.current.tolist(),
                "previous": None if rec.previous is None else rec.previous.tolist(),
                "epoch": rec.epoch,
            }
        return out

    @classmethod
    def from_payload(cls, payload: dict) -> "FisherStore":
        store = cls()
        for sid, row in payload.items():
            prev = row["previous"]
            store._records[sid] = FisherRecord(
                sample_id=sid,
                current=np.asarray(row["current"], dtype=np.float64),
                previous=None if prev is None else np.asarray(prev, dtype=np.float64),
                epoch=int(row["epoch"]),
            )
        return store


@dataclass
class ImportanceVector:
    """Fused per-sample modality importance and its ingredients."""

    alpha_hat: np.ndarray      # (3,) normalized confidence
    beta_hat: np.ndarray       # (3,) normalized Fisher importance
    w: np.ndarray              # (3,) blend weight, each in [0,1]
    mu: nc.Tensor              # (3,) fused importance (differentiable)
    dominant: str
    aux: tuple[str, str]

    def validate(self) -> None:
        for name, vec in (("alpha_hat", self.alpha_hat), ("beta_hat", self.beta_hat),
                          ("mu", self.mu.data)):
            if vec.shape != (3,) or np.any(vec < 0) or abs(float(vec.sum()) - 1.0) > 1e-9:
                raise ContractViolation(f"ImportanceVector: {name} is not a distribution")
        if np.any(self.w < 0) or np.any(self.w > 1):
            raise ContractViolation("ImportanceVector: w entries must lie in [0,1]")
        roles = {self.dominant, *self.aux}
        if roles != set(MODALITIES) or len(self.aux) != 2:
            raise ContractViolation("ImportanceVector: roles must cover V, A, L exactly")

    def mu_of(self, modality: str) -> nc.Tensor:
        return nc.pick(self.mu, MODALITIES.index(modality))


def head_distributions(features: dict[str, TokenFeature],
                       store: nc.ParameterStore) -> dict[str, nc.Tensor]:
    """Per-modality class distributions from the bias-free heads."""
    probs = {}
    for m in MODALITIES:
        logits = nc.vecmat(pool(features[m]), store[f"head.{m}.W"])
        probs[m] = nc.softmax_rows(logits)
    return probs


def confidence_vector(head_probs: dict[str, nc.Tensor],
                      label: int | None) -> nc.Tensor:
    """Normalized confidence across modalities (differentiable 3-vector).

    With a label, confidence is the probability assigned to it; without
    one (inference) it is the modality's own top-class probability.
    """
    picks = []
    for m in MODALITIES:
        probs = head_probs[m]
        idx = label if label is not None else int(np.argmax(probs.data))
        picks.append(nc.pick(probs, idx))
    return nc.l1_normalize(nc.stack_scalars(picks))


def unimodal_loss(head_probs: dict[str, nc.Tensor], label: int) -> nc.Tensor:
    """Sum over modalities of the head cross-entropy for one sample."""
    total = nc.cross_entropy(head_probs[MODALITIES[0]], label)
    for m in MODALITIES[1:]:
        total = nc.add(total, nc.cross_entropy(head_probs[m], label))
    return total


FISHER_MODES = ("output-jacobian", "loglik")


def _branch_grad_sq(store: nc.ParameterStore, grads: dict, modality: str) -> float:
    total = 0.0
    for name in (f"enc.{modality}.W", f"head.{modality}.W"):
        g = grads.get(id(store[name]))
        if g is not None:
            total += float((g * g).sum())
    return total


def fisher_trace(store: nc.ParameterStore, sample, modality: str, tokens: int,
                 class_index: int | None = None,
                 mode: str = "output-jacobian") -> float:
    """Squared-gradient-norm information estimate for one modality branch.

    Gradients are taken with respect to the modality's own encoder and
    head parameters only, on a private tape, never touching training
    gradient buffers. A dead (fully masked) modality has trace exactly 0.

    Modes:
      * ``output-jacobian`` (default): sum over head output classes of the
        squared gradient norm of each raw logit — the energy the branch
        output carries per parameter, independent of any class choice.
        This tracks input information content even once the head has
        become confident.
      * ``loglik``: squared gradient norm of log p(c | X_m), with c the
        supplied ``class_index`` (training label) or the branch's own
        predicted class when None. Saturates toward zero as the branch's
        confidence approaches 1, which inverts the informativeness
        ranking on well-fit data; kept for comparison.
    """
    if mode not in FISHER_MODES:
        raise ContractViolation(f"fisher_trace: unknown mode {mode!r}")
    mask = sample.masks[modality]
    if not np.asarray(mask, dtype=bool).any():
        return 0.0

    def branch_logits():
        feat = encode(sample.sequences[modality], mask,
                      store[f"enc.{modality}.W"], tokens, modality)
        return nc.vecmat(pool(feat), store[f"head.{modality}.W"])

    if mode == "loglik":
        with nc.Tape() as tape:
            probs = nc.softmax_rows(branch_logits())
            c = class_index if class_index is not None else int(np.argmax(probs.data))
            log_lik = nc.log(nc.pick(probs, c))
        return _branch_grad_sq(store, tape.backward(log_lik, accumulate=False),
                               modality)

    total = 0.0
    classes = store[f"head.{modality}.W"].data.shape[1]
    for c in range(classes):
        with nc.Tape() as tape:
            logit_c = nc.pick(branch_logits(), c)
        total += _branch_grad_sq(store, tape.backward(logit_c, accumulate=False),
                                 modality)
    return total


def fisher_importance(traces: np.ndarray) -> np.ndarray:
    """L1-normalize non-negative traces; all-zero falls back to uniform."""
    traces = np.asarray(traces, dtype=np.float64)
    if traces.shape != (3,) or np.any(traces < 0):
        raise ContractViolation("fisher_importance: need 3 non-negative traces")
    total = float(traces.sum())
    if total < TRACE_EPS:
        return np.full(3, 1.0 / 3.0)
    return traces / total


def fusion_weight(record: FisherRecord | None, scalar_mode: bool = False) -> np.ndarray:
    """Blend weight from the relative epoch-over-epoch trace growth.

    With no trace history (epoch 0, or no record yet) the weight is zero,
    so the importance blend reduces to pure confidence. ``scalar_mode``
    collapses the growth vector to its mean before the sigmoid, applying
    one shared weight to all modalities.
    """
    if record is None or record.previous is None:
        return np.zeros(3)
    delta = (record.current - record.previous) / np.maximum(record.current, TRACE_EPS)
    if scalar_mode:
        delta = np.full(3, float(delta.mean()))
    # Stable sigmoid: delta can be hugely negative when a trace collapses.
    out = np.empty(3)
    pos = delta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-delta[pos]))
    ex = np.exp(delta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def select_roles(mu_data: np.ndarray) -> tuple[str, tuple[str, str]]:
    """Dominant = argmax(mu); near-exact ties break by L > A > V."""
    best = float(mu_data.max())
    dominant = None
    for m in MODALITY_PRIORITY:
        if best - float(mu_data[MODALITIES.index(m)]) <= TIE_EPS:
            dominant = m
            break
    aux = tuple(m for m in MODALITY_PRIORITY if m != dominant)
    return dominant, aux


def modality_importance(alpha_hat: nc.Tensor, beta_hat: np.ndarray,
                        w: np.ndarray) -> ImportanceVector:
    """Blend confidence with Fisher importance: mu = (1-w)*alpha + w*beta.

    The blend of two unit-L1 vectors under a vector-valued w need not sum
    to one, so mu is re-normalized; the argmax is unaffected by that.
    Only the confidence side is differentiable — beta and w enter as
    constants.
    """
    w = np.asarray(w, dtype=np.float64)
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    if np.any(w < 0) or np.any(w > 1):
        raise ContractViolation("modality_importance: w entries must lie in [0,1]")
    if np.all(w == 0.0):
        mu = alpha_hat  # already unit-L1: pure-confidence path, bit-exact
    elif np.all(w == 1.0):
        mu = nc.constant(beta_hat.copy())  # pure-Fisher path, bit-exact
    else:
        blended = nc.add(nc.mul(alpha_hat, nc.constant(1.0 - w)),
                         nc.constant(w * beta_hat))
        mu = nc.l1_normalize(blended)
    dominant, aux = select_roles(mu.data)
    iv = ImportanceVector(alpha_hat=alpha_hat.data.copy(), beta_hat=beta_hat.copy(),
                          w=w.copy(), mu=mu, dominant=dominant, aux=aux)
    iv.validate()
    return iv


def uniform_importance() -> ImportanceVector:
    """The fixed mu = (1/3, 1/3, 1/3) used by the no-router ablation."""
    third = np.full(3, 1.0 / 3.0)
    mu = nc.constant(third.copy())
    dominant, aux = select_roles(mu.data)
    iv = ImportanceVector(alpha_hat=third.copy(), beta_hat=third.copy(),
                          w=np.zeros(3), mu=mu, dominant=dominant, aux=aux)
    iv.validate()
    return iv
