"""
Progressive cross-modal interaction loop.

Each iteration t of the loop runs, per modality:
  1. residual self-refinement through a two-layer MLP with dropout,
  2. importance-scaled cross attention against each other modality
     (queries and values are the importance-scaled source tokens; the
     partner contributes keys only),
  3. fusion of the two attended views by self-attention over their row
     concatenation, averaged back to K rows,
  4. a schedule mix: lambda_t * self + (1 - lambda_t) * cross, with
     lambda_t = 1 - t / max(1, steps-1) walking from 1 to 0,
then splits each auxiliary feature against the dominant one into a gated
projection plus residual, accumulates the orthogonality (phase) penalty,
and rebuilds the auxiliary as projection + gamma * (residual - estimated
noise). The dominant feature passes through untouched.

The phase penalty is averaged over iterations so its scale does not
depend on the steps hyperparameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .amre import ImportanceVector
from .encoders import MODALITIES
from .errors import ContractViolation


@dataclass
class RefineParams:
    """Two-layer residual refiner weights for one modality."""

    w1: nc.Tensor
    b1: nc.Tensor
    w2: nc.Tensor
    b2: nc.Tensor


@dataclass
class DecomposerParams:
    """Gate network plus denoiser weights used when a modality is auxiliary."""

    gate_w1: nc.Tensor   # (2D, D)
    gate_b1: nc.Tensor   # (D,)
    gate_w2: nc.Tensor   # (D, D)
    gate_b2: nc.Tensor   # (D,)
    denoise_w: nc.Tensor  # (D, D)


@dataclass
class InteractionParams:
    refine: dict[str, RefineParams]
    decomposer: dict[str, DecomposerParams]


@dataclass
class InteractionState:
    """Loop-carried features at the start of iteration ``step``."""

    features: dict[str, nc.Tensor]
    step: int
    steps: int
    importance: ImportanceVector

    def validate(self) -> None:
        if not 0 <= self.step < self.steps or self.steps < 1:
            raise ContractViolation(
                f"InteractionState: step {self.step} outside [0,{self.steps})")


@dataclass
class InteractionResult:
    final: dict[str, nc.Tensor]
    phase_loss: nc.Tensor
    dominant: str
    aux: tuple[str, str]
    mean_abs_cos: float | None = None


def self_refine(f: nc.Tensor, params: RefineParams, dropout_rate: float,
                rng, training: bool) -> nc.Tensor:
    """f + Dropout(ReLU(f W1 + b1) W2 + b2), row-wise over tokens."""
    hidden = nc.relu(nc.add_bias(nc.matmul(f, params.w1), params.b1))
    branch = nc.add_bias(nc.matmul(hidden, params.w2), params.b2)
    return nc.add(f, nc.dropout(branch, dropout_rate, rng, training))


def _attend(source: nc.Tensor, partner: nc.Tensor) -> nc.Tensor:
    """softmax(source partner^T / sqrt(D)) @ source, row-wise softmax."""
    d = source.data.shape[1]
    attn = nc.softmax_rows(nc.matmul_t(source, partner, 1.0 / math.sqrt(d)))
    return nc.matmul(attn, source)


def cross_attend(f_m: nc.Tensor, f_n: nc.Tensor, mu_m: nc.Tensor,
                 mu_n: nc.Tensor) -> nc.Tensor:
    """Attention of importance-scaled source tokens against partner keys.

    scores = (mu_m f_m)(mu_n f_n)^T / sqrt(D), softmax over each query row,
    applied to values mu_m f_m. Both inputs must be K x D with equal K.
    """
    if f_m.data.shape != f_n.data.shape:
        raise ContractViolation(
            f"cross_attend: token shapes differ {f_m.data.shape} vs {f_n.data.shape}")
    return _attend(nc.smul(mu_m, f_m), nc.smul(mu_n, f_n))


def fuse_cross(f_a: nc.Tensor, f_b: nc.Tensor) -> nc.Tensor:
    """Self-attention over the 2K-row concatenation, halves averaged back to K."""
    if f_a.data.shape != f_b.data.shape:
        raise ContractViolation(
            f"fuse_cross: token shapes differ {f_a.data.shape} vs {f_b.data.shape}")
    k, d = f_a.data.shape
    joined = nc.concat_rows([f_a, f_b])
    attended = nc.matmul(nc.softmax_rows(nc.matmul_t(joined, joined, 1.0 / math.sqrt(d))),
                         joined)
    top = nc.slice_rows(attended, 0, k)
    bottom = nc.slice_rows(attended, k, 2 * k)
    return nc.scale(nc.add(top, bottom), 0.5)


def lambda_schedule(t: int, steps: int) -> float:
    """1 at the first iteration, 0 at the last (for steps >= 2)."""
    if steps < 1:
        raise ContractViolation(f"lambda_schedule: steps must be >= 1, got {steps}")
    if not 0 <= t < steps:
        raise ContractViolation(f"lambda_schedule: t={t} outside [0,{steps})")
    return 1.0 - t / max(1, steps - 1)


def mix(f_self: nc.Tensor, f_cross: nc.Tensor, lam: float) -> nc.Tensor:
    if f_self.data.shape != f_cross.data.shape:
        raise ContractViolation("mix: shape mismatch")
    return nc.add(nc.scale(f_self, lam), nc.scale(f_cross, 1.0 - lam))


def decompose(f_dom: nc.Tensor, f_aux: nc.Tensor, params: DecomposerParams,
              token_gate: bool = False) -> tuple[nc.Tensor, nc.Tensor, nc.Tensor]:
    """Split an auxiliary feature into a gated dominant projection + residual.

    The gate is a sigmoid MLP over the pooled [dominant; auxiliary]
    concatenation, broadcast across tokens (``token_gate`` instead feeds
    each token pair through the same MLP for a per-token gate). Always
    returns (gate, proj, res) with proj + res == f_aux exactly.
    """
    if token_gate:
        joint = nc.transpose(nc.concat_rows([nc.transpose(f_dom), nc.transpose(f_aux)]))
        hidden = nc.relu(nc.add_bias(nc.matmul(joint, params.gate_w1), params.gate_b1))
        gate = nc.sigmoid(nc.add_bias(nc.matmul(hidden, params.gate_w2), params.gate_b2))
        proj = nc.mul(gate, f_dom)
    else:
        joint = nc.concat_vec([nc.mean_rows(f_dom), nc.mean_rows(f_aux)])
        hidden = nc.relu(nc.add(nc.vecmat(joint, params.gate_w1), params.gate_b1))
        gate = nc.sigmoid(nc.add(nc.vecmat(hidden, params.gate_w2), params.gate_b2))
        proj = nc.mul_rowvec(f_dom, gate)
    res = nc.sub(f_aux, proj)
    return gate, proj, res


def phase_penalty(proj: nc.Tensor, res: nc.Tensor) -> nc.Tensor:
    """Mean over tokens of the squared projection/residual inner product."""
    return nc.mean_all(nc.square(nc.row_dot(proj, res)))


def denoise_update(proj: nc.Tensor, res: nc.Tensor, gamma: float,
                   params: DecomposerParams, dropout_rate: float, rng,
                   training: bool) -> nc.Tensor:
    """proj + gamma * (res - Dropout(ReLU(res W))): next auxiliary feature."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation(f"denoise_update: gamma={gamma} outside [0,1]")
    noise = nc.dropout(nc.relu(nc.matmul(res, params.denoise_w)),
                       dropout_rate, rng, training)
    return nc.add(proj, nc.scale(nc.sub(res, noise), gamma))


def _mean_abs_cos(proj: np.ndarray, res: np.ndarray) -> list[float]:
    """|cos| per token row, skipping rows where either side has zero norm."""
    out = []
    for p_row, r_row in zip(proj, res):
        np_, nr = float(np.linalg.norm(p_row)), float(np.linalg.norm(r_row))
        if np_ == 0.0 or nr == 0.0:
            continue
        out.append(abs(float(np.dot(p_row, r_row))) / (np_ * nr))
    return out


def run_iterations(features: dict[str, nc.Tensor], importance: ImportanceVector,
                   params: InteractionParams, steps: int, gamma: float,
                   dropout_rate: float, rng, training: bool,
                   zero_cross: bool = False, token_gate: bool = False,
                   collect_phase_stats: bool = False) -> InteractionResult:
    """Run the full interaction loop and return final features + phase loss.

    ``zero_cross`` suppresses the cross-modal path entirely (the
    no-progressive-interaction ablation pairs it with steps=1). The phase
    loss is the per-iteration penalty averaged over iterations.
    """
    if steps < 1:
        raise ContractViolation(f"run_iterations: steps must be >= 1, got {steps}")
    dominant, aux_pair = importance.dominant, importance.aux
    mu_values = {m: importance.mu_of(m) for m in MODALITIES}
    state = InteractionState(features=dict(features), step=0, steps=steps,
                             importance=importance)
    phase_total: nc.Tensor | None = None
    cos_rows: list[float] = []

    for t in range(steps):
        state.step = t
        state.validate()
        lam = lambda_schedule(t, steps)
        refined = {m: self_refine(state.features[m], params.refine[m],
                                  dropout_rate, rng, training)
                   for m in MODALITIES}
        if lam >= 1.0 or zero_cross:
            fused = refined  # cross side carries weight exactly 0
        else:
            scaled = {m: nc.smul(mu_values[m], refined[m]) for m in MODALITIES}
            fused = {}
            for m in MODALITIES:
                attended = [_attend(scaled[m], scaled[n])
                            for n in MODALITIES if n != m]
                fused[m] = mix(refined[m], fuse_cross(*attended), lam)

        next_features = {dominant: fused[dominant]}
        phase_terms = []
        for aux_m in aux_pair:
            dparams = params.decomposer[aux_m]
            _, proj, res = decompose(fused[dominant], fused[aux_m], dparams,
                                     token_gate=token_gate)
            phase_terms.append(phase_penalty(proj, res))
            if collect_phase_stats:
                cos_rows.extend(_mean_abs_cos(proj.data, res.data))
            next_features[aux_m] = denoise_update(proj, res, gamma, dparams,
                                                  dropout_rate, rng, training)
        phase_t = nc.scale(nc.add(phase_terms[0], phase_terms[1]),
                           1.0 / len(phase_terms))
        phase_total = phase_t if phase_total is None else nc.add(phase_total, phase_t)
        state.features = next_features

    mean_cos = float(np.mean(cos_rows)) if cos_rows else None
    return InteractionResult(final=state.features,
                             phase_loss=nc.scale(phase_total, 1.0 / steps),
                             dominant=dominant, aux=aux_pair,
                             mean_abs_cos=mean_cos if collect_phase_stats else None)
