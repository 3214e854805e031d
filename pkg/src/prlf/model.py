"""
Full model assembly: parameters, per-sample forward pass, inference.

A forward pass encodes the three modalities, scores their reliability
(confidence + stored Fisher signal blended by w), runs the progressive
interaction loop under the resulting importance vector, and classifies
the concatenation of the three pooled final features, ordered dominant
first. Training uses the label for confidence and losses; inference uses
each head's top class, live Fisher traces, and the frozen blend weight
stored in the checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import amre
from . import numcore as nc
from .encoders import MODALITIES, SampleRecord, TokenFeature, encode, pool
from .errors import ContractViolation
from .proginteract import (DecomposerParams, InteractionParams, RefineParams,
                           run_iterations)
from .seeding import make_rng

ABLATIONS = ("none", "wo-cmi", "wo-fimi", "wo-amre", "wo-pi", "wo-uni", "wo-phase")


@dataclass(frozen=True)
class ModelDims:
    tokens: int = 8
    dim: int = 64
    classes: int = 2
    seq_lens: dict = field(default_factory=lambda: {"V": 16, "A": 16, "L": 16})
    feat_dims: dict = field(default_factory=lambda: {"V": 20, "A": 20, "L": 32})

    def validate(self) -> None:
        if self.tokens < 1 or self.dim < 1 or self.classes < 2:
            raise ContractViolation("ModelDims: tokens, dim >= 1 and classes >= 2")
        for m in MODALITIES:
            if self.seq_lens[m] < self.tokens:
                raise ContractViolation(
                    f"ModelDims: seq_len[{m}]={self.seq_lens[m]} < tokens={self.tokens}")


@dataclass(frozen=True)
class ModelHyper:
    steps: int = 4
    gamma: float = 0.8
    dropout: float = 0.1
    scalar_fusion_weight: bool = False
    shared_decomposer: bool = False
    token_gate: bool = False
    fisher_mode: str = "output-jacobian"

    def validate(self) -> None:
        if self.steps < 1:
            raise ContractViolation("ModelHyper: steps must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation("ModelHyper: gamma must lie in [0,1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("ModelHyper: dropout must lie in [0,1)")
        if self.fisher_mode not in amre.FISHER_MODES:
            raise ContractViolation(
                f"ModelHyper: fisher_mode must be one of {amre.FISHER_MODES}")


@dataclass(frozen=True)
class Ablation:
    """Mechanism switches; 'none' leaves the full model active."""

    name: str = "none"

    def __post_init__(self):
        if self.name not in ABLATIONS:
            raise ContractViolation(
                f"unknown ablation {self.name!r}; expected one of {ABLATIONS}")

    @property
    def force_w(self) -> np.ndarray | None:
        # wo-fimi pins the blend to pure confidence, wo-cmi to pure Fisher.
        if self.name == "wo-fimi":
            return np.zeros(3)
        if self.name == "wo-cmi":
            return np.ones(3)
        return None

    @property
    def uniform_mu(self) -> bool:
        return self.name == "wo-amre"

    @property
    def no_progressive(self) -> bool:
        return self.name == "wo-pi"


@dataclass
class ForwardContext:
    training: bool
    use_label: bool
    beta_hat: np.ndarray
    w: np.ndarray
    rng: np.random.Generator | None = None
    collect_phase_stats: bool = False


@dataclass
class SampleForward:
    probs: nc.Tensor
    pred_class: int
    importance: amre.ImportanceVector
    phase_loss: nc.Tensor
    final_feature: np.ndarray
    task_loss: nc.Tensor | None = None
    uni_loss: nc.Tensor | None = None
    mean_abs_cos: float | None = None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def build_parameters(dims: ModelDims, hyper: ModelHyper,
                     init_seed: int) -> nc.ParameterStore:
    """Create every trainable array; weights Glorot-uniform, biases zero.

    Encoder projections and classification heads are bias-free so a fully
    missing (zero) modality contributes exactly nothing anywhere along its
    branch.
    """
    store = nc.ParameterStore()
    rng = make_rng(init_seed, "init")
    d = dims.dim
    for m in MODALITIES:
        store.add(f"enc.{m}.W", _glorot(rng, dims.feat_dims[m], d))
    for m in MODALITIES:
        store.add(f"head.{m}.W", _glorot(rng, d, dims.classes))
    for m in MODALITIES:
        store.add(f"refine.{m}.w1", _glorot(rng, d, d))
        store.add(f"refine.{m}.b1", np.zeros(d))
        store.add(f"refine.{m}.w2", _glorot(rng, d, d))
        store.add(f"refine.{m}.b2", np.zeros(d))
    gate_tags = ("shared",) if hyper.shared_decomposer else MODALITIES
    for tag in gate_tags:
        store.add(f"gate.{tag}.w1", _glorot(rng, 2 * d, d))
        store.add(f"gate.{tag}.b1", np.zeros(d))
        store.add(f"gate.{tag}.w2", _glorot(rng, d, d))
        store.add(f"gate.{tag}.b2", np.zeros(d))
        store.add(f"denoise.{tag}.W", _glorot(rng, d, d))
    store.add("classifier.W", _glorot(rng, 3 * d, dims.classes))
    store.add("classifier.b", np.zeros(dims.classes))
    return store


class PRLFModel:
    """Parameter store plus the forward pass over single samples."""

    def __init__(self, dims: ModelDims, hyper: ModelHyper,
                 ablation: Ablation | None = None,
                 store: nc.ParameterStore | None = None, init_seed: int = 0):
        dims.validate()
        hyper.validate()
        self.dims = dims
        self.hyper = hyper
        self.ablation = ablation or Ablation()
        self.store = store if store is not None else build_parameters(
            dims, hyper, init_seed)

    # -- parameter views ----------------------------------------------------

    def interaction_params(self) -> InteractionParams:
        refine = {m: RefineParams(self.store[f"refine.{m}.w1"],
                                  self.store[f"refine.{m}.b1"],
                                  self.store[f"refine.{m}.w2"],
                                  self.store[f"refine.{m}.b2"])
                  for m in MODALITIES}
        decomposer = {}
        for m in MODALITIES:
            tag = "shared" if self.hyper.shared_decomposer else m
            decomposer[m] = DecomposerParams(self.store[f"gate.{tag}.w1"],
                                             self.store[f"gate.{tag}.b1"],
                                             self.store[f"gate.{tag}.w2"],
                                             self.store[f"gate.{tag}.b2"],
                                             self.store[f"denoise.{tag}.W"])
        return InteractionParams(refine=refine, decomposer=decomposer)

    def effective_steps(self) -> int:
        return 1 if self.ablation.no_progressive else self.hyper.steps

    # -- forward ------------------------------------------------------------

    def encode_sample(self, sample: SampleRecord) -> dict[str, TokenFeature]:
        feats = {}
        for m in MODALITIES:
            seq = sample.sequences[m]
            expected = (self.dims.seq_lens[m], self.dims.feat_dims[m])
            if seq.shape != expected:
                raise ContractViolation(
                    f"sample {sample.id}/{m}: shape {seq.shape}, expected {expected}")
            feats[m] = encode(seq, sample.masks[m], self.store[f"enc.{m}.W"],
                              self.dims.tokens, m)
        return feats

    def importance_for(self, head_probs: dict[str, nc.Tensor],
                       label: int | None, ctx: ForwardContext) -> amre.ImportanceVector:
        if self.ablation.uniform_mu:
            return amre.uniform_importance()
        alpha_hat = amre.confidence_vector(head_probs, label)
        w = self.ablation.force_w
        if w is None:
            w = ctx.w
        return amre.modality_importance(alpha_hat, ctx.beta_hat, w)

    def forward_sample(self, sample: SampleRecord, ctx: ForwardContext) -> SampleForward:
        feats = self.encode_sample(sample)
        head_probs = amre.head_distributions(feats, self.store)
        label = sample.label if ctx.use_label else None
        importance = self.importance_for(head_probs, label, ctx)

        inter = run_iterations({m: feats[m].tokens for m in MODALITIES},
                               importance, self.interaction_params(),
                               steps=self.effective_steps(),
                               gamma=self.hyper.gamma,
                               dropout_rate=self.hyper.dropout,
                               rng=ctx.rng, training=ctx.training,
                               zero_cross=self.ablation.no_progressive,
                               token_gate=self.hyper.token_gate,
                               collect_phase_stats=ctx.collect_phase_stats)

        ordered = (inter.dominant,) + inter.aux
        pooled = [nc.mean_rows(inter.final[r]) for r in ordered]
        final = nc.concat_vec(pooled)
        logits = nc.add(nc.vecmat(final, self.store["classifier.W"]),
                        self.store["classifier.b"])
        probs = nc.softmax_rows(logits)

        task_loss = uni_loss = None
        if ctx.use_label:
            task_loss = nc.cross_entropy(probs, sample.label)
            uni_loss = amre.unimodal_loss(head_probs, sample.label)
        return SampleForward(probs=probs,
                             pred_class=int(np.argmax(probs.data)),
                             importance=importance,
                             phase_loss=inter.phase_loss,
                             final_feature=final.data.copy(),
                             task_loss=task_loss,
                             uni_loss=uni_loss,
                             mean_abs_cos=inter.mean_abs_cos)

    def live_fisher_traces(self, sample: SampleRecord,
                           label: int | None = None) -> np.ndarray:
        """Per-modality branch traces for one sample, order (V, A, L)."""
        return np.array([amre.fisher_trace(self.store, sample, m,
                                           self.dims.tokens, class_index=label,
                                           mode=self.hyper.fisher_mode)
                         for m in MODALITIES])

    def route(self, sample: SampleRecord, w: np.ndarray,
              label: int | None = None) -> amre.ImportanceVector:
        """Importance vector only (no interaction loop): encode, score, blend.

        With a label the confidence follows its correct-class definition;
        without one each head's top-class probability is used.
        """
        if self.ablation.uniform_mu:
            return amre.uniform_importance()
        beta_hat = amre.fisher_importance(self.live_fisher_traces(sample, label))
        feats = self.encode_sample(sample)
        alpha_hat = amre.confidence_vector(
            amre.head_distributions(feats, self.store), label)
        w_eff = self.ablation.force_w
        if w_eff is None:
            w_eff = np.asarray(w, dtype=np.float64)
        return amre.modality_importance(alpha_hat, beta_hat, w_eff)

    def describe(self) -> dict:
        return {"dims": asdict(self.dims), "hyper": asdict(self.hyper),
                "ablation": self.ablation.name}


class Predictor:
    """Inference wrapper: frozen blend weight + live Fisher importance."""

    def __init__(self, model: PRLFModel, frozen_w: np.ndarray):
        frozen_w = np.asarray(frozen_w, dtype=np.float64)
        if frozen_w.shape != (3,) or np.any(frozen_w < 0) or np.any(frozen_w > 1):
            raise ContractViolation("Predictor: frozen w must be 3 values in [0,1]")
        self.model = model
        self.frozen_w = frozen_w

    def _needs_fisher(self) -> bool:
        abl = self.model.ablation
        if abl.uniform_mu:
            return False
        w = abl.force_w if abl.force_w is not None else self.frozen_w
        return bool(np.any(w > 0))

    def predict(self, sample: SampleRecord,
                collect_phase_stats: bool = False) -> SampleForward:
        if self._needs_fisher():
            beta_hat = amre.fisher_importance(self.model.live_fisher_traces(sample))
        else:
            beta_hat = np.full(3, 1.0 / 3.0)
        ctx = ForwardContext(training=False, use_label=False,
                             beta_hat=beta_hat, w=self.frozen_w,
                             collect_phase_stats=collect_phase_stats)
        return self.model.forward_sample(sample, ctx)

    def route(self, sample: SampleRecord,
              label: int | None = None) -> amre.ImportanceVector:
        return self.model.route(sample, self.frozen_w, label=label)
