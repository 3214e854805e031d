"""
Training loop: composite objective, optimizer, masking and Fisher rotation.

The objective is task cross-entropy on the fused prediction plus
eta1 * unimodal head loss plus eta2 * phase (orthogonality) loss. Each
epoch re-derives a mask seed from (run seed, epoch index), draws fresh
intra-modality masks at rate p_train for every sample, runs minibatch
SGD with momentum (Adam behind a flag), then re-estimates every sample's
per-modality Fisher traces with the updated parameters and rotates the
trace store (current -> previous).

The blend weight w is zero for the first two epochs by construction (no
trace history at epoch 0, no previous trace at epoch 1), after which the
epoch-over-epoch trace growth drives it. The per-modality mean w of the
final epoch is frozen into the checkpoint for inference.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .amre import FisherStore, fisher_importance, fusion_weight
from .datagen import Dataset, apply_intra_mask
from .encoders import MODALITIES
from .errors import ContractViolation, DataFormatError, NumericError
from .model import (Ablation, ForwardContext, ModelDims, ModelHyper,
                    PRLFModel, Predictor)
from .seeding import derive_seed, make_rng

CHECKPOINT_MAGIC = b"PRLFCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    eta1: float = 0.5
    eta2: float = 0.1
    gamma: float = 0.8
    steps: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    epochs: int = 20
    batch_size: int = 32
    p_train: float = 0.5
    classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.eta1 < 0 or self.eta2 < 0:
            raise ContractViolation("TrainConfig: loss weights must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation("TrainConfig: gamma must lie in [0,1]")
        if self.steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("TrainConfig: steps, epochs, batch_size must be >= 1")
        if not 0.0 <= self.p_train <= 1.0:
            raise ContractViolation("TrainConfig: p_train must lie in [0,1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"TrainConfig: unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ContractViolation("TrainConfig: lr must be positive")


@dataclass
class EpochStats:
    epoch: int
    mask_seed: int
    loss_total: float
    loss_task: float
    loss_uni: float
    loss_phase: float
    mean_w: np.ndarray
    mean_mu: np.ndarray
    dominant_fraction: dict[str, float]
    mean_trace: np.ndarray


@dataclass
class TrainResult:
    model: PRLFModel
    config: TrainConfig
    fisher_store: FisherStore
    frozen_w: np.ndarray
    history: list[EpochStats]
    val_metrics: dict | None = None


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGDMomentum:
    def __init__(self, store: nc.ParameterStore, lr: float, momentum: float = 0.9):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self._velocity = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> None:
        for name, t in self.store.items():
            v = self._velocity[name]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v


class Adam:
    def __init__(self, store: nc.ParameterStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for name, t in self.store.items():
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(store: nc.ParameterStore, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(store, config.lr)
    return SGDMomentum(store, config.lr, config.momentum)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def total_loss(model: PRLFModel, batch: list, config: TrainConfig,
               fisher_store: FisherStore, rng: np.random.Generator,
               collector: dict | None = None) -> tuple[nc.Tensor, dict]:
    """Batch objective on the active tape; returns (total, components).

    Per sample the blend weight and Fisher importance come from the trace
    store (constants); losses are means over the batch.
    """
    sums: dict[str, nc.Tensor | None] = {"task": None, "uni": None, "phase": None}
    for sample in batch:
        record = fisher_store.get(sample.id)
        w = fusion_weight(record, scalar_mode=model.hyper.scalar_fusion_weight)
        beta_hat = (fisher_importance(record.current) if record is not None
                    else np.full(3, 1.0 / 3.0))
        ctx = ForwardContext(training=True, use_label=True,
                             beta_hat=beta_hat, w=w, rng=rng)
        out = model.forward_sample(sample, ctx)
        for key, term in (("task", out.task_loss), ("uni", out.uni_loss),
                          ("phase", out.phase_loss)):
            sums[key] = term if sums[key] is None else nc.add(sums[key], term)
        if collector is not None:
            collector["w"].append(w)
            collector["mu"].append(out.importance.mu.data.copy())
            collector["dominant"].append(out.importance.dominant)

    n = len(batch)
    task = nc.scale(sums["task"], 1.0 / n)
    uni = nc.scale(sums["uni"], 1.0 / n)
    phase = nc.scale(sums["phase"], 1.0 / n)
    total = nc.add(task, nc.add(nc.scale(uni, config.eta1),
                                nc.scale(phase, config.eta2)))
    components = {"task": task.item(), "uni": uni.item(), "phase": phase.item(),
                  "total": total.item()}
    return total, components


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


def _batches(indices: np.ndarray, size: int):
    for lo in range(0, len(indices), size):
        yield indices[lo:lo + size]


def train_epoch(model: PRLFModel, dataset: Dataset, epoch: int,
                config: TrainConfig, fisher_store: FisherStore,
                optimizer) -> EpochStats:
    """One optimizer pass over freshly masked data, then the Fisher pass."""
    mask_seed = derive_seed(config.seed, "epoch", epoch)
    masked = [apply_intra_mask(s, config.p_train, make_rng(mask_seed, "mask", s.id))
              for s in dataset.samples]
    order = make_rng(mask_seed, "shuffle").permutation(len(masked))
    dropout_rng = make_rng(mask_seed, "dropout")

    collector = {"w": [], "mu": [], "dominant": []}
    weighted: dict[str, float] = {"task": 0.0, "uni": 0.0, "phase": 0.0, "total": 0.0}
    seen = 0
    for batch_index, idx in enumerate(_batches(order, config.batch_size)):
        batch = [masked[i] for i in idx]
        try:
            with nc.Tape() as tape:
                total, comps = total_loss(model, batch, config, fisher_store,
                                          dropout_rng, collector)
            model.store.zero_grads()
            tape.backward(total)
        except NumericError as exc:
            ids = [s.id for s in batch]
            raise NumericError(
                f"epoch {epoch} aborted at batch {batch_index} (samples {ids}): {exc}"
            ) from exc
        optimizer.step()
        for key in weighted:
            weighted[key] += comps[key] * len(batch)
        seen += len(batch)

    traces = {s.id: model.live_fisher_traces(s, label=s.label) for s in masked}
    fisher_store.rotate(traces, epoch)

    dominants = collector["dominant"]
    frac = {m: dominants.count(m) / len(dominants) for m in MODALITIES}
    return EpochStats(
        epoch=epoch,
        mask_seed=mask_seed,
        loss_total=weighted["total"] / seen,
        loss_task=weighted["task"] / seen,
        loss_uni=weighted["uni"] / seen,
        loss_phase=weighted["phase"] / seen,
        mean_w=np.mean(collector["w"], axis=0),
        mean_mu=np.mean(collector["mu"], axis=0),
        dominant_fraction=frac,
        mean_trace=np.mean(list(traces.values()), axis=0),
    )


def fit(dataset: Dataset, config: TrainConfig,
        dims: ModelDims | None = None, hyper: ModelHyper | None = None,
        ablation: Ablation | None = None,
        val_dataset: Dataset | None = None) -> TrainResult:
    """Train from scratch; deterministic given (config, dataset).

    ``config.steps`` and ``config.gamma`` always win over the same fields
    of a supplied ``hyper``. When a validation set is given, its metrics
    are computed once after training through the same inference path the
    ``eval`` command uses.
    """
    config.validate()
    if dims is None:
        first = dataset.samples[0]
        seq_lens = {m: first.sequences[m].shape[0] for m in MODALITIES}
        default_tokens = ModelDims().tokens
        dims = ModelDims(tokens=min(default_tokens, min(seq_lens.values())),
                         classes=dataset.classes,
                         seq_lens=seq_lens,
                         feat_dims={m: first.sequences[m].shape[1] for m in MODALITIES})
    if dataset.classes != config.classes:
        raise ContractViolation(
            f"dataset has {dataset.classes} classes, config says {config.classes}")
    hyper = replace(hyper or ModelHyper(), steps=config.steps, gamma=config.gamma)
    model = PRLFModel(dims, hyper, ablation=ablation, init_seed=config.seed)
    fisher_store = FisherStore()
    optimizer = make_optimizer(model.store, config)

    history = []
    for epoch in range(config.epochs):
        history.append(train_epoch(model, dataset, epoch, config,
                                   fisher_store, optimizer))

    frozen_w = history[-1].mean_w.copy()
    result = TrainResult(model=model, config=config, fisher_store=fisher_store,
                         frozen_w=frozen_w, history=history)
    if val_dataset is not None:
        from .evalbench import evaluate

        result.val_metrics = evaluate(Predictor(model, frozen_w),
                                      val_dataset.samples).as_dict()
    return result


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Byte layout (documented in docs/checkpoint_format.md):
#   [0:8)    magic b"PRLFCKPT"
#   [8:12)   version, uint32 little-endian
#   [12:20)  header length H, uint64 little-endian
#   [20:20+H) UTF-8 JSON header
#   [20+H:)  raw little-endian float64 array data, concatenated in the
#            order given by the header's "arrays" index
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: PRLFModel
    config: TrainConfig
    fisher_store: FisherStore
    frozen_w: np.ndarray
    epoch: int
    rng_digest: str

    def predictor(self) -> Predictor:
        return Predictor(self.model, self.frozen_w)


def _lineage_digest(config: TrainConfig, epochs_done: int) -> str:
    text = f"seed={config.seed};epochs={epochs_done}"
    return hashlib.sha256(text.encode()).hexdigest()


def save_checkpoint(path: str, result: TrainResult) -> None:
    model, config = result.model, result.config
    arrays = []
    blobs = []
    offset = 0
    for name, tensor in model.store.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        arrays.append({"name": name, "shape": list(data.shape),
                       "offset": offset, "count": int(data.size)})
        blobs.append(data.tobytes())
        offset += data.size * 8
    header = {
        "format": "prlf-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dims": asdict(model.dims),
        "hyper": asdict(model.hyper),
        "ablation": model.ablation.name,
        "train_config": asdict(config),
        "epoch": len(result.history) - 1,
        "frozen_w": result.frozen_w.tolist(),
        "fisher": result.fisher_store.to_payload(),
        "rng_digest": _lineage_digest(config, len(result.history)),
        "arrays": arrays,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a PRLF checkpoint (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", raw[12:20])[0]
    try:
        header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt checkpoint header: {exc}") from None
    data = raw[20 + header_len:]

    dims = ModelDims(**header["dims"])
    hyper = ModelHyper(**header["hyper"])
    config = TrainConfig(**header["train_config"])
    model = PRLFModel(dims, hyper, ablation=Ablation(header["ablation"]),
                      init_seed=config.seed)
    state = {}
    for entry in header["arrays"]:
        start, count = entry["offset"], entry["count"]
        if start + count * 8 > len(data):
            raise DataFormatError(f"checkpoint truncated at array {entry['name']!r}")
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        state[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
    model.store.load_state(state)

    return Checkpoint(model=model, config=config,
                      fisher_store=FisherStore.from_payload(header["fisher"]),
                      frozen_w=np.asarray(header["frozen_w"], dtype=np.float64),
                      epoch=int(header["epoch"]),
                      rng_digest=header["rng_digest"])
