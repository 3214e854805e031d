"""Reliability estimation: traces, blend weights, fused importance."""

import math

import numpy as np
import pytest

from prlf import numcore as nc
from prlf.amre import (FisherRecord, FisherStore, ImportanceVector,
                       confidence_vector, fisher_importance, fisher_trace,
                       fusion_weight, head_distributions, modality_importance,
                       select_roles, uniform_importance, unimodal_loss)
from prlf.encoders import MODALITIES, SampleRecord
from prlf.errors import ContractViolation

from oracles import fisher_trace_oracle


def tiny_branch(seed=0, t=4, d=5, dim=6, classes=2, tokens=2):
    rng = np.random.default_rng(seed)
    store = nc.ParameterStore()
    for m in MODALITIES:
        store.add(f"enc.{m}.W", rng.normal(scale=0.5, size=(d, dim)))
        store.add(f"head.{m}.W", rng.normal(scale=0.5, size=(dim, classes)))
    seqs = {m: rng.normal(size=(t, d)) for m in MODALITIES}
    masks = {m: np.ones(t, dtype=bool) for m in MODALITIES}
    masks["A"][1] = False
    seqs["A"][1] = 0.0
    sample = SampleRecord(id="s0", label=1, sequences=seqs, masks=masks)
    return store, sample, tokens


# ---------------------------------------------------------------------------
# Fisher traces
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["output-jacobian", "loglik"])
def test_fisher_trace_matches_complex_step_oracle(mode):
    store, sample, tokens = tiny_branch()
    for m in MODALITIES:
        got = fisher_trace(store, sample, m, tokens,
                           class_index=sample.label if mode == "loglik" else None,
                           mode=mode)
        want = fisher_trace_oracle(sample.sequences[m], sample.masks[m],
                                   store[f"enc.{m}.W"].data,
                                   store[f"head.{m}.W"].data, tokens,
                                   mode=mode, class_index=sample.label
                                   if mode == "loglik" else None)
        assert abs(got - want) / max(abs(want), 1e-12) < 1e-9


def test_fisher_trace_zero_for_dead_modality():
    store, sample, tokens = tiny_branch()
    dead = sample.copy()
    dead.sequences["V"][...] = 0.0
    dead.masks["V"][...] = False
    assert fisher_trace(store, dead, "V", tokens) == 0.0


def test_fisher_trace_zero_for_zeroed_live_input():
    # bias-free projection and head: zero input means zero gradients
    store, sample, tokens = tiny_branch()
    zeroed = sample.copy()
    zeroed.sequences["L"][...] = 0.0  # mask stays live
    assert fisher_trace(store, zeroed, "L", tokens) == 0.0
    assert fisher_trace(store, zeroed, "L", tokens, class_index=1,
                        mode="loglik") == 0.0


def test_logistic_gradient_closed_form():
    # p(y=1) = sigmoid(w * x) at w=0, x=1: d log p / dw = 0.5, trace 0.25
    w = nc.Tensor(np.array(0.0), requires_grad=True)
    with nc.Tape() as tape:
        p1 = nc.sigmoid(nc.mul(w, nc.constant(np.array(1.0))))
        log_lik = nc.log(p1)
    grads = tape.backward(log_lik, accumulate=False)
    g = float(grads[id(w)])
    assert abs(g - 0.5) < 1e-15
    assert abs(g * g - 0.25) < 1e-15


def test_scaling_log_prob_doubles_gradient_quadruples_trace():
    store, sample, tokens = tiny_branch(seed=3)
    base = fisher_trace(store, sample, "V", tokens, class_index=0, mode="loglik")

    from prlf.encoders import encode, pool

    with nc.Tape() as tape:
        feat = encode(sample.sequences["V"], sample.masks["V"], store["enc.V.W"],
                      tokens, "V")
        probs = nc.softmax_rows(nc.vecmat(pool(feat), store["head.V.W"]))
        doubled = nc.scale(nc.log(nc.pick(probs, 0)), 2.0)
    grads = tape.backward(doubled, accumulate=False)
    scaled = sum(float((grads[id(store[n])] ** 2).sum())
                 for n in ("enc.V.W", "head.V.W"))
    assert abs(scaled - 4.0 * base) / (4.0 * base) < 1e-12


def test_fisher_importance_examples():
    assert np.allclose(fisher_importance(np.array([1.0, 1.0, 2.0])),
                       [0.25, 0.25, 0.5], rtol=0, atol=1e-15)
    assert np.array_equal(fisher_importance(np.zeros(3)), np.full(3, 1 / 3))
    assert np.array_equal(fisher_importance(np.array([5.0, 0.0, 0.0])),
                          [1.0, 0.0, 0.0])
    with pytest.raises(ContractViolation):
        fisher_importance(np.array([1.0, -0.1, 0.0]))


# ---------------------------------------------------------------------------
# blend weight
# ---------------------------------------------------------------------------


def test_fusion_weight_without_history_is_zero():
    assert np.array_equal(fusion_weight(None), np.zeros(3))
    rec = FisherRecord("s", current=np.ones(3), previous=None, epoch=0)
    assert np.array_equal(fusion_weight(rec), np.zeros(3))


def test_fusion_weight_examples():
    flat = FisherRecord("s", current=np.ones(3), previous=np.ones(3), epoch=3)
    assert np.allclose(fusion_weight(flat), [0.5, 0.5, 0.5], rtol=0, atol=1e-15)
    grew = FisherRecord("s", current=np.full(3, 2.0), previous=np.ones(3), epoch=3)
    expected = 1.0 / (1.0 + math.exp(-0.5))  # relative growth 0.5
    assert np.allclose(fusion_weight(grew), expected, rtol=0, atol=1e-15)
    assert abs(expected - 0.6224593312018546) < 1e-15


def test_fusion_weight_scalar_mode_and_stability():
    rec = FisherRecord("s", current=np.array([2.0, 1.0, 1.0]),
                       previous=np.array([1.0, 1.0, 1.0]), epoch=2)
    w = fusion_weight(rec, scalar_mode=True)
    expected = 1.0 / (1.0 + math.exp(-0.5 / 3.0))
    assert np.allclose(w, expected)
    collapse = FisherRecord("s", current=np.array([1e-18, 1.0, 1.0]),
                            previous=np.array([5.0, 1.0, 1.0]), epoch=2)
    w = fusion_weight(collapse)  # hugely negative growth must not overflow
    assert w[0] == 0.0 and np.all(w <= 1.0)


# ---------------------------------------------------------------------------
# fused importance
# ---------------------------------------------------------------------------


def _alpha(vals):
    return nc.l1_normalize(nc.constant(np.asarray(vals, dtype=np.float64)))


def test_importance_pure_confidence_is_bit_exact():
    alpha = _alpha([0.2, 0.3, 0.5])
    iv = modality_importance(alpha, np.array([0.6, 0.2, 0.2]), np.zeros(3))
    assert np.array_equal(iv.mu.data, alpha.data)


def test_importance_pure_fisher_is_bit_exact():
    beta = np.array([0.6, 0.2, 0.2])
    iv = modality_importance(_alpha([0.2, 0.3, 0.5]), beta, np.ones(3))
    assert np.array_equal(iv.mu.data, beta)


def test_importance_blend_renormalizes():
    iv = modality_importance(_alpha([0.9, 0.05, 0.05]),
                             np.array([0.1, 0.1, 0.8]),
                             np.array([0.3, 0.5, 0.7]))
    assert abs(float(iv.mu.data.sum()) - 1.0) < 1e-12
    assert np.all(iv.mu.data >= 0)
    iv.validate()


def test_importance_tie_breaks_toward_language():
    iv = modality_importance(_alpha([1.0, 1.0, 1.0]), np.full(3, 1 / 3),
                             np.full(3, 0.37))
    assert iv.dominant == "L"
    assert iv.aux == ("A", "V")


def test_roles_partition_and_order():
    assert select_roles(np.array([0.5, 0.3, 0.2])) == ("V", ("L", "A"))
    assert select_roles(np.array([0.2, 0.5, 0.3])) == ("A", ("L", "V"))
    assert select_roles(np.array([0.2, 0.3, 0.5])) == ("L", ("A", "V"))
    dom, aux = select_roles(np.full(3, 1 / 3))
    assert dom == "L" and set(aux) | {dom} == set(MODALITIES)


def test_argmax_invariant_under_common_rescaling():
    rng = np.random.default_rng(17)
    for _ in range(25):
        raw_a = np.abs(rng.normal(size=3)) + 0.05
        raw_b = np.abs(rng.normal(size=3)) + 0.05
        w = rng.uniform(0.2, 0.8, size=3)
        iv1 = modality_importance(_alpha(raw_a), fisher_importance(raw_b), w)
        iv2 = modality_importance(_alpha(7.3 * raw_a),
                                  fisher_importance(7.3 * raw_b), w)
        assert iv1.dominant == iv2.dominant


def test_importance_rejects_bad_w():
    with pytest.raises(ContractViolation):
        modality_importance(_alpha([1, 1, 1]), np.full(3, 1 / 3),
                            np.array([0.5, 1.5, 0.5]))


def test_uniform_importance_for_ablation():
    iv = uniform_importance()
    assert np.array_equal(iv.mu.data, np.full(3, 1 / 3))
    assert iv.dominant == "L" and iv.aux == ("A", "V")


def test_importance_vector_validation():
    bad = ImportanceVector(alpha_hat=np.array([0.5, 0.5, 0.5]),
                           beta_hat=np.full(3, 1 / 3), w=np.zeros(3),
                           mu=nc.constant(np.full(3, 1 / 3)),
                           dominant="L", aux=("A", "V"))
    with pytest.raises(ContractViolation):
        bad.validate()


# ---------------------------------------------------------------------------
# confidence and head losses
# ---------------------------------------------------------------------------


def test_identical_branches_give_uniform_confidence():
    rng = np.random.default_rng(2)
    store = nc.ParameterStore()
    shared_enc = rng.normal(size=(5, 6))
    shared_head = rng.normal(size=(6, 2))
    for m in MODALITIES:
        store.add(f"enc.{m}.W", shared_enc.copy())
        store.add(f"head.{m}.W", shared_head.copy())
    seq = rng.normal(size=(4, 5))
    mask = np.ones(4, dtype=bool)

    from prlf.encoders import encode

    feats = {m: encode(seq, mask, store[f"enc.{m}.W"], 2, m) for m in MODALITIES}
    alpha = confidence_vector(head_distributions(feats, store), label=1)
    assert np.allclose(alpha.data, np.full(3, 1 / 3), rtol=0, atol=1e-12)


def test_confidence_label_vs_top_class():
    probs = {"V": nc.constant([0.9, 0.1]), "A": nc.constant([0.2, 0.8]),
             "L": nc.constant([0.5, 0.5])}
    with_label = confidence_vector(probs, label=0).data
    assert np.allclose(with_label, np.array([0.9, 0.2, 0.5]) / 1.6)
    top = confidence_vector(probs, label=None).data
    assert np.allclose(top, np.array([0.9, 0.8, 0.5]) / 2.2)


def test_pre_normalized_confidence_passes_through():
    alpha = confidence_vector({"V": nc.constant([0.8, 0.2]),
                               "A": nc.constant([0.7, 0.3]),
                               "L": nc.constant([0.5, 0.5])}, label=0).data
    assert abs(alpha.sum() - 1.0) < 1e-12
    assert np.allclose(alpha, np.array([0.8, 0.7, 0.5]) / 2.0)


def test_unimodal_loss_examples():
    sure = {m: nc.constant([0.0, 1.0]) for m in MODALITIES}
    assert unimodal_loss(sure, label=1).item() == 0.0
    uniform = {m: nc.constant([1 / 3, 1 / 3, 1 / 3]) for m in MODALITIES}
    assert abs(unimodal_loss(uniform, label=0).item() - 3 * math.log(3)) < 1e-12


# ---------------------------------------------------------------------------
# trace store
# ---------------------------------------------------------------------------


def test_fisher_store_rotation():
    store = FisherStore()
    t0 = {"a": np.array([1.0, 2.0, 3.0]), "b": np.array([4.0, 5.0, 6.0])}
    store.rotate(t0, epoch=0)
    assert store.get("a").previous is None
    t1 = {"a": np.array([7.0, 8.0, 9.0]), "b": np.array([1.0, 1.0, 1.0])}
    store.rotate(t1, epoch=1)
    rec = store.get("a")
    assert np.array_equal(rec.previous, t0["a"])
    assert np.array_equal(rec.current, t1["a"])
    rec.validate()
    payload = store.to_payload()
    back = FisherStore.from_payload(payload)
    assert np.array_equal(back.get("b").previous, t0["b"])


def test_fisher_record_invariants():
    with pytest.raises(ContractViolation):
        FisherRecord("s", current=np.array([1.0, -1.0, 0.0]), previous=None,
                     epoch=0).validate()
    with pytest.raises(ContractViolation):
        FisherRecord("s", current=np.ones(3), previous=None, epoch=2).validate()
