"""Encoder pooling semantics and SampleRecord invariants."""

import numpy as np
import pytest

from prlf import numcore as nc
from prlf.encoders import SampleRecord, encode, pool
from prlf.errors import ContractViolation


def _weight(rng, d, dim):
    return nc.Tensor(rng.normal(size=(d, dim)), requires_grad=True)


def _manual_encode(seq, mask, w, k):
    """Independent re-computation: project, ReLU, live-count segment means."""
    act = np.maximum(seq @ w, 0.0)
    t = seq.shape[0]
    out = np.zeros((k, w.shape[1]))
    for seg in range(k):
        lo, hi = (t * seg) // k, (t * (seg + 1)) // k
        live = mask[lo:hi]
        if live.any():
            out[seg] = act[lo:hi][live].mean(axis=0)
    return out


def test_zero_input_encodes_to_zero():
    rng = np.random.default_rng(0)
    w = _weight(rng, 5, 6)
    feat = encode(np.zeros((8, 5)), np.ones(8, dtype=bool), w, 4, "V")
    assert np.array_equal(feat.tokens.data, np.zeros((4, 6)))
    assert feat.live  # mask is live even though values are zero


def test_each_token_pools_two_frames_when_t16_k8():
    rng = np.random.default_rng(1)
    seq = rng.normal(size=(16, 5))
    w = _weight(rng, 5, 6)
    feat = encode(seq, np.ones(16, dtype=bool), w, 8, "A")
    expected = _manual_encode(seq, np.ones(16, dtype=bool), w.data, 8)
    act = np.maximum(seq @ w.data, 0.0)
    for k in range(8):
        assert np.allclose(feat.tokens.data[k], act[2 * k:2 * k + 2].mean(axis=0))
    assert np.allclose(feat.tokens.data, expected)


def test_masking_first_segment_changes_only_token_zero():
    rng = np.random.default_rng(2)
    seq = rng.normal(size=(16, 5))
    w = _weight(rng, 5, 6)
    full = encode(seq, np.ones(16, dtype=bool), w, 8, "L").tokens.data
    mask = np.ones(16, dtype=bool)
    mask[[0, 1]] = False
    seq_masked = seq.copy()
    seq_masked[[0, 1]] = 0.0
    part = encode(seq_masked, mask, w, 8, "L").tokens.data
    assert np.array_equal(part[0], np.zeros(6))  # segment 0 has no live frames
    assert np.array_equal(part[1:], full[1:])
    assert np.allclose(part, _manual_encode(seq_masked, mask, w.data, 8))


def test_partial_segment_mask_uses_live_count_mean():
    rng = np.random.default_rng(3)
    seq = rng.normal(size=(8, 4))
    w = _weight(rng, 4, 5)
    mask = np.ones(8, dtype=bool)
    mask[0] = False
    seq2 = seq.copy()
    seq2[0] = 0.0
    feat = encode(seq2, mask, w, 4, "V").tokens.data
    assert np.allclose(feat, _manual_encode(seq2, mask, w.data, 4))
    # segment 0 = frames {0,1}; only frame 1 is live, so its mean is frame 1
    act1 = np.maximum(seq2[1] @ w.data, 0.0)
    assert np.allclose(feat[0], act1)


def test_permuting_frames_within_segment_is_invariant():
    rng = np.random.default_rng(4)
    seq = rng.normal(size=(16, 5))
    w = _weight(rng, 5, 6)
    mask = np.ones(16, dtype=bool)
    a = encode(seq, mask, w, 8, "V").tokens.data
    swapped = seq.copy()
    swapped[[2, 3]] = swapped[[3, 2]]  # both frames live in segment 1
    b = encode(swapped, mask, w, 8, "V").tokens.data
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_all_false_mask_normalizes_to_dead_feature():
    rng = np.random.default_rng(5)
    w = _weight(rng, 5, 6)
    feat = encode(np.zeros((8, 5)), np.zeros(8, dtype=bool), w, 4, "A")
    assert not feat.live
    assert np.array_equal(feat.tokens.data, np.zeros((4, 6)))


def test_encode_is_deterministic():
    rng = np.random.default_rng(6)
    seq = rng.normal(size=(12, 5))
    w = _weight(rng, 5, 6)
    mask = np.ones(12, dtype=bool)
    assert np.array_equal(encode(seq, mask, w, 4, "V").tokens.data,
                          encode(seq, mask, w, 4, "V").tokens.data)


def test_encode_shape_contracts():
    rng = np.random.default_rng(7)
    w = _weight(rng, 5, 6)
    with pytest.raises(ContractViolation):
        encode(np.zeros((8, 4)), np.ones(8, dtype=bool), w, 4, "V")  # wrong d
    with pytest.raises(ContractViolation):
        encode(np.zeros((8, 5)), np.ones(7, dtype=bool), w, 4, "V")  # mask len


def test_pool_examples():
    row = np.array([1.5, -2.0, 0.25])
    same = nc.constant(np.tile(row, (4, 1)))
    from prlf.encoders import TokenFeature

    assert np.allclose(pool(TokenFeature(same, "V", True)).data, row)
    zero = TokenFeature(nc.constant(np.zeros((3, 2))), "A", False)
    assert np.array_equal(pool(zero).data, np.zeros(2))
    two = TokenFeature(nc.constant([[1.0, 3.0], [3.0, 5.0]]), "L", True)
    assert np.array_equal(pool(two).data, [2.0, 4.0])


def test_sample_record_validation():
    seq = np.ones((4, 3))
    mask = np.array([True, True, False, True])
    bad = SampleRecord(id="x", label=0,
                       sequences={"V": seq.copy(), "A": seq.copy(), "L": seq.copy()},
                       masks={"V": mask.copy(), "A": np.ones(4, dtype=bool),
                              "L": np.ones(4, dtype=bool)})
    with pytest.raises(ContractViolation):
        bad.validate()  # masked-out frame is nonzero
    good = bad.copy()
    good.sequences["V"][2] = 0.0
    good.validate()
