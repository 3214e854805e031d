"""Synthetic generation, masking protocols, and dataset file round-trips."""

import numpy as np
import pytest

from prlf.datagen import (Dataset, SynthConfig, apply_inter_mask, apply_intra_mask,
                          generate, load, save, subset_from_string)
from prlf.encoders import MODALITIES
from prlf.errors import ContractViolation, DataFormatError
from prlf.seeding import make_rng

SMALL = SynthConfig(samples=40, classes=2,
                    seq_lens={"V": 8, "A": 8, "L": 8},
                    feat_dims={"V": 5, "A": 5, "L": 7},
                    key_frames=3, seed=123)


def test_generation_is_deterministic():
    a, b = generate(SMALL), generate(SMALL)
    for sa, sb in zip(a.samples, b.samples):
        for m in MODALITIES:
            assert np.array_equal(sa.sequences[m], sb.sequences[m])
    assert all(a.truth[s.id].key_frames == b.truth[s.id].key_frames
               for s in a.samples)


def test_class_balance_within_five_percent():
    ds = generate(SynthConfig(samples=1200, seed=7))
    labels = [s.label for s in ds.samples]
    for c in (0, 1):
        assert abs(labels.count(c) / len(labels) - 0.5) < 0.05


def test_ground_truth_stays_out_of_the_record():
    ds = generate(SMALL)
    s = ds.samples[0]
    assert not hasattr(s, "informative")
    assert ds.truth[s.id].informative in MODALITIES
    assert len(ds.truth[s.id].key_frames) == SMALL.key_frames


def test_noise_limit_leaves_nonkey_frames_near_zero():
    # the signal amplitude is 3 * noise_scale, so everything shrinks with
    # noise_scale; the non-key frames are pure noise and vanish fastest
    quiet = SynthConfig(samples=10, seq_lens={"V": 8, "A": 8, "L": 8},
                        feat_dims={"V": 5, "A": 5, "L": 5},
                        noise_scale=1e-6, key_frames=2, seed=3)
    ds = generate(quiet)
    protos = {}
    for s in ds.samples:
        info = ds.truth[s.id].informative
        key = ds.truth[s.id].key_frames
        seq = s.sequences[info]
        nonkey = [i for i in range(8) if i not in key]
        assert np.abs(seq[nonkey]).max() < 1e-4
        protos.setdefault((info, s.label), []).append(seq[key].mean(axis=0))
    # key frames of same (modality, class) share the prototype direction
    for rows in protos.values():
        if len(rows) < 2:
            continue
        a, b = rows[0], rows[1]
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos > 0.5


def test_linear_probe_separates_key_frames():
    from sklearn.linear_model import LogisticRegression

    ds = generate(SynthConfig(samples=400, seed=21))
    feats, labels = [], []
    for s in ds.samples:
        gt = ds.truth[s.id]
        feats.append(s.sequences[gt.informative][gt.key_frames].mean(axis=0)[:20])
        labels.append(s.label)
    x, y = np.array(feats), np.array(labels)
    n_train = 300
    clf = LogisticRegression(max_iter=1000).fit(x[:n_train], y[:n_train])
    assert clf.score(x[n_train:], y[n_train:]) > 0.95


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def test_intra_mask_p0_is_identity():
    ds = generate(SMALL)
    s = ds.samples[0]
    out = apply_intra_mask(s, 0.0, make_rng(0))
    for m in MODALITIES:
        assert np.array_equal(out.sequences[m], s.sequences[m])
        assert np.array_equal(out.masks[m], s.masks[m])


def test_intra_mask_p1_kills_everything():
    ds = generate(SMALL)
    out = apply_intra_mask(ds.samples[0], 1.0, make_rng(0))
    for m in MODALITIES:
        assert not out.masks[m].any()
        assert np.array_equal(out.sequences[m], np.zeros_like(out.sequences[m]))


def test_intra_mask_survivor_count_matches_monte_carlo():
    ds = generate(SynthConfig(samples=1, seed=5))
    s = ds.samples[0]
    survivors = []
    for trial in range(10_000):
        out = apply_intra_mask(s, 0.5, make_rng("mc", trial))
        survivors.append(np.mean([out.masks[m].sum() for m in MODALITIES]))
    assert abs(np.mean(survivors) - 8.0) < 0.2  # T=16 at p=0.5


def test_intra_mask_never_alters_survivors():
    ds = generate(SMALL)
    s = ds.samples[3]
    out = apply_intra_mask(s, 0.6, make_rng(9))
    for m in MODALITIES:
        kept = out.masks[m]
        assert np.array_equal(out.sequences[m][kept], s.sequences[m][kept])
        assert np.array_equal(out.sequences[m][~kept],
                              np.zeros_like(out.sequences[m][~kept]))


def test_same_stream_gives_nested_drops_as_p_grows():
    ds = generate(SMALL)
    s = ds.samples[1]
    low = apply_intra_mask(s, 0.3, make_rng(4, s.id))
    high = apply_intra_mask(s, 0.7, make_rng(4, s.id))
    for m in MODALITIES:
        dropped_low = ~low.masks[m]
        dropped_high = ~high.masks[m]
        assert np.all(dropped_high[dropped_low])  # low drops are a subset


def test_inter_mask_examples():
    ds = generate(SMALL)
    s = ds.samples[2]
    full = apply_inter_mask(s, {"V", "A", "L"})
    for m in MODALITIES:
        assert np.array_equal(full.sequences[m], s.sequences[m])
    only_l = apply_inter_mask(s, {"L"})
    assert not only_l.masks["V"].any() and not only_l.masks["A"].any()
    assert np.array_equal(only_l.sequences["L"], s.sequences["L"])
    with pytest.raises(ContractViolation):
        apply_inter_mask(s, set())


def test_inter_then_intra_touches_only_available_modalities():
    ds = generate(SMALL)
    s = ds.samples[4]
    staged = apply_inter_mask(s, {"L"})
    final = apply_intra_mask(staged, 0.5, make_rng(11))
    assert np.array_equal(final.sequences["V"], np.zeros_like(s.sequences["V"]))
    assert not final.masks["V"].any() and not final.masks["A"].any()
    # language frames may drop further but survivors keep their values
    kept = final.masks["L"]
    assert np.array_equal(final.sequences["L"][kept], s.sequences["L"][kept])


def test_subset_parsing():
    assert subset_from_string("la") == {"L", "A"}
    assert subset_from_string("l,a,v") == {"L", "A", "V"}
    with pytest.raises(ContractViolation):
        subset_from_string("lx")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def test_save_load_roundtrip_is_value_identical(tmp_path):
    ds = generate(SMALL)
    path = str(tmp_path / "ds.jsonl")
    save(ds, path)
    back = load(path)
    assert back.classes == ds.classes
    assert back.split == ds.split
    assert len(back.samples) == len(ds.samples)
    for a, b in zip(ds.samples, back.samples):
        assert a.id == b.id and a.label == b.label and a.score == b.score
        for m in MODALITIES:
            assert np.array_equal(a.sequences[m], b.sequences[m])
            assert np.array_equal(a.masks[m], b.masks[m])
    assert back.truth is not None
    for s in ds.samples:
        assert back.truth[s.id].informative == ds.truth[s.id].informative
        assert back.truth[s.id].key_frames == ds.truth[s.id].key_frames


def test_truncated_file_reports_line_number(tmp_path):
    ds = generate(SMALL)
    path = str(tmp_path / "ds.jsonl")
    save(ds, path)
    lines = open(path).read().splitlines()
    open(path, "w").write("\n".join(lines[:-3]) + "\n")
    with pytest.raises(DataFormatError) as err:
        load(path)
    assert "line" in str(err.value)


def test_label_outside_header_class_count_fails(tmp_path):
    import json

    ds = generate(SMALL)
    path = str(tmp_path / "ds.jsonl")
    save(ds, path)
    lines = open(path).read().splitlines()
    row = json.loads(lines[1])
    row["label"] = 7
    lines[1] = json.dumps(row, sort_keys=True)
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError) as err:
        load(path)
    assert "line 2" in str(err.value)


def test_mask_zero_inconsistency_fails(tmp_path):
    import json

    ds = generate(SMALL)
    path = str(tmp_path / "ds.jsonl")
    save(ds, path)
    lines = open(path).read().splitlines()
    row = json.loads(lines[1])
    row["V"]["mask"][0] = 0  # cleared bit over a nonzero frame
    lines[1] = json.dumps(row, sort_keys=True)
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError) as err:
        load(path)
    assert "masked-out" in str(err.value)


def test_incomplete_header_fails(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    open(path, "w").write('{"format": "prlf-dataset", "version": 1}\n')
    with pytest.raises(DataFormatError) as err:
        load(path)
    assert "line 1" in str(err.value)


def test_garbage_json_reports_line(tmp_path):
    ds = generate(SMALL)
    path = str(tmp_path / "ds.jsonl")
    save(ds, path)
    lines = open(path).read().splitlines()
    lines[3] = "not json"
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError) as err:
        load(path)
    assert "line 4" in str(err.value)


def test_config_validation():
    with pytest.raises(ContractViolation):
        SynthConfig(samples=10, key_frames=99).validate()
    with pytest.raises(ContractViolation):
        SynthConfig(samples=10,
                    informative_probs={"V": 0.5, "A": 0.5, "L": 0.5}).validate()
    with pytest.raises(ContractViolation):
        SynthConfig(samples=10, noise_scale=0.0).validate()
