import json

import numpy as np
from hypothesis import given, settings

from mdfn import tensor as T
from mdfn.dialogue import AssemblyConfig, assemble
from mdfn.masks import build_mask_arrays, build_masks, padding_mask
from mdfn.tensor import NEG_INF, Tensor

from .conftest import R, S, make_dialogue
from .strategies import tagged_sequences

F, M = 0, 1


def _masks(t, s, pad=None):
    t = np.array(t)
    pad = np.ones(len(t), bool) if pad is None else np.array(pad)
    m, fb = build_mask_arrays(t, np.array(s), pad)
    return m, fb


def test_worked_example():
    m, _ = _masks([1, 1, 2, 2, 3, 3], [F, F, M, M, F, F])
    m1, m2, m3, m4 = m
    assert m1[0, 1] == 0 and m1[0, 2] == NEG_INF
    assert m3[0, 4] == 0 and m3[0, 2] == NEG_INF
    assert m4[0, 2] == 0
    assert m2[0, 1] == NEG_INF and m2[0, 5] == 0


def test_single_utterance_other_mask_falls_back():
    m, fb = _masks([1, 1, 1], [F, F, F])
    assert np.array_equal(m[1], np.where(np.eye(3, dtype=bool), 0.0, NEG_INF))
    assert fb[1].tolist() == [True, True, True]
    assert not fb[0].any()
    # one speaker only: m4 falls back too
    assert fb[3].all()


def test_mask_set_json_and_fallback_rows():
    seq = assemble(make_dialogue([1], response_len=1, speakers=[S]), 0, AssemblyConfig(max_len=6))
    ms = build_masks(seq)
    assert ms.fallback_rows["m4"] == frozenset({0, 1, 2, 3, 4})
    js = json.loads(json.dumps(ms.to_json()))
    assert js["l"] == 6
    assert js["masks"]["m1"][0][:3] == ["0", "0", "0"]
    assert js["masks"]["m1"][0][5] == "-inf"
    assert js["fallback_rows"]["m4"] == [0, 1, 2, 3, 4]


def _check_mask_properties(seq):
    masks, fb = build_mask_arrays(seq.utt_index, seq.speaker, seq.pad_mask)
    t, s, real = seq.utt_index, seq.speaker, seq.pad_mask
    l = seq.l
    assert np.isin(masks, [0.0, np.float32(NEG_INF)]).all()
    allow = masks == 0
    preds = [t[:, None] == t[None, :], t[:, None] != t[None, :],
             s[:, None] == s[None, :], s[:, None] != s[None, :]]
    eye = np.eye(l, dtype=bool)
    for k in range(4):
        for i in range(l):
            if not real[i]:
                assert np.array_equal(allow[k, i], eye[i])
            elif fb[k, i]:
                assert np.array_equal(allow[k, i], eye[i])
                assert not (preds[k][i] & real).any()
            else:
                assert np.array_equal(allow[k, i], preds[k][i] & real)
        # padded columns blocked for every real row
        assert not allow[k][np.ix_(real, ~real)].any()
        # symmetric over real positions
        sub = allow[k][np.ix_(real, real)]
        assert np.array_equal(sub, sub.T)
        assert allow[k].any(axis=1).all()
    both = real[:, None] & real[None, :]
    for a, b in ((0, 1), (2, 3)):
        ok = both & ~fb[a][:, None] & ~fb[b][:, None]
        assert ((allow[a] ^ allow[b]) | ~ok).all()
    # finite softmax, zero mass on padding
    scores = np.random.default_rng(0).normal(size=(4, l, l)).astype(np.float32)
    p = T.masked_softmax(Tensor(scores), masks).data
    assert np.isfinite(p).all()
    assert (p[:, real][:, :, ~real] == 0).all()


@settings(max_examples=200, deadline=None)
@given(tagged_sequences())
def test_mask_partition_properties(seq):
    _check_mask_properties(seq)


def test_batched_builder_matches_single(rng):
    from .strategies import random_sequence

    seqs = [random_sequence(rng, 20) for _ in range(5)]
    batch, fb = build_mask_arrays(np.stack([s.utt_index for s in seqs]),
                                  np.stack([s.speaker for s in seqs]),
                                  np.stack([s.pad_mask for s in seqs]))
    for b, s in enumerate(seqs):
        one = build_masks(s)
        assert np.array_equal(batch[b], one.stacked())


def test_encoder_padding_mask():
    m = padding_mask(np.array([True, True, False]))
    assert (m[:2, :2] == 0).all() and (m[:2, 2] == NEG_INF).all()
    assert m[2].tolist() == [NEG_INF, NEG_INF, 0.0]


def test_masks_read_only():
    seq = assemble(make_dialogue([2, 2]), 0, AssemblyConfig(max_len=10))
    ms = build_masks(seq)
    try:
        ms.m1[0, 0] = 1
    except ValueError:
        return
    raise AssertionError("mask arrays should be read-only")
