"""The four decoupling masks over a tagged sequence.

m1: same utterance, m2: other utterances, m3: same speaker, m4: other
speaker. Entries are 0 (attend) or NEG_INF (blocked).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NEG_INF

MASK_NAMES = ("m1", "m2", "m3", "m4")


@dataclass(frozen=True)
class MaskSet:
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray
    fallback_rows: dict

    def __iter__(self):
        return iter((self.m1, self.m2, self.m3, self.m4))

    def stacked(self):
        return np.stack(list(self))

    def to_json(self):
        def grid(m):
            return [["0" if v == 0 else "-inf" for v in row] for row in m]

        return {
            "l": int(self.m1.shape[0]),
            "masks": {name: grid(getattr(self, name)) for name in MASK_NAMES},
            "fallback_rows": {name: sorted(int(i) for i in rows)
                              for name, rows in self.fallback_rows.items()},
        }


def allow_matrices(utt_index, speaker, pad_mask):
    """Boolean allow-matrices [..., 4, l, l] before fallback, plus the real-pair mask."""
    t = np.asarray(utt_index)
    s = np.asarray(speaker)
    real = np.asarray(pad_mask, dtype=bool)
    pair = real[..., :, None] & real[..., None, :]
    same_t = t[..., :, None] == t[..., None, :]
    same_s = s[..., :, None] == s[..., None, :]
    allow = np.stack([same_t, ~same_t, same_s, ~same_s], axis=-3) & pair[..., None, :, :]
    return allow, real


def build_mask_arrays(utt_index, speaker, pad_mask, dtype=np.float32):
    """Vectorised builder over any leading batch shape.

    Returns (masks [..., 4, l, l], fallback [..., 4, l] bool). Real rows with
    nothing to attend to, and every padded row, attend only to themselves.
    """
    allow, real = allow_matrices(utt_index, speaker, pad_mask)
    l = allow.shape[-1]
    empty = ~allow.any(axis=-1)
    fallback = empty & real[..., None, :]
    eye = np.eye(l, dtype=bool)
    allow = allow | (empty[..., None] & eye)
    masks = np.where(allow, 0.0, NEG_INF).astype(dtype)
    return masks, fallback


def build_masks(seq):
    masks, fallback = build_mask_arrays(seq.utt_index, seq.speaker, seq.pad_mask)
    rows = {name: frozenset(np.flatnonzero(fallback[i]).tolist())
            for i, name in enumerate(MASK_NAMES)}
    parts = [np.array(m) for m in masks]
    for m in parts:
        m.setflags(write=False)
    return MaskSet(*parts, fallback_rows=rows)


def padding_mask(pad_mask, dtype=np.float32):
    """Encoder mask: real rows see real columns, padded rows see themselves."""
    real = np.asarray(pad_mask, dtype=bool)
    l = real.shape[-1]
    allow = real[..., :, None] & real[..., None, :]
    allow = allow | (~real[..., :, None] & np.eye(l, dtype=bool))
    return np.where(allow, 0.0, NEG_INF).astype(dtype)
