"""Dialogue types, the whitespace tokenizer and sequence assembly."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AssemblyError, ConfigError, EmptyCandidate, EmptyContext, HeaderMismatch

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
NO_SPEAKER = -1


class SpeakerRole(enum.IntEnum):
    SENDER = 0
    RECEIVER = 1


class Vocab:
    """Token <-> id map. Ids 0-3 are always [PAD], [UNK], [CLS], [SEP]."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise HeaderMismatch(f"vocabulary must start with {SPECIALS}, got {tokens[:4]}")
        self.itos = tokens
        self.stoi = {}
        for i, tok in enumerate(tokens):
            if tok in self.stoi:
                raise ConfigError(f"duplicate token {tok!r} in vocabulary")
            self.stoi[tok] = i

    pad_id, unk_id, cls_id, sep_id = 0, 1, 2, 3

    @classmethod
    def build(cls, words):
        seen = dict.fromkeys(w for w in words if w not in SPECIALS)
        return cls(list(SPECIALS) + list(seen))

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def get(self, token):
        return self.stoi.get(token, self.unk_id)

    def decode(self, ids):
        return [self.itos[i] for i in ids]


def tokenize(text, vocab):
    """Lowercase, split on whitespace, map unseen words to [UNK]."""
    stoi = vocab.stoi if isinstance(vocab, Vocab) else vocab
    unk = stoi.get(UNK, Vocab.unk_id)
    return [stoi.get(w, unk) for w in text.lower().split()]


@dataclass(frozen=True)
class Utterance:
    tokens: tuple
    speaker: SpeakerRole = SpeakerRole.SENDER

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "speaker", SpeakerRole(self.speaker))


@dataclass(frozen=True)
class Dialogue:
    context: tuple
    candidates: tuple
    labels: tuple
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(self.context))
        cands = tuple(c if isinstance(c, Utterance) else Utterance(c) for c in self.candidates)
        object.__setattr__(self, "candidates", cands)
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if len(self.candidates) != len(self.labels) or not self.candidates:
            raise ConfigError(
                f"need |candidates| = |labels| >= 1, got {len(self.candidates)} and {len(self.labels)}")
        if any(y not in (0, 1) for y in self.labels):
            raise ConfigError(f"labels must be 0/1, got {self.labels}")

    @property
    def positive_index(self):
        return self.labels.index(1) if 1 in self.labels else None


@dataclass(frozen=True)
class AssemblyConfig:
    max_len: int = 64
    max_utterances: int = 20

    def __post_init__(self):
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        if self.max_utterances < 1:
            raise ConfigError("max_utterances must be >= 1")


@dataclass(frozen=True)
class TaggedSequence:
    """Flat [CLS] u1 [SEP] ... uk [SEP] r [SEP] [PAD]... layout.

    utt_index is 1-based over real tokens and 0 on padding; speaker holds
    SpeakerRole values, NO_SPEAKER (-1) on padding.
    """

    token_ids: np.ndarray
    utt_index: np.ndarray
    speaker: np.ndarray
    pad_mask: np.ndarray
    n_utterances: int = field(default=0)

    def __post_init__(self):
        for name in ("token_ids", "utt_index", "speaker", "pad_mask"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def l(self):
        return len(self.token_ids)

    @property
    def n_real(self):
        return int(self.pad_mask.sum())


def longest_first(lengths, response_len, budget):
    """Trim token counts until sum(lengths) + response_len <= budget.

    One token at a time comes off the currently longest context utterance
    (lowest index on ties). The response shrinks only once every context
    utterance is down to a single token.
    """
    lengths = list(lengths)
    total = sum(lengths) + response_len
    while total > budget:
        longest = max(range(len(lengths)), key=lambda i: (lengths[i], -i))
        if lengths[longest] > 1:
            lengths[longest] -= 1
        elif response_len > 1:
            response_len -= 1
        else:
            raise AssemblyError(f"cannot fit {len(lengths)} utterances into budget {budget}")
        total -= 1
    return lengths, response_len


def assemble(dialogue, candidate_idx, cfg):
    if not 0 <= candidate_idx < len(dialogue.candidates):
        raise AssemblyError(f"candidate index {candidate_idx} out of range")
    context = list(dialogue.context[-cfg.max_utterances:])
    if not context:
        raise EmptyContext("dialogue has no context utterances")
    response = dialogue.candidates[candidate_idx]
    if not response.tokens:
        raise EmptyCandidate(f"candidate {candidate_idx} is empty")
    if any(not u.tokens for u in context):
        raise AssemblyError("context contains an empty utterance")

    # [CLS] + one [SEP] per segment; drop the oldest turns if even one token
    # per utterance cannot fit
    while context and 2 * len(context) + 3 > cfg.max_len:
        context.pop(0)
    if not context:
        raise AssemblyError(f"max_len {cfg.max_len} cannot hold a single turn and a response")
    k = len(context)
    budget = cfg.max_len - (k + 2)
    lengths, rlen = longest_first([len(u.tokens) for u in context], len(response.tokens), budget)

    ids, utt, spk = [Vocab.cls_id], [1], [int(context[0].speaker)]
    for i, (u, n) in enumerate(zip(context, lengths), start=1):
        ids.extend(u.tokens[:n])
        ids.append(Vocab.sep_id)
        utt.extend([i] * (n + 1))
        spk.extend([int(u.speaker)] * (n + 1))
    ids.extend(response.tokens[:rlen])
    ids.append(Vocab.sep_id)
    utt.extend([k + 1] * (rlen + 1))
    spk.extend([int(SpeakerRole.SENDER)] * (rlen + 1))

    n_real = len(ids)
    pad = cfg.max_len - n_real
    return TaggedSequence(
        token_ids=np.array(ids + [Vocab.pad_id] * pad, dtype=np.int64),
        utt_index=np.array(utt + [0] * pad, dtype=np.int64),
        speaker=np.array(spk + [NO_SPEAKER] * pad, dtype=np.int64),
        pad_mask=np.array([True] * n_real + [False] * pad),
        n_utterances=k + 1,
    )


def assemble_all(dialogue, cfg):
    return [assemble(dialogue, i, cfg) for i in range(len(dialogue.candidates))]
