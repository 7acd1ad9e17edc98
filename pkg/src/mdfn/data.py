"""JSONL dialogue files and the synthetic task generator.

Record schema, one JSON object per line::

    {"context": [{"speaker": "F", "text": "..."}, ...],
     "candidates": ["...", ...],
     "labels": [0, 1, 0, 0]}

An optional ``"id"`` string is carried through. The candidate response is
spoken by the party opposite the final context turn, so context turns by
that party are tagged Sender and the rest Receiver.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dialogue import SPECIALS, Dialogue, SpeakerRole, Utterance, Vocab, tokenize
from .errors import ConfigError, MdfnError, SchemaError
from .model import Mode

log = logging.getLogger(__name__)

SPEAKERS = ("F", "M")


class Dataset(list):
    """Loaded dialogues plus the SchemaErrors of rejected lines."""

    def __init__(self, items=(), errors=()):
        super().__init__(items)
        self.errors = list(errors)


def parse_record(obj, vocab, mode=Mode.BINARY, line=0):
    if not isinstance(obj, dict):
        raise SchemaError(line, "record is not an object")
    for key in ("context", "candidates", "labels"):
        if key not in obj:
            raise SchemaError(line, f"missing field {key!r}")
    ctx, cands, labels = obj["context"], obj["candidates"], obj["labels"]
    if not isinstance(ctx, list) or not ctx:
        raise SchemaError(line, "context must be a non-empty list")
    if not isinstance(cands, list) or not isinstance(labels, list):
        raise SchemaError(line, "candidates and labels must be lists")
    if len(cands) != len(labels) or not cands:
        raise SchemaError(line, f"{len(cands)} candidates vs {len(labels)} labels")
    if any(y not in (0, 1) or isinstance(y, bool) for y in labels):
        raise SchemaError(line, "labels must be 0 or 1")
    if Mode(mode) is Mode.MULTI_CHOICE and sum(labels) != 1:
        raise SchemaError(line, f"multi-choice record needs exactly one positive, got {sum(labels)}")
    for turn in ctx:
        if not isinstance(turn, dict) or turn.get("speaker") not in SPEAKERS:
            raise SchemaError(line, f"speaker must be one of {SPEAKERS}")
        if not isinstance(turn.get("text"), str):
            raise SchemaError(line, "turn text must be a string")
    last = ctx[-1]["speaker"]
    utterances = []
    for turn in ctx:
        ids = tokenize(turn["text"], vocab)
        if not ids:
            raise SchemaError(line, "empty context utterance")
        role = SpeakerRole.RECEIVER if turn["speaker"] == last else SpeakerRole.SENDER
        utterances.append(Utterance(ids, role))
    candidates = []
    for text in cands:
        if not isinstance(text, str):
            raise SchemaError(line, "candidates must be strings")
        ids = tokenize(text, vocab)
        if not ids:
            raise SchemaError(line, "empty candidate")
        candidates.append(Utterance(ids, SpeakerRole.SENDER))
    return Dialogue(utterances, candidates, labels, id=str(obj.get("id", f"line{line}")))


def read_jsonl(path, mode, vocab):
    """Parse a JSONL file; bad lines are logged, counted and skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MdfnError(f"cannot read {path}: {exc}") from exc
    out = Dataset()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            out.errors.append(SchemaError(lineno, f"invalid JSON: {exc.msg}"))
            continue
        try:
            out.append(parse_record(obj, vocab, mode, lineno))
        except SchemaError as exc:
            out.errors.append(exc)
    if out.errors:
        log.warning("%s: rejected %d malformed line(s): %s", path, len(out.errors),
                    ", ".join(str(e.line) for e in out.errors[:10]))
    return out


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- synthetic

class Task(str, enum.Enum):
    SPEAKER_ECHO = "speaker_echo"
    LAST_UTTERANCE_ECHO = "last_utterance_echo"


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 80
    n_keys: int = 16
    n_dialogues: int = 1000
    min_turns: int = 2
    max_turns: int = 4
    min_utt_len: int = 2
    max_utt_len: int = 4
    n_candidates: int = 4
    task: Task = Task.SPEAKER_ECHO
    valid_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if not 2 <= self.min_turns <= self.max_turns:
            raise ConfigError("need 2 <= min_turns <= max_turns")
        if not 2 <= self.min_utt_len <= self.max_utt_len:
            raise ConfigError("need 2 <= min_utt_len <= max_utt_len (one key plus filler)")
        if self.n_candidates < 2:
            raise ConfigError("n_candidates must be >= 2")
        if self.n_keys < self.max_turns + self.n_candidates:
            raise ConfigError(f"n_keys must be >= max_turns + n_candidates = "
                              f"{self.max_turns + self.n_candidates}")
        fillers = self.vocab_size - len(SPECIALS) - self.n_keys
        if fillers < self.max_turns * (self.max_utt_len - 1) + self.max_utt_len:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves only {fillers} filler words")
        if not (0 <= self.valid_fraction < 1 and 0 <= self.test_fraction < 1
                and self.valid_fraction + self.test_fraction < 1):
            raise ConfigError("split fractions must be in [0, 1) and sum below 1")
        if self.n_dialogues < 1:
            raise ConfigError("n_dialogues must be >= 1")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["task"] = self.task.value
        return out

    @property
    def key_words(self):
        return [f"key{i}" for i in range(self.n_keys)]

    @property
    def filler_words(self):
        return [f"w{i}" for i in range(self.vocab_size - len(SPECIALS) - self.n_keys)]

    def vocab(self):
        return Vocab(list(SPECIALS) + self.key_words + self.filler_words)


def _utterance(rng, key, fillers, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    words = list(rng.choice(fillers, size=n - 1, replace=True))
    words.insert(int(rng.integers(0, n)), key)
    return words


def target_utterances(turns, task):
    """1-based context indices whose key is the answer, and whose keys make distractors."""
    k = len(turns)
    if Task(task) is Task.SPEAKER_ECHO:
        # the response comes from the party opposite turn k
        sender = [i for i in range(1, k + 1) if (k - i) % 2 == 1]
        receiver = [i for i in range(1, k + 1) if (k - i) % 2 == 0]
        return sender[-1], receiver
    return k, list(range(1, k))


def generate_dialogue(rng, cfg, dialogue_id):
    keys = cfg.key_words
    fillers = cfg.filler_words
    k = int(rng.integers(cfg.min_turns, cfg.max_turns + 1))
    first = int(rng.integers(0, 2))
    chosen = [keys[i] for i in rng.permutation(len(keys))]
    turn_keys, spare = chosen[:k], chosen[k:]
    turns = []
    for i in range(k):
        words = _utterance(rng, turn_keys[i], fillers, cfg.min_utt_len, cfg.max_utt_len)
        turns.append({"speaker": SPEAKERS[(first + i) % 2], "text": " ".join(words)})

    answer, pool = target_utterances(turns, cfg.task)
    distract = [turn_keys[i - 1] for i in rng.permutation(pool)][: cfg.n_candidates - 1]
    distract += spare[: cfg.n_candidates - 1 - len(distract)]

    used = {w for t in turns for w in t["text"].split()}
    free = [w for w in fillers if w not in used]
    cand_keys = [turn_keys[answer - 1]] + distract
    perm = rng.permutation(cfg.n_candidates)
    candidates, labels = [None] * cfg.n_candidates, [0] * cfg.n_candidates
    for slot, key in zip(perm, cand_keys):
        candidates[slot] = " ".join(_utterance(rng, key, free, cfg.min_utt_len, cfg.max_utt_len))
    labels[int(perm[0])] = 1
    rec = {"id": dialogue_id, "context": turns, "candidates": candidates, "labels": labels}
    if oracle_pick(rec, cfg.task) != int(perm[0]):
        raise MdfnError(f"generator produced an ambiguous dialogue {dialogue_id}")
    return rec


def oracle_pick(record, task):
    """Rule-based solver: the unique candidate sharing a word with the
    target turn (sender's latest turn, or the final turn). None if not unique."""
    turns = record["context"]
    answer, _ = target_utterances(turns, task)
    target = set(turns[answer - 1]["text"].split())
    hits = [i for i, c in enumerate(record["candidates"]) if target & set(c.split())]
    return hits[0] if len(hits) == 1 else None


def generate(cfg):
    """Deterministic (train, valid, test) record lists and the vocabulary."""
    rng = np.random.default_rng(cfg.seed)
    records = [generate_dialogue(rng, cfg, f"d{i:06d}") for i in range(cfg.n_dialogues)]
    n_valid = int(round(cfg.n_dialogues * cfg.valid_fraction))
    n_test = int(round(cfg.n_dialogues * cfg.test_fraction))
    n_train = cfg.n_dialogues - n_valid - n_test
    splits = {
        "train": records[:n_train],
        "valid": records[n_train:n_train + n_valid],
        "test": records[n_train + n_valid:],
    }
    return splits, cfg.vocab()


def write_splits(out_dir, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, vocab = generate(cfg)
    for name, recs in splits.items():
        write_jsonl(out / f"{name}.jsonl", recs)
    vocab.save(out / "vocab.txt")
    return {name: len(recs) for name, recs in splits.items()}


def load_split(data_dir, name, mode, vocab=None):
    data_dir = Path(data_dir)
    vocab = vocab or Vocab.load(data_dir / "vocab.txt")
    return read_jsonl(data_dir / f"{name}.jsonl", mode, vocab)
