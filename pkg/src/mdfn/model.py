"""The decoupling-fusing head and the full scoring model."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .dialogue import AssemblyConfig, assemble_all
from .encoder import EncoderConfig, build_encoder
from .errors import ConfigError, ShapeError
from .masks import build_mask_arrays
from .nn import GRUParams, Linear, MaskedMHSA, ParamRegistry


class Aggregator(str, enum.Enum):
    MAX_POOL = "max_pool"
    MEAN_POOL = "mean_pool"
    CNN3 = "cnn3"
    CNN_MULTI = "cnn_multi"


class Channels(str, enum.Enum):
    BOTH = "both"
    UTTERANCE_ONLY = "utterance_only"
    SPEAKER_ONLY = "speaker_only"
    NONE = "none"

    @property
    def utterance(self):
        return self in (Channels.BOTH, Channels.UTTERANCE_ONLY)

    @property
    def speaker(self):
        return self in (Channels.BOTH, Channels.SPEAKER_ONLY)


class Mode(str, enum.Enum):
    BINARY = "binary"
    MULTI_CHOICE = "multi_choice"


CNN_MULTI_WIDTHS = (2, 3, 4)


@dataclass(frozen=True)
class MdfnConfig:
    d: int = 64
    heads: int = 4
    n_decoupling: int = 1
    n_bigru_layers: int = 1
    aggregator: Aggregator = Aggregator.MAX_POOL
    fuse_gate: bool = True
    fuse_original: bool = True
    channels: Channels = Channels.BOTH

    def __post_init__(self):
        object.__setattr__(self, "aggregator", Aggregator(self.aggregator))
        object.__setattr__(self, "channels", Channels(self.channels))
        if self.n_decoupling < 1:
            raise ConfigError("n_decoupling must be >= 1")
        if self.n_bigru_layers < 1:
            raise ConfigError("n_bigru_layers must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")


# Named after the ablation rows they reproduce.
PRESETS = {
    "MDFN": {},
    "No-Mask": {"channels": Channels.NONE},
    "+UA-Mask": {"channels": Channels.UTTERANCE_ONLY},
    "+SA-Mask": {"channels": Channels.SPEAKER_ONLY},
    "-Gate": {"fuse_gate": False},
    "-Original Info": {"fuse_original": False},
    "-Original Info -Gate": {"fuse_original": False, "fuse_gate": False},
    "Mean-Pool": {"aggregator": Aggregator.MEAN_POOL},
    "CNN": {"aggregator": Aggregator.CNN3},
    "CNN-Multi": {"aggregator": Aggregator.CNN_MULTI},
}


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown ablation preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(cfg, **PRESETS[name])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    mode: Mode = Mode.MULTI_CHOICE
    max_len: int = 64
    max_utterances: int = 20
    head: MdfnConfig = field(default_factory=MdfnConfig)
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_d_ff: int = 0
    encoder_mode: str = "trainable"
    embedding_file: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.head, dict):
            object.__setattr__(self, "head", MdfnConfig(**self.head))

    @property
    def assembly(self):
        return AssemblyConfig(max_len=self.max_len, max_utterances=self.max_utterances)

    @property
    def encoder(self):
        return EncoderConfig(vocab_size=self.vocab_size, d=self.head.d, layers=self.encoder_layers,
                             heads=self.encoder_heads, max_len=self.max_len, d_ff=self.encoder_d_ff,
                             mode=self.encoder_mode, embedding_file=self.embedding_file)

    def to_dict(self):
        out = asdict(self)
        out["mode"] = self.mode.value
        out["head"]["aggregator"] = self.head.aggregator.value
        out["head"]["channels"] = self.head.channels.value
        return out

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(data)
        if "head" in data:
            hk = set(MdfnConfig.__dataclass_fields__)
            bad = set(data["head"]) - hk
            if bad:
                raise ConfigError(f"unknown head config keys: {sorted(bad)}")
            data["head"] = MdfnConfig(**data["head"])
        return cls(**data)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_model_config(path, vocab_size=None, ablation=None):
    data = json.loads(Path(path).read_text())
    if vocab_size is not None:
        data.setdefault("vocab_size", vocab_size)
    cfg = ModelConfig.from_dict(data)
    if ablation:
        cfg = replace(cfg, head=apply_preset(cfg.head, ablation))
    return cfg


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    token_ids: np.ndarray   # [B, l]
    utt_index: np.ndarray   # [B, l]
    speaker: np.ndarray     # [B, l]
    pad_mask: np.ndarray    # [B, l]
    n_utterances: np.ndarray  # [B]

    def __len__(self):
        return len(self.token_ids)

    @classmethod
    def from_sequences(cls, seqs):
        return cls(
            token_ids=np.stack([s.token_ids for s in seqs]),
            utt_index=np.stack([s.utt_index for s in seqs]),
            speaker=np.stack([s.speaker for s in seqs]),
            pad_mask=np.stack([s.pad_mask for s in seqs]),
            n_utterances=np.array([s.n_utterances for s in seqs]),
        )

    def trimmed(self):
        """Drop trailing columns that are padding in every row."""
        n = int(self.pad_mask.sum(axis=1).max())
        if n == self.token_ids.shape[1]:
            return self
        return Batch(self.token_ids[:, :n], self.utt_index[:, :n], self.speaker[:, :n],
                     self.pad_mask[:, :n], self.n_utterances)

    def membership(self):
        """[B, U, l] bool: position j belongs to utterance u+1."""
        u = int(self.n_utterances.max())
        ids = np.arange(1, u + 1)
        return self.utt_index[:, None, :] == ids[None, :, None]


# ---------------------------------------------------------------- head pieces

@dataclass
class ChannelOutputs:
    c1: T.Tensor = None
    c2: T.Tensor = None
    c3: T.Tensor = None
    c4: T.Tensor = None


class DecouplingBlock:
    """Four parameter-independent masked attentions over the same input."""

    def __init__(self, reg, name, cfg):
        self.attn = {}
        if cfg.channels.utterance:
            self.attn["c1"] = MaskedMHSA(reg, f"{name}.m1", cfg.d, cfg.heads)
            self.attn["c2"] = MaskedMHSA(reg, f"{name}.m2", cfg.d, cfg.heads)
        if cfg.channels.speaker:
            self.attn["c3"] = MaskedMHSA(reg, f"{name}.m3", cfg.d, cfg.heads)
            self.attn["c4"] = MaskedMHSA(reg, f"{name}.m4", cfg.d, cfg.heads)


def decouple(E, masks, block):
    """C_i = MHSA_i(E, M_i) for each mask the block was built with.

    ``masks`` is [..., 4, l, l] (or a MaskSet) ordered m1..m4.
    """
    masks = masks.stacked() if hasattr(masks, "stacked") else np.asarray(masks)
    if masks.shape[-1] != E.shape[-2]:
        raise ShapeError(f"mask length {masks.shape[-1]} vs sequence length {E.shape[-2]}")
    out = ChannelOutputs()
    for key, attn in block.attn.items():
        idx = int(key[1]) - 1
        setattr(out, key, attn(E, masks[..., idx, :, :]))
    return out


class Gate:
    """P = sigmoid(FC([relu(FC(h(E, Ebar))), relu(FC(h(E, Ehat)))]))."""

    def __init__(self, reg, name, d, use_original=True):
        self.use_original = use_original
        width = 4 * d if use_original else d
        self.fc1 = Linear(reg, f"{name}.fc1", width, d)
        self.fc2 = Linear(reg, f"{name}.fc2", width, d)
        self.fc3 = Linear(reg, f"{name}.fc3", 2 * d, d)


def _heuristics(E, X, use_original):
    if not use_original:
        return X
    return T.concat([E, X, E - X, E * X], axis=-1)


def gate(E, Ebar, Ehat, params):
    if not (E.shape == Ebar.shape == Ehat.shape):
        raise ShapeError(f"gate inputs differ in shape: {E.shape}, {Ebar.shape}, {Ehat.shape}")
    e1 = T.relu(params.fc1(_heuristics(E, Ebar, params.use_original)))
    e2 = T.relu(params.fc2(_heuristics(E, Ehat, params.use_original)))
    return T.sigmoid(params.fc3(T.concat([e1, e2], axis=-1)))


class Fuser:
    def __init__(self, reg, name, cfg):
        if cfg.fuse_gate:
            self.gate = Gate(reg, f"{name}.gate", cfg.d, cfg.fuse_original)
            self.proj = None
        else:
            self.gate = None
            self.proj = Linear(reg, f"{name}.proj", 2 * cfg.d, cfg.d)


def fuse_pair(E, A, B, fuser, trace=None, tag=""):
    if fuser.gate is None:
        return fuser.proj(T.concat([A, B], axis=-1))
    P = gate(E, A, B, fuser.gate)
    if trace is not None:
        trace[f"P_{tag}"] = P
    return P * A + (1.0 - P) * B


def fuse_channels(E, C, fusers, trace=None):
    """(C_u, C_s): gated convex combinations of (C1, C2) and (C3, C4).

    A disabled channel comes back as None.
    """
    cu = fuse_pair(E, C.c1, C.c2, fusers["u"], trace, "u") if "u" in fusers else None
    cs = fuse_pair(E, C.c3, C.c4, fusers["s"], trace, "s") if "s" in fusers else None
    return cu, cs


class AggregatorParams:
    def __init__(self, reg, name, cfg):
        self.kind = cfg.aggregator
        d = cfg.d
        self.convs = []
        if self.kind is Aggregator.CNN3:
            self.convs.append((reg.param(f"{name}.conv3.w", (3, d, d)),
                               reg.param(f"{name}.conv3.b", (d,), "zeros")))
        elif self.kind is Aggregator.CNN_MULTI:
            for k in CNN_MULTI_WIDTHS:
                self.convs.append((reg.param(f"{name}.conv{k}.w", (k, d, d)),
                                   reg.param(f"{name}.conv{k}.b", (d,), "zeros")))
            self.merge = Linear(reg, f"{name}.merge", len(CNN_MULTI_WIDTHS) * d, d)


def aggregate(C, utt_index, member, params):
    """Utterance rows L [..., U, d] pooled from word rows C [..., l, d].

    ``member`` [..., U, l] marks which (real) positions belong to each
    utterance; conv variants never mix tokens across utterances.
    """
    if params.kind is Aggregator.MAX_POOL:
        return nn.max_pool_rows(C, member)
    if params.kind is Aggregator.MEAN_POOL:
        return nn.mean_pool_rows(C, member)
    pooled = [nn.max_pool_rows(nn.conv1d(C, w, b, segments=utt_index), member)
              for w, b in params.convs]
    if params.kind is Aggregator.CNN3:
        return pooled[0]
    return params.merge(T.concat(pooled, axis=-1))


class BiGRU:
    def __init__(self, reg, name, d, layers):
        self.layers = []
        for i in range(layers):
            d_in = d if i == 0 else 2 * d
            self.layers.append((GRUParams(reg, f"{name}.{i}.fwd", d_in, d),
                                GRUParams(reg, f"{name}.{i}.bwd", d_in, d)))


def integrate(L, lengths, bigru):
    """[forward final state at the last utterance ; backward final state at
    the first utterance] of the top BiGRU layer, [..., 2d]."""
    squeeze = L.ndim == 2
    if squeeze:
        L = L.reshape((1,) + L.shape)
        lengths = [L.shape[1]] if lengths is None else lengths
    lengths = np.asarray(lengths)
    xs = L
    for fwd, bwd in bigru.layers:
        hs_f, last_f = nn.gru_sequence(xs, lengths, fwd)
        hs_b, last_b = nn.gru_sequence(xs, lengths, bwd, reverse=True)
        xs = T.concat([hs_f, hs_b], axis=-1)
    v = T.concat([last_f, last_b], axis=-1)
    return v.reshape(v.shape[1:]) if squeeze else v


def fuse_dialogue(v1, v2, params):
    """v = tanh(W [v1; v2] + b); a missing channel contributes zeros."""
    ref = v1 if v1 is not None else v2
    zeros = T.Tensor(np.zeros(ref.shape, dtype=ref.dtype))
    return T.tanh(params(T.concat([v1 if v1 is not None else zeros,
                                   v2 if v2 is not None else zeros], axis=-1)))


def score(v, params, mode):
    """Binary: [.., 2] logits. MultiChoice: one logit per row, [..]."""
    logits = params(v)
    if Mode(mode) is Mode.MULTI_CHOICE:
        if logits.shape[-1] != 1:
            raise ConfigError("multi-choice scorer must emit a single logit")
        return logits.reshape(logits.shape[:-1])
    if logits.shape[-1] != 2:
        raise ConfigError("binary scorer must emit two logits")
    return logits


def probabilities(logits, mode, n_candidates=None):
    """g(c, r): softmax[1] of each pair (Binary) or softmax over each
    context's candidates (MultiChoice, logits grouped by ``n_candidates``)."""
    z = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits, dtype=np.float64)
    if Mode(mode) is Mode.BINARY:
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True))[..., 1]
    z = z.reshape(-1, n_candidates or z.shape[-1])
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(-1)


def loss(logits, labels, mode, n_candidates=None, clamp=1e-12):
    """Mean cross-entropy.

    Binary: -[y log g + (1-y) log(1-g)] averaged over pairs. MultiChoice:
    -sum_k y_k log g_k averaged over contexts, logits grouped in runs of
    ``n_candidates``.
    """
    labels = np.asarray(labels)
    if Mode(mode) is Mode.BINARY:
        return T.softmax_cross_entropy(logits, labels.astype(np.int64), clamp)
    n = n_candidates or logits.shape[-1]
    grouped = logits.reshape((-1, n))
    y = labels.reshape(-1, n)
    if (y.sum(axis=1) != 1).any():
        # several positives: sum their log-probabilities
        logp = T.log_softmax(grouped, axis=-1)
        floor = np.log(clamp)
        if (logp.data < floor).any():
            logp = T.clamp_min(logp, floor)
        return T.sum_(logp * y.astype(logp.dtype)) * (-1.0 / grouped.shape[0])
    return T.softmax_cross_entropy(grouped, y.argmax(axis=1), clamp)


# ---------------------------------------------------------------- full model

class MDFN:
    """Encoder + decoupling-fusing head + scorer, all parameters in ``registry``."""

    def __init__(self, cfg, seed=0, dtype=None):
        self.cfg = cfg
        self.seed = seed
        h = cfg.head
        self.registry = reg = ParamRegistry(seed=seed, dtype=dtype)
        self.encoder = build_encoder(reg, cfg.encoder)
        ch = h.channels
        if ch is Channels.NONE:
            self.pooler = Linear(reg, "head.pooler", h.d, h.d)
        else:
            self.blocks = [DecouplingBlock(reg, f"head.decouple.{i}", h) for i in range(h.n_decoupling)]
            self.fusers = []
            self.restack = []
            for i in range(h.n_decoupling):
                f = {}
                if ch.utterance:
                    f["u"] = Fuser(reg, f"head.fuse.{i}.u", h)
                if ch.speaker:
                    f["s"] = Fuser(reg, f"head.fuse.{i}.s", h)
                self.fusers.append(f)
                if i < h.n_decoupling - 1:
                    width = h.d * (int(ch.utterance) + int(ch.speaker))
                    self.restack.append(Linear(reg, f"head.restack.{i}", width, h.d))
            self.aggregators = {}
            self.bigrus = {}
            for key, on in (("u", ch.utterance), ("s", ch.speaker)):
                if on:
                    self.aggregators[key] = AggregatorParams(reg, f"head.aggregate.{key}", h)
                    self.bigrus[key] = BiGRU(reg, f"head.bigru.{key}", h.d, h.n_bigru_layers)
            self.dialogue_fc = Linear(reg, "head.dialogue", 4 * h.d, h.d)
        n_out = 2 if cfg.mode is Mode.BINARY else 1
        self.classifier = Linear(reg, "head.classifier", h.d, n_out)

    @property
    def n_params(self):
        return self.registry.count()

    def batch(self, dialogues):
        """Assemble every candidate of every dialogue, in order."""
        seqs = []
        for d in dialogues:
            seqs.extend(assemble_all(d, self.cfg.assembly))
        return Batch.from_sequences(seqs).trimmed()

    def masks(self, batch):
        masks, _ = build_mask_arrays(batch.utt_index, batch.speaker, batch.pad_mask,
                                     dtype=self.registry.dtype)
        return masks

    def encode(self, batch):
        return self.encoder(batch.token_ids, batch.pad_mask)

    def forward(self, batch, trace=None):
        """Logits for every sequence in ``batch``."""
        E = self.encode(batch)
        h = self.cfg.head
        if h.channels is Channels.NONE:
            real = batch.pad_mask[:, None, :]
            pooled = nn.max_pool_rows(E, real).reshape((len(batch), h.d))
            v = T.tanh(self.pooler(pooled))
            return score(v, self.classifier, self.cfg.mode)

        masks = self.masks(batch)
        X = E
        for i, block in enumerate(self.blocks):
            C = decouple(X, masks, block)
            cu, cs = fuse_channels(X, C, self.fusers[i], trace)
            if trace is not None:
                trace[f"block{i}"] = (C, cu, cs)
            if i < len(self.restack):
                X = self.restack[i](T.concat([c for c in (cu, cs) if c is not None], axis=-1))

        member = batch.membership() & batch.pad_mask[:, None, :]
        vs = {}
        for key, c in (("u", cu), ("s", cs)):
            if c is None:
                continue
            L = aggregate(c, batch.utt_index, member, self.aggregators[key])
            vs[key] = integrate(L, batch.n_utterances, self.bigrus[key])
        v = fuse_dialogue(vs.get("u"), vs.get("s"), self.dialogue_fc)
        if trace is not None:
            trace["v"] = v
        return score(v, self.classifier, self.cfg.mode)

    def loss(self, batch, labels, n_candidates=None):
        return loss(self.forward(batch), labels, self.cfg.mode, n_candidates)

    def score_dialogues(self, dialogues):
        """g(c, r) for every candidate, grouped per dialogue."""
        with T.no_grad():
            out = []
            same_n = len({len(d.candidates) for d in dialogues}) == 1
            if same_n and dialogues:
                n = len(dialogues[0].candidates)
                logits = self.forward(self.batch(dialogues))
                probs = probabilities(logits, self.cfg.mode, n)
                return [probs[i * n:(i + 1) * n] for i in range(len(dialogues))]
            for d in dialogues:
                logits = self.forward(self.batch([d]))
                out.append(probabilities(logits, self.cfg.mode, len(d.candidates)))
            return out
