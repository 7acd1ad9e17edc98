"""Token encoders producing E [.., l, d]: a small transformer or a fixed table."""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, HeaderMismatch, OverlongSequence
from .masks import padding_mask
from .nn import LayerNorm, Linear, MaskedMHSA

EMB_MAGIC = 0x424D454D  # b"MEMB" little-endian
_HEADER = struct.Struct("<4I")


class EncoderMode(str, enum.Enum):
    TRAINABLE = "trainable"
    FILE_BACKED = "file_backed"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 64
    d_ff: int = 0  # 0 means 2 * d
    mode: EncoderMode = EncoderMode.TRAINABLE
    embedding_file: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", EncoderMode(self.mode))
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must exceed the four special tokens")
        if self.d % self.heads:
            raise ConfigError(f"encoder d={self.d} not divisible by heads={self.heads}")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")

    @property
    def ffn_dim(self):
        return self.d_ff or 2 * self.d

    def to_dict(self):
        out = asdict(self)
        out["mode"] = self.mode.value
        return out


class TransformerEncoder:
    """Token + learned position embeddings, then post-LN encoder blocks
    with full bidirectional attention over real tokens."""

    def __init__(self, reg, cfg, name="encoder"):
        self.cfg = cfg
        d = cfg.d
        self.tok_emb = reg.param(f"{name}.tok_emb", (cfg.vocab_size, d))
        self.pos_emb = reg.param(f"{name}.pos_emb", (cfg.max_len, d))
        self.emb_norm = LayerNorm(reg, f"{name}.emb_norm", d)
        self.blocks = []
        for i in range(cfg.layers):
            p = f"{name}.layers.{i}"
            self.blocks.append((
                MaskedMHSA(reg, f"{p}.attn", d, cfg.heads),
                LayerNorm(reg, f"{p}.norm1", d),
                Linear(reg, f"{p}.ff1", d, cfg.ffn_dim),
                Linear(reg, f"{p}.ff2", cfg.ffn_dim, d),
                LayerNorm(reg, f"{p}.norm2", d),
            ))

    def __call__(self, token_ids, pad_mask):
        token_ids = np.asarray(token_ids)
        l = token_ids.shape[-1]
        if l > self.cfg.max_len:
            raise OverlongSequence(f"sequence length {l} exceeds encoder max_len {self.cfg.max_len}")
        if token_ids.size and token_ids.max() >= self.cfg.vocab_size:
            raise ConfigError(f"token id {token_ids.max()} >= vocab_size {self.cfg.vocab_size}")
        x = T.embedding(self.tok_emb, token_ids) + self.pos_emb[:l]
        x = self.emb_norm(x)
        mask = padding_mask(pad_mask, dtype=x.dtype)
        for attn, norm1, ff1, ff2, norm2 in self.blocks:
            x = norm1(x + attn(x, mask))
            x = norm2(x + ff2(T.relu(ff1(x))))
        return x


class TableEncoder:
    """Frozen lookup: E[i] = table[token_ids[i]]."""

    def __init__(self, table):
        self.table = np.asarray(table)

    def __call__(self, token_ids, pad_mask=None):
        return T.Tensor(self.table[np.asarray(token_ids)])


def build_encoder(reg, cfg):
    if cfg.mode is EncoderMode.FILE_BACKED:
        table = load_embedding_file(cfg.embedding_file)
        if table.shape != (cfg.vocab_size, cfg.d):
            raise HeaderMismatch(f"embedding table {table.shape} vs config ({cfg.vocab_size}, {cfg.d})")
        return TableEncoder(table.astype(reg.dtype))
    return TransformerEncoder(reg, cfg)


def encode(seq, encoder):
    """E [l, d] for one TaggedSequence."""
    return encoder(seq.token_ids, seq.pad_mask)


def save_embedding_file(path, table):
    table = np.ascontiguousarray(table, dtype="<f4")
    if table.ndim != 2:
        raise ConfigError("embedding table must be 2-D")
    blob = table.tobytes()
    header = _HEADER.pack(EMB_MAGIC, table.shape[0], table.shape[1], zlib.crc32(blob))
    Path(path).write_bytes(header + blob)


def load_embedding_file(path, vocab_size=None, d=None):
    """Read the 16-byte header (magic, vocab_size, d, crc32 of the payload;
    little-endian uint32) and the row-major float32 table that follows."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise HeaderMismatch(f"{path}: truncated header")
    magic, n, dim, crc = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise HeaderMismatch(f"{path}: bad magic {magic:#x}")
    if (vocab_size is not None and n != vocab_size) or (d is not None and dim != d):
        raise HeaderMismatch(f"{path}: header says {n}x{dim}, expected {vocab_size}x{d}")
    blob = raw[_HEADER.size:]
    if len(blob) != 4 * n * dim:
        raise HeaderMismatch(f"{path}: payload has {len(blob)} bytes, header implies {4 * n * dim}")
    if zlib.crc32(blob) != crc:
        raise HeaderMismatch(f"{path}: checksum mismatch")
    return np.frombuffer(blob, dtype="<f4").reshape(n, dim).copy()
