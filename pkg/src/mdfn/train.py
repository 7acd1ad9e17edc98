"""AdamW, the training loop, evaluation and ranking."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, NaNGradient
from .metrics import RankingInstance, compute, mrr, recall_at_k
from .model import MDFN, ModelConfig, Mode

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "epoch", "loss", "val_r_at_1", "val_mrr")

# Learning rates used for large pre-trained encoders; far too small for a
# from-scratch desk model, kept for reference.
PRLM_PRESETS = {
    "mutual": {"lr": 4e-6, "batch_size": 24, "epochs": 3},
    "ubuntu": {"lr": 3e-6, "batch_size": 64, "epochs": 2},
}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def step(registry, cfg, state):
    """One AdamW update of every parameter in ``registry`` from its ``.grad``.

    Weight decay is decoupled: theta <- theta - lr*wd*theta, then the
    bias-corrected Adam step.
    """
    b1, b2 = cfg.betas
    for name, p in registry.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NaNGradient(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in registry.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = p.data
        if cfg.weight_decay:
            data = data * (1 - cfg.lr * cfg.weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (data - cfg.lr * upd).astype(p.data.dtype, copy=False)
    return registry


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _labels(dialogues):
    return np.array([y for d in dialogues for y in d.labels])


def check_mode(dialogues, mode):
    if not dialogues:
        raise ConfigError("empty dataset")
    if Mode(mode) is Mode.MULTI_CHOICE:
        sizes = {len(d.candidates) for d in dialogues}
        if len(sizes) != 1:
            raise ConfigError(f"multi-choice data needs a fixed candidate count, got {sorted(sizes)}")
        bad = [d.id for d in dialogues if sum(d.labels) != 1]
        if bad:
            raise ConfigError(f"multi-choice data needs exactly one positive; offending ids {bad[:5]}")


def rank(model, dialogue):
    """Score every candidate of one dialogue."""
    (scores,) = model.score_dialogues([dialogue])
    return RankingInstance(dialogue.id, tuple(scores), dialogue.labels)


def evaluate(model, dialogues, batch_size=32, threads=1):
    """RankingInstances for ``dialogues``, in input order."""
    chunks = list(_batches(list(dialogues), batch_size))

    def run(chunk):
        return [RankingInstance(d.id, tuple(s), d.labels)
                for d, s in zip(chunk, model.score_dialogues(chunk))]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [inst for part in parts for inst in part]


def validation_metrics(model, dialogues):
    inst = evaluate(model, dialogues)
    n = len(inst[0].scores)
    return {"r_at_1": recall_at_k(inst, n, 1) if all(len(i.scores) == n for i in inst) else float("nan"),
            "mrr": mrr(inst)}


@dataclass
class TrainResult:
    model: MDFN
    best_state: dict
    best_header: dict
    log_rows: list

    def log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(self.log_rows)
        return buf.getvalue()


def _fmt(x):
    return "" if x is None else repr(float(x))


def train(train_set, valid_set, model_cfg, optim_cfg, out_dir=None, dtype=None, vocab=None):
    """Fit an MDFN; keep the parameters with the best validation R@1.

    Writes ``best`` (checkpoint) and ``train_log.csv`` into ``out_dir`` when
    given. Ties on validation R@1 keep the earlier epoch.
    """
    check_mode(train_set, model_cfg.mode)
    if valid_set:
        check_mode(valid_set, model_cfg.mode)
    model = MDFN(model_cfg, seed=optim_cfg.seed, dtype=dtype)
    reg = model.registry
    rng = np.random.default_rng(optim_cfg.seed)
    state = AdamState()
    n_cand = len(train_set[0].candidates) if model_cfg.mode is Mode.MULTI_CHOICE else None
    rows = []
    best_r1 = float("-inf")
    best_state = reg.state()
    best_header = _header(model_cfg, optim_cfg, 0, 0, {})
    order = np.arange(len(train_set))

    for epoch in range(1, optim_cfg.epochs + 1):
        rng.shuffle(order)
        losses = []
        for idx in _batches(order, optim_cfg.batch_size):
            chunk = [train_set[i] for i in idx]
            reg.zero_grad()
            loss = model.loss(model.batch(chunk), _labels(chunk), n_cand)
            T.backward(loss, reg)
            step(reg, optim_cfg, state)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        if valid_set:
            vm = validation_metrics(model, valid_set)
        else:
            vm = {"r_at_1": None, "mrr": None}
        rows.append((state.step, epoch, _fmt(mean_loss), _fmt(vm["r_at_1"]), _fmt(vm["mrr"])))
        log.info("epoch %d step %d loss %.4f val_r@1 %s val_mrr %s",
                 epoch, state.step, mean_loss, vm["r_at_1"], vm["mrr"])
        r1 = vm["r_at_1"] if vm["r_at_1"] is not None else -mean_loss
        if r1 > best_r1:
            best_r1 = r1
            best_state = reg.state()
            best_header = _header(model_cfg, optim_cfg, state.step, epoch,
                                  {k: v for k, v in vm.items() if v is not None} | {"loss": mean_loss})

    if vocab is not None:
        best_header["vocab"] = list(vocab.itos)
    result = TrainResult(model, best_state, best_header, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint.save(out / "best", best_state, best_header)
        (out / "train_log.csv").write_text(result.log_csv())
    return result


def _header(model_cfg, optim_cfg, step_no, epoch, metrics):
    return {
        "config": model_cfg.to_dict(),
        "config_hash": model_cfg.hash(),
        "optim": optim_cfg.to_dict(),
        "seed": optim_cfg.seed,
        "step": step_no,
        "epoch": epoch,
        "metrics": metrics,
    }


def load_model(path, expected_config=None):
    """Rebuild the model stored in a checkpoint file."""
    expected = expected_config.hash() if expected_config is not None else None
    header, state = checkpoint.load(path, expected)
    cfg = ModelConfig.from_dict(header["config"])
    model = MDFN(cfg, seed=header.get("seed", 0))
    model.registry.load_state(state)
    return model, header


def save_model(path, model, step_no=0, epoch=0, metrics=None, optim_cfg=None):
    optim_cfg = optim_cfg or OptimConfig(seed=model.seed)
    checkpoint.save(path, model.registry.state(),
                    _header(model.cfg, optim_cfg, step_no, epoch, metrics or {}))


def dump_json(obj):
    return json.dumps(obj, sort_keys=True)
