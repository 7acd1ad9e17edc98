"""Command-line entry point: gen-data, train, eval, rank, inspect-masks.

Exit codes: 0 success, 1 runtime error, 2 usage error. A seed given with
--seed wins over the MDFN_SEED environment variable, which wins over the
seed in a config file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SynthConfig, load_split, parse_record, read_jsonl, write_splits
from .dialogue import Vocab, assemble
from .errors import MdfnError
from .masks import build_masks
from .metrics import compute
from .model import MDFN, PRESETS, ModelConfig, apply_preset
from .train import OptimConfig, evaluate, load_model, rank, train

log = logging.getLogger("mdfn")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise MdfnError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MdfnError(f"{path}: invalid JSON: {exc}") from exc


def _seed(args, fallback):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MDFN_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise MdfnError(f"MDFN_SEED must be an integer, got {env!r}") from exc
    return fallback


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def cmd_gen_data(args):
    raw = _read_json(args.config)
    cfg = SynthConfig.from_dict(raw)
    cfg = replace(cfg, seed=_seed(args, cfg.seed))
    counts = write_splits(args.out, cfg)
    _emit(args, {"out": str(args.out), "counts": counts, "seed": cfg.seed},
          f"wrote {counts['train']} train / {counts['valid']} valid / {counts['test']} test "
          f"dialogues to {args.out} (seed {cfg.seed})")
    return 0


def cmd_train(args):
    data_dir = Path(args.data)
    vocab = Vocab.load(data_dir / "vocab.txt")
    raw = _read_json(args.model_config)
    raw.setdefault("vocab_size", len(vocab))
    model_cfg = ModelConfig.from_dict(raw)
    if args.ablation:
        model_cfg = replace(model_cfg, head=apply_preset(model_cfg.head, args.ablation))
    optim_raw = _read_json(args.optim) if args.optim else {}
    optim_cfg = OptimConfig.from_dict(optim_raw)
    optim_cfg = replace(optim_cfg, seed=_seed(args, optim_cfg.seed))
    train_set = load_split(data_dir, "train", model_cfg.mode, vocab)
    valid_path = data_dir / "valid.jsonl"
    valid_set = load_split(data_dir, "valid", model_cfg.mode, vocab) if valid_path.exists() else []
    result = train(train_set, valid_set, model_cfg, optim_cfg, out_dir=args.out, vocab=vocab)
    best = result.best_header
    _emit(args, {"out": str(args.out), "best_epoch": best["epoch"], "best_step": best["step"],
                 "metrics": best["metrics"], "params": result.model.n_params},
          f"best epoch {best['epoch']} (step {best['step']}): "
          + " ".join(f"{k}={v:.3f}" for k, v in sorted(best["metrics"].items()))
          + f"\ncheckpoint: {Path(args.out) / 'best'}")
    return 0


def _load(args):
    model, header = load_model(args.ckpt)
    if "vocab" in header:
        vocab = Vocab(header["vocab"])
    elif args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        raise MdfnError("checkpoint carries no vocabulary; pass --vocab")
    return model, header, vocab


def cmd_eval(args):
    model, _, vocab = _load(args)
    data = read_jsonl(args.data, model.cfg.mode, vocab)
    if not data:
        raise MdfnError(f"{args.data}: no usable records")
    instances = evaluate(model, data, threads=args.threads)
    names = [m for m in args.metrics.split(",") if m.strip()]
    sizes = {len(i.scores) for i in instances}
    n = sizes.pop() if len(sizes) == 1 else None
    if n is None and any(m.strip().lower().startswith("r@") for m in names):
        raise MdfnError("R_n@k needs every instance to have the same candidate count")
    values = compute(instances, names, n)
    cols = list(values)
    width = max(8, *(len(c) + 2 for c in cols))
    table = "".join(c.ljust(width) for c in cols).rstrip() + "\n" + \
        "".join(f"{values[c]:.3f}".ljust(width) for c in cols).rstrip()
    _emit(args, {"metrics": values, "instances": len(instances), "skipped_lines": len(data.errors)}, table)
    return 0


def cmd_rank(args):
    model, _, vocab = _load(args)
    lines = [ln for ln in Path(args.input).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not 0 <= args.index < len(lines):
        raise MdfnError(f"--index {args.index} out of range ({len(lines)} records)")
    obj = json.loads(lines[args.index])
    dialogue = parse_record(obj, vocab, model.cfg.mode, args.index + 1)
    inst = rank(model, dialogue)
    order = inst.order()
    rows = [{"rank": r + 1, "candidate": int(i), "score": inst.scores[i], "label": inst.labels[i],
             "text": obj["candidates"][i]} for r, i in enumerate(order)]
    text = "\n".join(f"{row['rank']}\t{row['candidate']}\t{row['score']:.6f}\t{row['label']}\t{row['text']}"
                     for row in rows)
    _emit(args, {"id": inst.context_id, "ranking": rows}, text)
    return 0


def cmd_inspect_masks(args):
    lines = [ln for ln in Path(args.input).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not 0 <= args.index < len(lines):
        raise MdfnError(f"--index {args.index} out of range ({len(lines)} records)")
    obj = json.loads(lines[args.index])
    if args.ckpt:
        model, _, vocab = _load(args)
    else:
        words = [w for t in obj.get("context", []) for w in str(t.get("text", "")).lower().split()]
        words += [w for c in obj.get("candidates", []) for w in str(c).lower().split()]
        vocab = Vocab.load(args.vocab) if args.vocab else Vocab.build(words)
        cfg = ModelConfig(vocab_size=len(vocab), max_len=args.max_len)
        model = MDFN(cfg, seed=_seed(args, 0))
    dialogue = parse_record(obj, vocab, "binary", args.index + 1)
    seq = assemble(dialogue, args.candidate, model.cfg.assembly)
    masks = build_masks(seq)
    payload = masks.to_json()
    real = seq.pad_mask
    payload["utt_index"] = seq.utt_index.tolist()
    payload["speaker"] = seq.speaker.tolist()
    payload["pad_mask"] = real.tolist()
    payload["gate_mean"] = _gate_means(model, seq)
    print(json.dumps(payload, sort_keys=True) if args.json else json.dumps(payload, indent=1, sort_keys=True))
    return 0


def _gate_means(model, seq):
    from .model import Batch

    if model.cfg.head.channels.value == "none":
        return {}
    trace = {}
    with T.no_grad():
        model.forward(Batch.from_sequences([seq]).trimmed(), trace=trace)
    real = seq.pad_mask[: seq.n_real]
    out = {}
    for key, name in (("P_u", "utterance"), ("P_s", "speaker")):
        if key in trace:
            p = trace[key].data[0][real]
            out[name] = float(np.mean(p))
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="mdfn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--json", action="store_true", help="print one JSON object")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        return sp

    g = common(sub.add_parser("gen-data", help="write synthetic train/valid/test splits"), seed=True)
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train and keep the best-validation checkpoint"), seed=True)
    t.add_argument("--data", required=True)
    t.add_argument("--model-config", required=True)
    t.add_argument("--optim")
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=sorted(PRESETS))
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="ranking metrics on a JSONL file"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default="r@1,r@2,mrr")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--vocab")
    e.set_defaults(func=cmd_eval)

    r = common(sub.add_parser("rank", help="score and sort the candidates of one record"))
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--vocab")
    r.set_defaults(func=cmd_rank)

    m = common(sub.add_parser("inspect-masks", help="dump the four masks of one record"), seed=True)
    m.add_argument("--input", required=True)
    m.add_argument("--index", type=int, default=0)
    m.add_argument("--candidate", type=int, default=0)
    m.add_argument("--ckpt")
    m.add_argument("--vocab")
    m.add_argument("--max-len", type=int, default=64)
    m.set_defaults(func=cmd_inspect_masks)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MdfnError, OSError, ValueError, KeyError) as exc:
        print(f"mdfn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
