import csv
import io
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdfn import checkpoint
from mdfn import tensor as T
from mdfn.data import SynthConfig, generate, parse_record
from mdfn.dialogue import Dialogue
from mdfn.errors import CheckpointError, ConfigError, MetricError, NaNGradient
from mdfn.metrics import (RankingInstance, average_precision, compute, mean_average_precision, mrr,
                          p_at_1, recall_at_k)
from mdfn.model import MDFN, MdfnConfig, Mode, ModelConfig
from mdfn.nn import ParamRegistry
from mdfn.train import (LOG_HEADER, AdamState, OptimConfig, evaluate, load_model, rank, save_model,
                        step, train)


# ---------------------------------------------------------------- metrics

def inst(scores, labels, cid="c"):
    return RankingInstance(cid, scores, labels)


def test_recall_examples():
    top = inst([0.9] + [0.1] * 9, [1] + [0] * 9)
    assert recall_at_k([top], 10, 1) == 1.0
    third = inst([0.9, 0.8, 0.7, 0.1], [0, 0, 1, 0])
    assert recall_at_k([third], 4, 2) == 0.0
    assert recall_at_k([third], 4, 3) == 1.0
    with pytest.raises(MetricError):
        recall_at_k([third], 5, 1)


def test_average_precision_hand_example():
    assert average_precision(np.array([1, 0, 1, 0])) == pytest.approx(0.833333, abs=1e-6)
    assert mean_average_precision([inst([4, 3, 2, 1], [1, 0, 1, 0])]) == pytest.approx(0.833333, abs=1e-6)


def test_rr_and_single_instance():
    assert mrr([inst([0.5, 0.9], [1, 0])]) == 0.5
    one = [inst([0.9, 0.1], [1, 0])]
    assert mean_average_precision(one) == mrr(one) == p_at_1(one) == 1.0


def test_ties_break_by_index():
    i = inst([0.5, 0.5, 0.5], [0, 1, 0])
    assert i.order().tolist() == [0, 1, 2]
    assert recall_at_k([i], 3, 1) == 0.0


def test_no_positive_skipped(caplog):
    with caplog.at_level(logging.WARNING):
        val = mrr([inst([1, 2], [0, 0]), inst([2, 1], [1, 0])])
    assert val == 1.0
    assert "skipped 1" in caplog.text


def test_compute_names():
    out = compute([inst([3, 2, 1, 0], [0, 1, 0, 0])], ["r@1", "r@2", "mrr", "map", "p@1"])
    assert list(out) == ["R_4@1", "R_4@2", "MRR", "MAP", "P@1"]
    assert out["R_4@2"] == 1.0 and out["MRR"] == 0.5
    with pytest.raises(MetricError):
        compute([inst([1], [1])], ["ndcg"])


def _oracle_rank(scores, labels):
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [labels[i] for i in idx]


def _oracle(instances, n, k):
    ranked = [_oracle_rank(i.scores, i.labels) for i in instances if any(i.labels)]
    mean = lambda xs: math.fsum(xs) / len(xs)
    r = mean([1.0 if any(lab[:k]) else 0.0 for lab in ranked])
    aps = []
    for lab in ranked:
        hits, prec = 0, []
        for pos, y in enumerate(lab, start=1):
            if y:
                hits += 1
                prec.append(hits / pos)
        aps.append(mean(prec))
    rr = [1.0 / (lab.index(1) + 1) for lab in ranked]
    p1 = [float(lab[0]) for lab in ranked]
    return r, mean(aps), mean(rr), mean(p1)


def random_instances(rng, count, n=5):
    out = []
    for c in range(count):
        scores = rng.integers(0, 4, n) / 4.0  # frequent ties
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        out.append(inst(scores, labels, str(c)))
    return out


def test_metrics_match_sorting_oracle(rng):
    instances = random_instances(rng, 1000)
    for k in (1, 2, 5):
        r, ap, rr, p1 = _oracle(instances, 5, k)
        assert recall_at_k(instances, 5, k) == r
    assert mean_average_precision(instances) == ap
    assert mrr(instances) == rr
    assert p_at_1(instances) == p1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    instances = random_instances(rng, 20, 4)
    warped = [inst(np.exp(3 * np.asarray(i.scores)) + 1, i.labels) for i in instances]
    for f in (mean_average_precision, mrr, p_at_1, lambda x: recall_at_k(x, 4, 2)):
        assert f(instances) == f(warped)
    assert recall_at_k(instances, 4, 4) == 1.0
    single = []
    for i in instances:
        lab = [0] * 4
        lab[int(rng.integers(4))] = 1
        single.append(inst(rng.permutation(4).astype(float), lab))
    # one positive per instance: AP reduces to RR and P@1 to R@1
    assert mean_average_precision(single) == mrr(single)
    assert p_at_1(single) == recall_at_k(single, 4, 1)


# ---------------------------------------------------------------- optimizer

def _scalar_reg(value=1.0):
    reg = ParamRegistry(dtype=np.float64)
    p = reg.param("theta", (1,), "zeros")
    p.data[...] = value
    return reg, p


def test_adamw_hand_step():
    reg, p = _scalar_reg()
    p.grad = np.ones(1)
    cfg = OptimConfig()
    step(reg, cfg, AdamState())
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    want = 1.0 * (1 - 1e-3 * 0.01) - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(want, abs=1e-15)
    assert p.data[0] == pytest.approx(0.99898999999, abs=1e-10)


def test_zero_grad_zero_decay_is_identity():
    reg, p = _scalar_reg(0.7)
    p.grad = np.zeros(1)
    step(reg, OptimConfig(weight_decay=0.0), AdamState())
    assert p.data[0] == 0.7


def test_zero_grad_decay_is_pure_shrink():
    reg, p = _scalar_reg(2.0)
    p.grad = np.zeros(1)
    state = AdamState()
    cfg = OptimConfig(lr=0.1, weight_decay=0.5)
    step(reg, cfg, state)
    step(reg, cfg, state)
    assert p.data[0] == pytest.approx(2.0 * 0.95 ** 2, abs=1e-15)


def test_nan_gradient_names_parameter():
    reg, p = _scalar_reg()
    p.grad = np.array([np.nan])
    with pytest.raises(NaNGradient, match="theta"):
        step(reg, OptimConfig(), AdamState())


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(batch_size=0)
    with pytest.raises(ConfigError):
        OptimConfig(lr=-1)
    with pytest.raises(ConfigError):
        OptimConfig.from_dict({"momentum": 0.9})
    cfg = OptimConfig(lr=0.01, betas=[0.8, 0.9])
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- training

def small_data(n=40, seed=0, task="speaker_echo"):
    cfg = SynthConfig(n_dialogues=n, seed=seed, task=task, max_turns=3, max_utt_len=3, min_utt_len=2,
                      vocab_size=40, n_keys=8, valid_fraction=0.25, test_fraction=0.0)
    splits, vocab = generate(cfg)
    parse = lambda rs: [parse_record(r, vocab, Mode.MULTI_CHOICE) for r in rs]
    return parse(splits["train"]), parse(splits["valid"]), vocab


def small_model_cfg(vocab, **head):
    return ModelConfig(vocab_size=len(vocab), max_len=24, encoder_layers=1, encoder_heads=2,
                       head=MdfnConfig(d=8, heads=2, **head))


def test_one_step_reduces_sample_loss():
    tr, _, vocab = small_data()
    model = MDFN(small_model_cfg(vocab), seed=0)
    batch = model.batch(tr[:1])
    labels = list(tr[0].labels)
    before = model.loss(batch, labels, 4)
    T.backward(before, model.registry)
    step(model.registry, OptimConfig(lr=1e-3, weight_decay=0.0), AdamState())
    with T.no_grad():
        after = model.loss(batch, labels, 4)
    assert after.item() < before.item()


def test_lr_zero_keeps_initial_params(tmp_path):
    tr, va, vocab = small_data()
    cfg = small_model_cfg(vocab)
    init = MDFN(cfg, seed=4).registry.state()
    res = train(tr, va, cfg, OptimConfig(lr=0.0, epochs=1, batch_size=8, seed=4, weight_decay=0.0))
    for name, value in res.model.registry.state().items():
        assert np.array_equal(value, init[name])


def test_train_is_deterministic_and_logs(tmp_path):
    tr, va, vocab = small_data()
    cfg = small_model_cfg(vocab)
    oc = OptimConfig(epochs=2, batch_size=8, seed=3)
    a = train(tr, va, cfg, oc, out_dir=tmp_path / "a", vocab=vocab)
    train(tr, va, cfg, oc, out_dir=tmp_path / "b", vocab=vocab)
    assert (tmp_path / "a" / "best").read_bytes() == (tmp_path / "b" / "best").read_bytes()
    rows = list(csv.reader(io.StringIO((tmp_path / "a" / "train_log.csv").read_text())))
    assert tuple(rows[0]) == LOG_HEADER
    assert [r[1] for r in rows[1:]] == ["1", "2"]
    assert rows[2][0] == str(2 * 4)
    assert a.best_header["epoch"] in (1, 2)
    c = train(tr, va, cfg, OptimConfig(epochs=2, batch_size=8, seed=5))
    assert any(not np.array_equal(v, a.best_state[k]) for k, v in c.best_state.items())


def test_best_validation_is_kept(tmp_path):
    tr, va, vocab = small_data()
    res = train(tr, va, small_model_cfg(vocab), OptimConfig(epochs=3, batch_size=8, seed=1))
    r1 = [float(r[3]) for r in res.log_rows]
    best = res.best_header["epoch"]
    assert r1[best - 1] == max(r1)
    assert r1.index(max(r1)) == best - 1


def test_mode_mismatch_and_empty():
    tr, va, vocab = small_data()
    with pytest.raises(ConfigError):
        train([], va, small_model_cfg(vocab), OptimConfig())
    ragged = [tr[0], Dialogue(tr[1].context, tr[1].candidates[:3], [1, 0, 0])]
    with pytest.raises(ConfigError):
        train(ragged, [], small_model_cfg(vocab), OptimConfig(epochs=1))


def test_binary_mode_trains():
    tr, va, vocab = small_data()
    cfg = ModelConfig(**{**small_model_cfg(vocab).__dict__, "mode": Mode.BINARY})
    res = train(tr[:8], va[:4], cfg, OptimConfig(epochs=1, batch_size=4))
    inst_ = evaluate(res.model, va[:4])
    assert all(0 < s < 1 for i in inst_ for s in i.scores)


# ---------------------------------------------------------------- checkpoint / rank

def test_checkpoint_round_trip_bit_exact(tmp_path):
    _, _, vocab = small_data()
    cfg = small_model_cfg(vocab, aggregator="cnn_multi")
    model = MDFN(cfg, seed=2)
    save_model(tmp_path / "ck", model, step_no=5, epoch=1, metrics={"r_at_1": 0.5})
    again, header = load_model(tmp_path / "ck", cfg)
    for name, value in model.registry.state().items():
        assert again.registry[name].data.tobytes() == value.astype("<f4").tobytes()
    assert header["step"] == 5 and header["config_hash"] == cfg.hash()
    raw = (tmp_path / "ck").read_bytes()
    assert raw[:8] == b"MDFNCKPT"
    assert checkpoint.dumps(*reversed(checkpoint.loads(raw))) == raw


def test_checkpoint_errors(tmp_path):
    _, _, vocab = small_data()
    cfg = small_model_cfg(vocab)
    save_model(tmp_path / "ck", MDFN(cfg, seed=0))
    other = small_model_cfg(vocab, aggregator="mean_pool")
    with pytest.raises(CheckpointError, match="hash"):
        load_model(tmp_path / "ck", other)
    raw = (tmp_path / "ck").read_bytes()
    for bad in (b"XXXXXXXX" + raw[8:], raw[:-3], raw + b"\0\0\0\0"):
        (tmp_path / "bad").write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "bad")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "missing")


def test_rank_contract():
    tr, _, vocab = small_data()
    model = MDFN(small_model_cfg(vocab), seed=0)
    d = tr[0]
    dup = Dialogue(d.context, [d.candidates[0]] * 2 + list(d.candidates[2:]), [1, 0, 0, 0])
    r = rank(model, dup)
    assert r.scores[0] == r.scores[1]
    assert sum(r.scores) == pytest.approx(1.0, abs=1e-6)
    assert all(np.isfinite(r.scores))
    assert rank(model, d).scores == rank(model, d).scores


def test_threaded_evaluation_matches_serial():
    tr, _, vocab = small_data()
    model = MDFN(small_model_cfg(vocab), seed=0)
    a = evaluate(model, tr, batch_size=5)
    b = evaluate(model, tr, batch_size=5, threads=3)
    assert a == b
