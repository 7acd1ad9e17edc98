import numpy as np
import pytest

from mdfn import tensor as T
from mdfn.dialogue import Dialogue, SpeakerRole, Utterance

S, R = SpeakerRole.SENDER, SpeakerRole.RECEIVER


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dialogue(lengths, response_len=2, speakers=None, n_candidates=1):
    speakers = speakers or [S if (len(lengths) - i) % 2 == 0 else R for i in range(len(lengths))]
    tok = 10
    context = []
    for n, spk in zip(lengths, speakers):
        context.append(Utterance(list(range(tok, tok + n)), spk))
        tok += n
    cands = [Utterance(list(range(100 + 10 * c, 100 + 10 * c + response_len)), S)
             for c in range(n_candidates)]
    labels = [1] + [0] * (n_candidates - 1)
    return Dialogue(context, cands, labels, id="t")


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
