import numpy as np
import pytest

from paraformer.data import DialogueExample, make_copy_corpus, tokenize
from paraformer.init import InitSpec, SeededRng
from paraformer.model import LayerPlan, ModelConfig, build_model

WORDS = [f"w{i}" for i in range(20)]


def tiny_config(vocab_size=11, layers=1, **kw):
    base = dict(vocab_size=vocab_size, n=8, d_qkv=4, d_ff=16, heads=2, layers=layers, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


def echo_examples(n, seed=0, turns=2, min_len=3, max_len=8, words=WORDS):
    rows = make_copy_corpus(n, words, seed=seed, min_len=min_len, max_len=max_len, turns=turns)
    return [DialogueExample([tokenize(u) for u in r["context"]], tokenize(r["response"])) for r in rows]


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), LayerPlan.alt(1), InitSpec(), SeededRng(0))


@pytest.fixture
def tiny_batch():
    ctx = np.array([[5, 6, 7, 0], [8, 9, 4, 10]])
    r_in = np.array([[1, 5, 6], [1, 8, 0]])
    r_tgt = np.array([[5, 6, 2], [8, 2, 0]])
    return ctx, r_in, r_tgt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (name, passed, detail); printed after the run
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
