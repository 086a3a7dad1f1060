import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("satlm", max_examples=60, deadline=None)
settings.load_profile("satlm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_small():
    from satlm.data import build_vocab, synth_corpus

    sents = synth_corpus(3, 60)
    toks = [s.tokens for s in sents]
    return sents, toks, build_vocab(toks)


def tiny_model(vocab_size, seed=0, **kw):
    from satlm.encoder import EncoderConfig
    from satlm.model import StructureAwareModel

    cfg = dict(n_layers=4, n_heads=2, d_model=8, d_ff=12, max_len=16, structure_layer=2)
    cfg.update(kw)
    return StructureAwareModel(EncoderConfig(vocab_size, **cfg), seed=seed)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
