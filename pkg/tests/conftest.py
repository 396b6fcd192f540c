import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dictdis.data import SPECIALS, ConstraintMatch, Example, Vocabulary  # noqa: E402
from dictdis.model import DictDisModel, ModelConfig  # noqa: E402


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def toy_vocab(n_words: int = 14) -> Vocabulary:
    return Vocabulary(list(SPECIALS) + [f"w{i}" for i in range(n_words)])


def tiny_model(vocab_size=20, d_model=8, n_heads=2, n_layers=1, d_ffn=16, seed=0, double=False, **kw):
    cfg = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=n_heads, n_layers=n_layers,
                      d_ffn=d_ffn, dropout=0.0, seed=seed, **kw)
    model = DictDisModel(cfg).eval()
    return model.double() if double else model


def constrained_example():
    """Source of 4 tokens, one degree-2 and one degree-1 constraint."""
    return Example([6, 7, 8, 9], [10, 11, 12],
                   [ConstraintMatch((0, 1), ((10,), (13, 14))), ConstraintMatch((2, 3), ((12,),))])


@pytest.fixture
def example():
    return constrained_example()


_ACCEPTANCE = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
