import os

import numpy as np
import pytest

from wmlab.data import Corpus
from wmlab.model import CausalLM, LMConfig

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CORPUS_FILE = os.path.join(REPO, "data", "corpus", "moby_dick.txt")

TINY = LMConfig(vocab_size=259, d_model=32, n_layers=1, n_heads=2, max_seq=96)


@pytest.fixture(scope="session")
def small_corpus():
    with open(CORPUS_FILE, "rb") as fh:
        raw = fh.read()[20_000:220_000]
    return Corpus.from_bytes(raw)


@pytest.fixture(scope="session")
def tiny_teacher(small_corpus):
    """A 1-layer d=32 model briefly trained on a slice of the corpus."""
    from wmlab.data import batch_windows
    from wmlab.training import train_lm

    model = CausalLM.init(TINY, seed=0)
    train_lm(model, batch_windows(small_corpus, "train", 65, 8, seed=0, epochs=None), steps=150, lr=3e-3)
    return model.freeze()


def fresh_student(teacher):
    s = teacher.copy()
    for p in s.parameters():
        p.requires_grad = True
    return s


def checksum(model) -> list:
    return [np.asarray(p.data).tobytes() for p in model.parameters()]


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
