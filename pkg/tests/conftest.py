import numpy as np
import pytest

from grn.data import SyntheticCorpusSpec, generate_synthetic
from grn.model import VariantConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Three writers, three pages and six words each, small pages."""
    return generate_synthetic(SyntheticCorpusSpec(num_writers=3, pages_per_writer=3, words_per_writer=6,
                                                  image_size=96, seed=5))


@pytest.fixture(scope="session")
def small_grn():
    return build_model(VariantConfig(num_classes=4, input_size=32), 0)


def pair_batch(rng, n=2, s=32):
    return rng.uniform(0, 1, (n, 1, s, s)), rng.uniform(0, 1, (n, 1, s, s))


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, printed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
