import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from scenevg.dataio.generator import GeneratorConfig, SceneGenerator  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def generator():
    gen = SceneGenerator(GeneratorConfig(seed=0))
    gen.samples_ = gen.generate(500)
    return gen


@pytest.fixture(scope="session")
def corpus(generator):
    return generator.samples_


@pytest.fixture(scope="session")
def small_corpus():
    return SceneGenerator(GeneratorConfig(seed=1)).generate(40)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
