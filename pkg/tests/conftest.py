import contextlib
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gemseg.datamodel import RunConfig  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"
_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest model that still has every pyramid level: 32x32 input, d=16, N=4."""
    return RunConfig(image_size=32, d_model=16, encoder_depth=1, num_heads=2, num_queries=4, decoder_layers=1,
                     batch_size=2, epochs_pretrain=1)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record a pass/fail line for an acceptance criterion and print it."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException:
        _ACCEPTANCE[number] = (title, False, detail["text"])
        print(f"FAIL criterion {number}: {title} {detail['text']}")
        raise
    _ACCEPTANCE[number] = (title, True, detail["text"])
    print(f"PASS criterion {number}: {title} {detail['text']}")


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, text = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} {text}".rstrip())
