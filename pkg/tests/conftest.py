import numpy as np
import pytest

from maa.config import TrainConfig
from maa.dataio import GLOBAL, LOCAL, TEXT, SyntheticModality, gen_synthetic


def small_specs(dims=(12, 12, 8), text_dropout=0.0, scale_text=1.0):
    return [
        SyntheticModality(GLOBAL, dims[0], 1, 0.5, 0.3),
        SyntheticModality(LOCAL, dims[1], 5, 0.5, 0.3),
        SyntheticModality(TEXT, dims[2], (1, 6), 0.6, 0.3, dropout=text_dropout, scale=scale_text),
    ]


def small_config(**kw):
    base = dict(dim=16, ffn_dim=32, heads=2, layers=1, dropout=0.0, init_std=0.2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def small_data():
    return gen_synthetic(3, 4, small_specs(text_dropout=0.3), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
