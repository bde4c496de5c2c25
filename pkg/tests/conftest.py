import pytest
import torch

from cdkformer.features import collate, scene_features
from cdkformer.model import ModelConfig
from cdkformer.numerics import RngStream
from cdkformer.synthetic import generate_synthetic

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def tiny_config(**kw) -> ModelConfig:
    base = dict(d=8, heads=2, hidden=8, layers=1, modes=2, experts=2, bands=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(24, 0.25, RngStream(11))


@pytest.fixture(scope="session")
def small_feats(small_corpus):
    return [scene_features(s) for s in small_corpus]


@pytest.fixture(scope="session")
def small_batch(small_feats):
    return collate(small_feats[:3], [1.0, 2.0, 0.5])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
