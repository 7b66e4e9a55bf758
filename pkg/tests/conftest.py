import numpy as np
import pytest
import torch

from lipsync_ldm import preprocess as pp
from lipsync_ldm import synthdata as sd

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return sd.generate_corpus(sd.SynthSpec(n_clips=3, frames_per_clip=60, frame_size=80, seed=0))


@pytest.fixture(scope="session")
def small_crops(small_corpus):
    return [pp.frontalize_clip(c, 64) for c in small_corpus]


@pytest.fixture(scope="session")
def oracle():
    return sd.EnvelopeOracleScorer(frames=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
