from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from stageshift.natural_history import NaturalHistoryParams, SojournHypothesis

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
FIXTURES = ROOT / "src" / "stageshift" / "data" / "fixtures"

# k=1 chain used throughout: theta=0.05, lambda23=0.4, lambda24=0.2, lambda35=2
TOY_K1 = NaturalHistoryParams((0.05,), 0.4, 0.2, 2.0)


def random_params(rng, k=None, k_max=3, theta=(0.02, 0.3)):
    """Random admissible parameters built through a random hypothesis."""
    k = int(k if k is not None else rng.integers(1, k_max + 1))
    omst = rng.uniform(1.0, 7.0)
    lmst = rng.uniform(0.2, 0.9) * omst
    hyp = SojournHypothesis(omst, lmst)
    l23 = rng.uniform(0.05, 0.95) * hyp.lambda23_upper()
    return NaturalHistoryParams.from_hypothesis(rng.uniform(*theta, size=k), l23, hyp)


@st.composite
def params_strategy(draw, k_max=4, theta=(0.01, 1.0)):
    k = draw(st.integers(1, k_max))
    thetas = draw(st.lists(st.floats(*theta), min_size=k, max_size=k))
    omst = draw(st.floats(0.5, 8.0))
    lmst = omst * draw(st.floats(0.05, 0.95))
    hyp = SojournHypothesis(omst, lmst)
    frac = draw(st.floats(0.02, 0.98))
    return NaturalHistoryParams.from_hypothesis(thetas, frac * hyp.lambda23_upper(), hyp)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def sample_histories(params, n, rng):
    """Independent life-history sampler: onset age, diagnosis age and stage.

    Returns ``(onset, diagnosis, stage)`` with stage 4 or 5.
    """
    onset = sum(rng.exponential(1.0 / th, n) for th in params.theta)
    r = params.lambda23 + params.lambda24
    leave_early = onset + rng.exponential(1.0 / r, n)
    progress = rng.random(n) < params.lambda23 / r
    diagnosis = np.where(progress, leave_early + rng.exponential(1.0 / params.lambda35, n), leave_early)
    return onset, diagnosis, np.where(progress, 5, 4)
