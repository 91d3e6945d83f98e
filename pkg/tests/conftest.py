# tests/conftest.py
from __future__ import annotations

import copy
import math

import numpy as np
import pytest

from core.config import _deep_update, experiment_config, load_config
from core.data import Dataset, synth_dataset
from core.embedding import build_embedding
from core.kernels import KernelSpec
from core.rff import sample_features


@pytest.fixture
def gaussian_spec() -> KernelSpec:
    return KernelSpec(math.inf)


@pytest.fixture
def matern3() -> KernelSpec:
    return KernelSpec(3.0)


@pytest.fixture
def sweep_data() -> Dataset:
    return synth_dataset(10, 2, 2, 0.2, seed=0)


@pytest.fixture
def small_problem():
    """N=4, d=d'=2, q=3, q_int=8, nu=3 with a random control of L=5 steps."""
    rng = np.random.default_rng(11)
    data = Dataset(inputs=rng.standard_normal((4, 2)), targets=rng.standard_normal((4, 2)))
    bank = sample_features(3, 8, KernelSpec(3.0), seed=3)
    pair = build_embedding(3, 2, 2, "block")
    weights = 0.3 * rng.standard_normal((5, 3, 16))
    return data, bank, pair, weights


@pytest.fixture
def make_experiment(tmp_path):
    """ExperimentConfig from the defaults with nested section overrides."""
    def _make(**sections):
        cfg = copy.deepcopy(load_config(None))
        cfg["experiment"]["out_dir"] = str(tmp_path / "out")
        cfg = _deep_update(cfg, sections)
        return experiment_config(cfg)
    return _make
