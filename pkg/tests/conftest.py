from __future__ import annotations

import numpy as np
import pytest
import torch

from siblurry.backbone import FrozenViT, ModelState, toy_spec
from siblurry.datasets import make_synthetic
from siblurry.engine import TrainConfig, run_online
from siblurry.scenario import ScenarioConfig, build_stream

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def blobs():
    """10-class, 64-dim synthetic blobs used by the desk-scale runs."""
    return make_synthetic(num_classes=10, dim=64, per_class=200, noise=0.05, seed=0)


@pytest.fixture
def toy_model64():
    """Float64 toy model with a 10-entry pool over 10 classes."""
    backbone = FrozenViT(toy_spec(input_dim=64)).double()
    return ModelState(backbone, num_classes=10, pool_size=10, seed=3).double()


@pytest.fixture(scope="session")
def desk_runs(blobs):
    """Cached run_online results keyed by (method, memory_size, seed)."""
    cache: dict = {}

    def get(method: str, seed: int, memory: int = 0):
        key = (method, memory, seed)
        if key not in cache:
            manifest = build_stream(blobs, ScenarioConfig(seed=seed))
            cfg = TrainConfig(method=method, memory_size=memory, seeds=[seed])
            cache[key] = run_online(manifest, blobs, cfg, seed)
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
