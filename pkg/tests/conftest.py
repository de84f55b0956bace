"""共通フィクスチャ"""
import numpy as np
import pytest

from src.core.bio_components import LIFParams, SynapseParams, lif_rate, synapse_map
from src.core.component_map import ComponentMap
from src.core.config import Settings, apply_settings
from tests.analytic import heaviside, triangle


@pytest.fixture(autouse=True)
def reset_settings():
    """テストごとに設定シングルトンを既定値へ戻す"""
    apply_settings(Settings())
    yield
    apply_settings(Settings())


@pytest.fixture
def sin_map() -> ComponentMap:
    return ComponentMap.from_function(
        lambda p: np.sin(p[:, 0]), -np.pi, np.pi, 64, name="sin"
    )


@pytest.fixture
def step_map() -> ComponentMap:
    return ComponentMap.from_function(heaviside, -1.0, 1.0, 64, name="heaviside")


@pytest.fixture
def triangle_map() -> ComponentMap:
    return ComponentMap.from_function(triangle, 0.0, 3.0, 241, name="triangle")


@pytest.fixture
def square_map() -> ComponentMap:
    return ComponentMap.from_function(lambda p: p[:, 0] ** 2, -1.0, 1.0, 64, name="square")


@pytest.fixture
def lif_map() -> ComponentMap:
    params = LIFParams(tau=20.0, theta=1.0)
    return ComponentMap.from_function(
        lambda p: lif_rate(params, p[:, 0]), 0.0, 2.0, 256, name="lif_rate"
    )


@pytest.fixture
def sigmoid_synapse() -> ComponentMap:
    return synapse_map(SynapseParams(), -1.0, 1.0, 64)
