from pathlib import Path

import numpy as np
import pytest

from src.lora import AdapterRole, AdapterSet, LoraLayer

FIXTURES = Path(__file__).parent / "fixtures"

# Matrices stored in fixtures/golden_adapter.lora (rank 2, 4x4 updates, alpha 1.0)
GOLDEN_LAYERS = {
    "unet.down.0": (
        [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-1.0, 2.0]],
        [[1.0, 0.5, 0.0, -1.0], [0.0, 2.0, 1.0, 0.0]],
    ),
    "unet.up.0": (
        [[2.0, 0.0], [0.0, -1.0], [1.0, 1.0], [0.0, 0.5]],
        [[0.5, 0.5, 0.5, 0.5], [1.0, -1.0, 1.0, -1.0]],
    ),
}


def random_layer(rng, name="unet.mid_block.attn1.to_q", d_out=8, d_in=6, rank=3, alpha=None):
    return LoraLayer(name=name, a=rng.standard_normal((d_out, rank)), b=rng.standard_normal((rank, d_in)), alpha=alpha)


def random_set(rng, names, d_out=8, d_in=6, rank=3, role=AdapterRole.CONTENT):
    return AdapterSet.from_layers([random_layer(rng, n, d_out, d_in, rank) for n in names], role=role)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def golden_path():
    return FIXTURES / "golden_adapter.lora"


@pytest.fixture
def golden_set():
    layers = [LoraLayer(name=n, a=np.array(a), b=np.array(b), alpha=1.0) for n, (a, b) in GOLDEN_LAYERS.items()]
    return AdapterSet.from_layers(layers, role=AdapterRole.CONTENT)


@pytest.fixture
def sdxl_manifest_path():
    return FIXTURES / "sdxl_manifest.json"
