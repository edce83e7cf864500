import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphmem.memory_cell import (
    CentroidBank,
    EdgeGraph,
    MemoryCell,
    NavigationParams,
)
from graphmem.model import Model, toy_config
from graphmem.numerics import Matrix


def random_cell(rng, f=4, h=8, d=4, *, gate=1.0, momentum=4.6) -> MemoryCell:
    """A standalone memory cell with random parameters on the unit sphere."""
    raw = rng.normal(size=(f, h))
    bank = CentroidBank(
        centroids=Matrix(raw / np.linalg.norm(raw, axis=1, keepdims=True)),
        ln_c_gain=Matrix(1.0 + 0.1 * rng.normal(size=(1, h))),
        ln_c_bias=Matrix(0.1 * rng.normal(size=(1, h))),
        usage=np.full(f, 1.0 / f),
        age=np.zeros(f, dtype=np.int64),
        gate=Matrix([[gate]]),
        momentum=Matrix([[momentum]]),
    )
    graph = EdgeGraph(edges=Matrix(rng.normal(size=(f, f))))
    nav = NavigationParams(
        w_q=Matrix(rng.normal(0, 0.2, size=(h, d))),
        w_k=Matrix(rng.normal(0, 0.2, size=(h, d))),
        ln_disp_gain=Matrix(np.ones((1, h))),
        ln_disp_bias=Matrix(np.zeros((1, h))),
    )
    return MemoryCell(bank=bank, graph=graph, nav=nav,
                      ln2_gain=Matrix(np.ones((1, h))),
                      ln2_bias=Matrix(np.zeros((1, h))))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_model():
    return Model(toy_config(), seed=0)
