import numpy as np
import pytest

from boltzvae import graph, rbm


@pytest.fixture
def cell_pair():
    """16-unit two-cell patch with frozen random parameters."""
    conn = graph.build_chimera(1, 2, 4)
    rng = np.random.default_rng(42)
    params = rbm.BmParams(
        conn,
        rng.uniform(-1, 1, conn.num_nodes),
        rng.uniform(-1, 1, conn.num_edges),
    )
    return conn, params


def random_params(conn, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return rbm.BmParams(
        conn,
        rng.uniform(-scale, scale, conn.num_nodes),
        rng.uniform(-scale, scale, conn.num_edges),
    )
