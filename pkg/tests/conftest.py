import numpy as np
import pytest
import torch

from dp_graphgen.graph import Graph, largest_connected_component, split_edges


def sbm_graph(sizes=(150, 150), p_in=0.085, p_out=0.004, seed=0) -> Graph:
    """Two-block stochastic block model, reduced to its LCC."""
    rng = np.random.default_rng(seed)
    block = np.repeat(np.arange(len(sizes)), sizes)
    n = len(block)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    g = Graph.from_pairs(np.stack([iu[keep], ju[keep]], axis=1), n)
    return largest_connected_component(g)[0]


def small_connected(n=30, p=0.2, seed=0) -> Graph:
    rng = np.random.default_rng(seed)
    pairs = [(i, int(rng.integers(i))) for i in range(1, n)]
    pairs += [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return Graph.from_pairs(pairs, n)


@pytest.fixture
def toy_graph():
    return small_connected()


@pytest.fixture
def toy_split(toy_graph):
    return split_edges(toy_graph, 0.15, seed=0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
