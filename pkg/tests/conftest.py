import numpy as np
import pytest

from epivar.contact_graph import TemporalContactGraph


def chain_graph(n: int, horizon: int, lam: float) -> TemporalContactGraph:
    """Path 0-1-...-(n-1), every edge active at every timestep."""
    pairs = [(i, i + 1) for i in range(n - 1)]
    dst, src = [], []
    for a, b in pairs:
        dst += [a, b]
        src += [b, a]
    e = len(dst)
    return TemporalContactGraph(
        n=n,
        horizon=horizon,
        t=np.repeat(np.arange(horizon), e),
        dst=np.tile(dst, horizon),
        src=np.tile(src, horizon),
        lam=np.full(e * horizon, lam),
    )


def empty_graph(n: int, horizon: int) -> TemporalContactGraph:
    z = np.array([], dtype=np.int64)
    return TemporalContactGraph(n=n, horizon=horizon, t=z, dst=z, src=z, lam=z.astype(float))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
