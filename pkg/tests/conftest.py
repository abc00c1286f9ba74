import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ergmsbi.graph import Graph  # noqa: E402


def random_graph(n, density, rng):
    upper = np.triu(rng.random((n, n)) < density, 1)
    return Graph(n, upper | upper.T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
