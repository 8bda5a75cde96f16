import numpy as np
import pandas as pd
import pytest

from stagdid.panel import validate_panel


def make_panel(y, a, clusters=None, x=None, categorical=()):
    """Panel from wide (n, tbar) outcome/treatment arrays.

    ``x`` maps covariate name to a per-unit vector. Each unit is its own
    cluster unless ``clusters`` is given.
    """
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=int)
    n, tbar = y.shape
    clusters = np.arange(n) if clusters is None else np.asarray(clusters)
    rows = {
        "unit_id": np.repeat([f"u{i}" for i in range(n)], tbar),
        "cluster_id": np.repeat([f"c{c}" for c in clusters], tbar),
        "time": np.tile(np.arange(1, tbar + 1), n),
        "y": y.ravel(),
        "a": a.ravel(),
    }
    for name, v in (x or {}).items():
        rows[name] = np.repeat(np.asarray(v), tbar)
    return validate_panel(pd.DataFrame(rows), categorical=categorical)


def staircase(entry, tbar):
    """Treatment paths for entry periods (``np.inf`` = never)."""
    t = np.arange(1, tbar + 1)
    return (t[None, :] >= np.asarray(entry, dtype=float)[:, None]).astype(int)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy22():
    # treated unit Y=(1,4), control unit Y=(1,2): 2x2 DiD = 2
    return make_panel([[1.0, 4.0], [1.0, 2.0]], [[0, 1], [0, 0]])
