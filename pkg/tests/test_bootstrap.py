import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from stagdid import errors
from stagdid.bootstrap import (
    BootstrapSpec,
    cluster_bootstrap,
    replicate_rng,
    resample_clusters,
    simultaneous_bands,
)

from conftest import make_panel


def cluster_panel(G=200, per=3, seed=0):
    r = np.random.default_rng(seed)
    clusters = np.repeat(np.arange(G), per)
    y = (r.normal(size=G)[clusters] + r.normal(size=G * per))[:, None] * np.ones((1, 2))
    return make_panel(y, np.zeros((G * per, 2)), clusters=clusters)


def mean_pipeline(p):
    return {"mean": float(p.y[:, 0].mean())}


def test_constant_pipeline_degenerate():
    res = cluster_bootstrap(lambda p: {"c": 3.0}, cluster_panel(20), BootstrapSpec(B=50))
    assert res.se[0] == 0.0
    assert res.ci_lo[0] == res.ci_hi[0] == 3.0


def test_sample_mean_se_matches_analytic():
    panel = cluster_panel(200)
    G = 200
    means = np.array([panel.y[panel.cluster_codes == g, 0].mean() for g in range(G)])
    # equal cluster sizes: the overall mean is the mean of cluster means
    analytic = means.std(ddof=1) / np.sqrt(G)
    res = cluster_bootstrap(mean_pipeline, panel, BootstrapSpec(B=1000, seed=1))
    assert abs(res.se[0] / analytic - 1) < 0.2


def test_bit_identical_with_seed():
    panel = cluster_panel(30)
    a = cluster_bootstrap(mean_pipeline, panel, BootstrapSpec(B=40, seed=9))
    b = cluster_bootstrap(mean_pipeline, panel, BootstrapSpec(B=40, seed=9))
    assert_array_equal(a.replicates, b.replicates)
    assert (a.ci_lo[0], a.ci_hi[0]) == (b.ci_lo[0], b.ci_hi[0])
    c = cluster_bootstrap(mean_pipeline, panel, BootstrapSpec(B=40, seed=10))
    assert not np.array_equal(a.replicates, c.replicates)


def test_replicate_streams_independent_of_order():
    first = [replicate_rng(5, b).random() for b in range(4)]
    assert replicate_rng(5, 3).random() == first[3]


def test_resample_keeps_cluster_blocks():
    panel = cluster_panel(10, per=4)
    rep = resample_clusters(panel, np.random.default_rng(0))
    assert rep.n_units == panel.n_units
    assert rep.n_clusters == 10
    sizes = np.bincount(rep.cluster_codes)
    assert (sizes == 4).all()


def test_failures_counted():
    calls = iter(range(1000))

    def flaky(p):
        if next(calls) % 4 == 0:
            raise errors.EmptyControlSet("boom")
        return {"v": 1.0, "w": np.nan}

    res = cluster_bootstrap(flaky, cluster_panel(10), BootstrapSpec(B=20), keys=["v", "w"])
    assert res.n_failed.tolist() == [5, 20]
    assert np.isnan(res.se[1])


def test_all_failed_and_too_few_clusters():
    with pytest.raises(errors.AllReplicatesFailed):
        cluster_bootstrap(lambda p: {"v": np.nan}, cluster_panel(5), BootstrapSpec(B=5))
    with pytest.raises(errors.TooFewClusters):
        cluster_bootstrap(mean_pipeline, cluster_panel(1), BootstrapSpec(B=5))


def test_spec_validation():
    with pytest.raises(ValueError):
        BootstrapSpec(B=0)
    with pytest.raises(ValueError):
        BootstrapSpec(level=1.5)


def test_band_single_cell_is_pointwise_studentized():
    r = np.random.default_rng(2)
    reps = r.normal(1.0, 0.5, size=(500, 1))
    lo, hi, crit = simultaneous_bands(reps, np.array([1.0]), 0.9)
    se = reps[:, 0].std(ddof=1)
    q = np.quantile(np.abs(reps[:, 0] - 1.0) / se, 0.9)
    assert_allclose([lo[0], hi[0]], [1.0 - q * se, 1.0 + q * se])
    assert_allclose(crit, q)


def test_band_wider_for_independent_cells():
    r = np.random.default_rng(3)
    reps = r.normal(size=(2000, 6))
    lo, hi, crit = simultaneous_bands(reps, np.zeros(6), 0.95)
    assert crit > stats.norm.ppf(0.975)
    # close to the Sidak critical value for 6 independent normals
    assert_allclose(crit, stats.norm.ppf(1 - (1 - 0.95 ** (1 / 6)) / 2), rtol=0.05)
