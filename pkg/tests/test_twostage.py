import numpy as np
import pytest
from numpy.testing import assert_allclose

from stagdid import errors, twostage
from stagdid.panel import NEVER, derive_cohorts

from conftest import make_panel, staircase


def pieces(panel):
    cm = derive_cohorts(panel)
    tp = twostage.transform_outcomes(panel, cm)
    s1 = twostage.stage1(tp)
    return cm, tp, s1, twostage.residualize(tp, s1)


def noiseless(entry, effect=2.0, tbar=5, lam=None):
    t = np.arange(1, tbar + 1)
    lam = t * 1.0 if lam is None else lam
    a = staircase(entry, tbar)
    alpha = np.linspace(-1, 1, len(entry))
    return make_panel(alpha[:, None] + lam[None, :] + effect * a, a)


def test_transform_outcomes():
    y = np.array([[1.0, 2, 3, 4, 5], [2.0, 4, 9, 9, 9], [7.0, 7, 7, 7, 7]])
    a = staircase([NEVER, 3, 4], 5)
    panel = make_panel(y, a)
    tp = twostage.transform_outcomes(panel, derive_cohorts(panel))
    assert_allclose(tp.y[0], y[0] - 3.0)
    assert_allclose(tp.y[1], y[1] - 3.0)  # mean of periods 1 and 2
    assert_allclose(tp.y[2], 0.0)


def test_stage1_recovers_time_trend():
    panel = noiseless([3] * 3 + [4] * 3 + [NEVER] * 3, effect=0.0)
    _, _, s1, _ = pieces(panel)
    mu = np.array([s1.mu_t[t] for t in range(1, 6)])
    assert_allclose(mu - mu[0], np.arange(5.0), atol=1e-9)


def test_single_cohort_dummy_dropped():
    panel = noiseless([3] * 3 + [NEVER] * 3)
    _, _, s1, _ = pieces(panel)
    assert any(name.startswith("cohort[") for name in s1.dropped)


def test_untreated_residuals_mean_zero():
    r = np.random.default_rng(0)
    entry = r.choice([3.0, 4.0, 5.0, NEVER], 60)
    a = staircase(entry, 5)
    panel = make_panel(r.normal(size=(60, 5)) + a, a)
    _, tp, _, z = pieces(panel)
    assert_allclose(z[tp.untreated].mean(), 0.0, atol=1e-10)


def test_noiseless_residuals_are_the_effect():
    # arbitrary period effects: cohort dummies absorb each cohort's untreated mean exactly
    panel = noiseless([3, 4, NEVER], effect=2.0, lam=np.array([0.0, 1.5, -1.0, 4.0, 2.0]))
    cm, tp, _, z = pieces(panel)
    assert_allclose(z[~tp.untreated], 2.0, atol=1e-9)
    assert_allclose(z[tp.untreated], 0.0, atol=1e-9)
    assert_allclose(twostage.stage2_aggregate(z, cm).estimates["aggr"], 2.0, atol=1e-9)


def lstsq_oracle(panel):
    """Stage 1 and stage 2 with explicit dummies and numpy lstsq."""
    cm = derive_cohorts(panel)
    g = np.asarray(cm.g)
    n, T = panel.y.shape
    un = panel.a == 0
    ybar = np.array([panel.y[i, un[i]].mean() for i in range(n)])
    yt = panel.y - ybar[:, None]
    labels = sorted(set(g.tolist()))
    rows = [(i, t) for i in range(n) for t in range(T)]

    def design(i, t):
        return [1.0] + [float(g[i] == lab) for lab in labels] + [float(t == s) for s in range(T)]

    X = np.array([design(i, t) for i, t in rows])
    yv = np.array([yt[i, t] for i, t in rows])
    m = np.array([un[i, t] for i, t in rows])
    b = np.linalg.lstsq(X[m], yv[m], rcond=None)[0]
    z = yv - X @ b
    return z[~m].mean()


def test_aggregate_matches_lstsq_oracle():
    r = np.random.default_rng(1)
    entry = r.choice([3.0, 4.0, 5.0, NEVER], 80)
    a = staircase(entry, 5)
    panel = make_panel(r.normal(size=(80, 5)) + np.arange(5) + 1.5 * a, a)
    cm, _, _, z = pieces(panel)
    assert_allclose(twostage.stage2_aggregate(z, cm).estimates["aggr"], lstsq_oracle(panel), atol=1e-9)


def test_event_time_and_restriction():
    panel = noiseless([3] * 2 + [4] * 2 + [NEVER] * 2, effect=0.0)
    t = np.arange(1, 6)
    a = panel.a
    g = derive_cohorts(panel).g
    y = panel.y + np.where(a == 1, 1.0 + t[None, :] - np.minimum(g, 99)[:, None], 0.0)  # effect 1 + ell
    panel = make_panel(y, a)
    cm, _, _, z = pieces(panel)
    fit = twostage.stage2_event_time(z, cm, [-2, 0, 1, 2])
    assert_allclose([fit.estimates[e] for e in (-2, 0, 1, 2)], [0.0, 1.0, 2.0, 3.0], atol=1e-9)
    assert fit.weights[0] == {(3, 3): 0.5, (4, 4): 0.5}
    restricted = twostage.stage2_aggregate(z, cm, max_ell=1)
    assert_allclose(restricted.estimates["aggr"], 1.0, atol=1e-9)
    with pytest.raises(errors.EmptyEventTime):
        twostage.stage2_event_time(z, cm, [3])


def test_no_untreated_support_at_last_period():
    # without never-treated units nothing is untreated at t = 5: residuals there are NaN
    panel = noiseless([3] * 2 + [4] * 2 + [5] * 2)
    cm, _, s1, z = pieces(panel)
    assert 5 not in s1.supported_periods
    assert np.isnan(z[:, 4]).all()
    fit = twostage.stage2_aggregate(z, cm)
    assert set(fit.weights["aggr"]) == {(3, 3), (3, 4), (4, 4)}


def test_insufficient_support():
    panel = make_panel(np.zeros((2, 2)), [[0, 1], [0, 1]])
    with pytest.raises(errors.InsufficientUntreatedSupport):
        pieces(panel)
