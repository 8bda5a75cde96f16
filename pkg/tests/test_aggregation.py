import io
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from stagdid import errors
from stagdid.aggregation import (
    EffectRow,
    EffectTable,
    WeightScheme,
    aggregate,
    parse_digest,
    weights_aggregate,
    weights_digest,
    weights_event_time,
)
from stagdid.panel import NEVER, derive_cohorts
from stagdid.simgen import SimConfig, scenario_presets, truth_table

from conftest import make_panel, staircase


def cohorts_from_counts(counts, tbar=5):
    entry = [g for g, c in counts.items() for _ in range(c)]
    return derive_cohorts(make_panel(np.zeros((len(entry), tbar)), staircase(entry, tbar)))


def test_event_time_weights_conditional_shares():
    cm = cohorts_from_counts({3: 386, 4: 614})
    w = weights_event_time(cm, 1).weights
    assert set(w) == {(3, 4), (4, 5)}
    assert_allclose([w[(3, 4)], w[(4, 5)]], [0.386, 0.614])


def test_event_time_weights_three_cohort_shares():
    # event time 1 only exists for cohorts 3 and 4 when tbar = 5
    cm = cohorts_from_counts({3: 22, 4: 35, 5: 43})
    w = weights_event_time(cm, 1).weights
    assert_allclose(w[(3, 4)], 0.22 / 0.57)


def test_event_time_single_cohort_and_infeasible():
    cm = cohorts_from_counts({3: 10, NEVER: 10})
    assert weights_event_time(cm, 2).weights == {(3, 5): 1.0}
    with pytest.raises(errors.NoFeasibleCohort):
        weights_event_time(cm, 3)


def test_cs_aggregate_splits_mass_evenly():
    cm = cohorts_from_counts({3: 22, 4: 35, 5: 43})
    w = weights_aggregate(cm, "cs").weights
    for g, share in ((3, 0.22), (4, 0.35), (5, 0.43)):
        cells = [t for t in range(g, 6)]
        assert_allclose([w[(g, t)] for t in cells], share / len(cells))
    assert_allclose(sum(w.values()), 1.0)


def test_twostage_aggregate_proportional_to_rows():
    cm = cohorts_from_counts({3: 10, 4: 20, NEVER: 5})
    w = weights_aggregate(cm, "twostage").weights
    rows = {(3, 3): 10, (3, 4): 10, (3, 5): 10, (4, 4): 20, (4, 5): 20}
    total = sum(rows.values())
    assert_allclose([w[c] for c in rows], [v / total for v in rows.values()])


def test_iw_aggregate_averages_event_times():
    cm = cohorts_from_counts({3: 22, 4: 35, 5: 43})
    w = weights_aggregate(cm, "iw").weights
    # event times 0, 1, 2 each carry a third of the mass
    e0 = weights_event_time(cm, 0).weights
    assert_allclose(w[(5, 5)], e0[(5, 5)] / 3)
    assert_allclose(w[(3, 5)], 1 / 3)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.sampled_from([2, 3, 4, 5]), st.integers(1, 50), min_size=1),
       st.floats(-5, 5), st.sampled_from(["cs", "iw", "twostage"]))
def test_constant_effect_aggregates_to_constant(counts, c, scheme):
    cm = cohorts_from_counts(counts)
    w = weights_aggregate(cm, scheme)
    est, realized, _ = aggregate({cell: c for cell in w.weights}, w)
    assert_allclose(est, c, atol=1e-12)
    assert all(v >= 0 for v in realized.values())
    assert_allclose(sum(realized.values()), 1.0)


def test_aggregate_basic_and_renormalized():
    w = {(3, 3): 0.5, (3, 4): 0.5}
    assert aggregate({(3, 3): 1.0, (3, 4): 3.0}, w)[0] == 2.0
    with pytest.warns(UserWarning, match="re-normalized"):
        est, realized, msgs = aggregate({(3, 3): 1.0, (3, 4): math.nan}, w)
    assert est == 1.0 and realized == {(3, 3): 1.0} and msgs
    with pytest.raises(errors.MissingCell):
        aggregate({(3, 3): 1.0}, w, strict=True)
    with pytest.raises(errors.AllCellsMissing):
        aggregate({}, w)


def test_scenario3_truth_cross_check():
    cm = cohorts_from_counts({3: 22, 4: 35, 5: 43})
    f = scenario_presets("grouptimehet")
    # hand formula: sum_g share_g * mean_{t >= g} f(g, t)
    hand = sum(s * np.mean([1 + 0.5 * (t - g) + 0.25 * (5 - g) for t in range(g, 6)])
               for g, s in ((3, 0.22), (4, 0.35), (5, 0.43)))
    assert_allclose(aggregate(f, weights_aggregate(cm, "cs"))[0], hand)
    assert_allclose(truth_table(f, cm).aggr["cs"], hand)
    assert SimConfig(scenario="grouptimehet").effect_surface() == f


def test_weight_scheme_validation():
    with pytest.raises(ValueError):
        WeightScheme("custom", {(3, 3): 0.7})
    with pytest.raises(ValueError):
        WeightScheme("custom", {(3, 3): 1.5, (3, 4): -0.5})
    assert WeightScheme.custom({(3, 3): 2, (3, 4): 2}).weights == {(3, 3): 0.5, (3, 4): 0.5}


def test_digest_round_trip():
    w = {(3, 3): 0.25, (4, 5): 0.75}
    assert weights_digest(w) == "3:3=0.25;4:5=0.75"
    assert parse_digest(weights_digest(w)) == w


def test_effect_table_round_trips():
    t = EffectTable()
    t.add(EffectRow("cs-dr", "aggr", 2.0, 0.1, 1.8, 2.2, 100, "3:3=1"))
    t.add(EffectRow("cs-dr", "event:0", 1.0, math.nan, math.nan, math.nan, 50, ""))
    with pytest.raises(ValueError):
        t.add(EffectRow("cs-dr", "aggr", 0.0))
    back = EffectTable.from_json(t.to_json())
    assert back.rows[0] == t.rows[0]
    assert math.isnan(back.rows[1].se)
    csv_back = EffectTable.from_frame(pd.read_csv(io.StringIO(t.to_csv()), float_precision="round_trip"))
    assert csv_back.rows[0] == t.rows[0]
    assert csv_back.to_csv() == t.to_csv()
