import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsadlc.errors import WindowUnderrun
from dsadlc.features import (
    DOP_SHAPE, FACTOR_NAMES, FeatureBundle, TrafficFactors, assemble_case, compute_dop, compute_factors,
    dop_statistics,
)
from dsadlc.trajectory import ROLES, neighbors, window

import oracles
from conftest import make_recording, make_track


def test_statistics_of_a_small_row():
    out = dop_statistics(np.array([[5.0, 1.0, 4.0, 2.0, 3.0]]))
    assert out.shape == (1, 7)
    np.testing.assert_allclose(out[0], [3.0, math.sqrt(2.0), 3.0, 2.0, 4.0, 1.0, 5.0])


def test_constant_window_has_zero_spread():
    track = make_track(1, 60, v=20.0)
    dop = compute_dop(window(track, 59, 2.0))
    assert dop.shape == DOP_SHAPE
    assert np.all(dop[3] == [20.0, 0.0, 20.0, 20.0, 20.0, 20.0, 20.0])
    # relative x grows 0.8 m per frame, starting from 0
    assert dop[1, 5] == 0.0 and dop[1, 6] == pytest.approx(49 * 0.8)


def test_dop_matches_brute_force_oracle(rng):
    n = 80
    track = make_track(1, n, x0=3.0, v=28.0, y=rng.normal(5.6, 0.3, n), vy=rng.normal(0, 0.2, n),
                       ax=rng.normal(0, 0.5, n), ay=rng.normal(0, 0.1, n))
    for end in (49, 60, 79):
        got = compute_dop(window(track, end, 2.0))
        np.testing.assert_allclose(got, oracles.dop(track, end), rtol=0, atol=1e-9)


def test_short_window_underruns():
    track = make_track(1, 30)
    with pytest.raises(WindowUnderrun):
        compute_dop(track)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60))
def test_statistics_are_ordered(values):
    s = dop_statistics(np.array([values]))[0]
    mean, std, med, p25, p75, lo, hi = s
    tol = 1e-9 * (1 + max(abs(v) for v in values))
    assert std >= 0
    assert lo - tol <= p25 <= med + tol and med <= p75 + tol and p75 <= hi + tol
    assert lo - tol <= mean <= hi + tol


def _factor_scene():
    return make_recording([
        make_track(1, 5, x0=100.0, v=30.0, lane=3),   # ego
        make_track(2, 5, x0=130.0, v=25.0, lane=3),   # P
        make_track(3, 5, x0=120.0, v=33.0, lane=2),   # PL
        make_track(4, 5, x0=90.0, v=28.0, lane=2),    # FL
    ])


def test_factors_by_hand():
    f = compute_factors(_factor_scene(), 1, 0)
    assert isinstance(f, TrafficFactors)
    expected = [30 - 25, 33 - 25, 0 - 25, 20 - 30, 0 - 30, 10, 0, 30 - 28, 30 - 0, 30 - 30 * 1.5]
    np.testing.assert_allclose(f.as_array(), expected, atol=1e-12)
    assert len(FACTOR_NAMES) == 10


def test_factors_with_custom_headway_time():
    f = compute_factors(_factor_scene(), 1, 0, t_h=2.0)
    assert f.p_distance_slack == pytest.approx(30 - 60)


def test_factors_match_direct_recomputation(synth_recording):
    rec = synth_recording
    rng = np.random.default_rng(3)
    vids = sorted(rec.tracks)
    for vid in rng.choice(vids, size=20, replace=False):
        t = rec.tracks[int(vid)]
        frame = int(rng.integers(t.first_frame, t.last_frame + 1))
        roles = dict(neighbors(rec, int(vid), frame).items())
        got = compute_factors(rec, int(vid), frame).as_array()
        assert got.tolist() == oracles.factors(rec, int(vid), frame, roles)


def test_assemble_case_zeroes_absent_and_short_history_channels():
    rec = make_recording([
        make_track(1, 100, x0=0.0, v=30.0, lane=3),
        make_track(2, 100, x0=40.0, v=30.0, lane=3),             # P with full history
        make_track(3, 20, x0=150.0, v=30.0, lane=2, start=80),   # PL seen for 20 frames only
    ])
    b = assemble_case(rec, 1, 99)
    assert b.surrounding.shape == (len(ROLES),) + DOP_SHAPE
    assert b.channel_present("P")
    assert not b.channel_present("PL")    # present but lacking 2 s of history
    assert not b.channel_present("FR")    # absent
    np.testing.assert_array_equal(b.ego, compute_dop(window(rec.track(1), 99, 2.0)))
    # the factors still see the short-history vehicle
    assert b.factors[1] == 0.0 and b.factors[3] == pytest.approx(54.0 - 40.0)


def test_assemble_case_needs_ego_history():
    rec = make_recording([make_track(1, 30)])
    with pytest.raises(WindowUnderrun):
        assemble_case(rec, 1, 29)


def test_bundle_equality():
    z = FeatureBundle(np.zeros((7, 8, 7)), np.zeros((8, 7)), np.zeros(10))
    assert z == FeatureBundle(np.zeros((7, 8, 7)), np.zeros((8, 7)), np.zeros(10))
    assert z != FeatureBundle(np.zeros((7, 8, 7)), np.zeros((8, 7)), np.ones(10))
