import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cv_track, make_track
from oracles import dense_crossing_time, l2_accel, platoon_replay
from trajconsensus import synth
from trajconsensus.core import AgentClass, IntersectionGeometry, LineSegment
from trajconsensus.errors import WindowCoverageError
from trajconsensus.flow import (
    SpacingPolicy, analyze_platoons, bumper_gap, compute_headways, identify_platoon, line_crossings,
    stability_gain,
)

AV, HDV, PED = AgentClass.AV, AgentClass.HDV, AgentClass.PEDESTRIAN


def _geo(**lines):
    return IntersectionGeometry.from_dict({
        "entry_lines": {"L1": [[0, 5], [0, -5]]},
        "exit_lines": {"L1": [[30, 5], [30, -5]]},
        **lines,
    })


def test_headway_examples():
    geo = _geo()
    a = cv_track("a", HDV, (20, 0), (5, 0), n=101, lane="L1")    # exit at t = 2.0
    b = cv_track("b", AV, (8, 0), (5, 0), n=101, lane="L1")      # exit at t = 4.4
    ev = compute_headways([a, b], geo, "exit")
    assert len(ev) == 1
    assert (ev[0].leader_id, ev[0].follower_id) == ("a", "b")
    assert ev[0].headway == pytest.approx(2.4, abs=1e-9)
    c = cv_track("c", AV, (-10, 0), (5, 0), n=101, lane="L1")    # exit at t = 8.0
    assert compute_headways([a, c], geo, "exit") == []
    ped = cv_track("p", PED, (8, 0), (5, 0), n=101, lane="L1")
    assert compute_headways([a, ped], geo, "exit") == []


def test_lane_without_line_is_skipped(caplog):
    geo = _geo()
    a = cv_track("a", HDV, (20, 0), (5, 0), n=101, lane="L2")
    b = cv_track("b", HDV, (10, 0), (5, 0), n=101, lane="L2")
    assert compute_headways([a, b], geo, "exit") == []
    assert "L2" in caplog.text


def test_crossing_time_matches_dense_oracle():
    rng = np.random.default_rng(4)
    line = LineSegment((0, 10), (0, -10))
    for _ in range(30):
        t = np.arange(60) * 0.1
        v0, a = rng.uniform(2, 10), rng.uniform(-1, 1)
        x = -rng.uniform(3, 10) + v0 * t + 0.5 * a * t**2
        y = rng.uniform(-2, 2) + rng.uniform(-1, 1) * t
        tr = make_track("v", HDV, t, x, y)
        got = line_crossings(tr, line)
        want = dense_crossing_time(tr, line.a, line.b)
        assert (got == []) == (want is None)
        if want is not None:
            assert abs(got[0] - want) <= 1e-6


@given(st.lists(st.floats(0.5, 4.0), min_size=1, max_size=8))
def test_headways_positive_ordered_and_below_cutoff(spacings):
    geo = _geo()
    tracks, x = [], 20.0
    for k, s in enumerate(spacings):
        tracks.append(cv_track(f"v{k}", HDV, (x, 0), (5, 0), n=400, lane="L1"))
        x -= 5 * s
    ev = compute_headways(tracks, geo, "exit")
    for e in ev:
        assert 0 < e.headway < 5.0
        assert e.headway == pytest.approx(e.crossing_times[1] - e.crossing_times[0])
    starts = [e.crossing_times[0] for e in ev]
    assert starts == sorted(starts)
    for e1, e2 in zip(ev, ev[1:]):
        assert e1.crossing_times[1] <= e2.crossing_times[0] + 1e-12


def test_spacing_policy():
    p = SpacingPolicy()
    assert p.satisfied(12.0, 5.0) and not p.satisfied(25.0, 5.0)
    assert p.threshold(5.0) == 19.0
    for bad in ({"d0": 0}, {"h": -1}, {"epsilon": -0.1}):
        with pytest.raises(ValueError):
            SpacingPolicy(**bad)


def _queue(gaps, v=5.0, n=201, length=4.8):
    tracks, x = [cv_track("lead", AV, (0, 0), (v, 0), n=n, lane="L1", length=length)], 0.0
    for k, g in enumerate(gaps, start=1):
        x -= g + length
        tracks.append(cv_track(f"f{k}", HDV, (x, 0), (v, 0), n=n, lane="L1", length=length))
    return tracks


def test_platoon_examples():
    lead, f1 = _queue([12.0])
    assert identify_platoon(lead, [f1], entry_time=0.0).members == ("f1",)
    lead, f1 = _queue([25.0])
    assert identify_platoon(lead, [f1], entry_time=0.0).members == ()
    q = _queue([10.0, 30.0])
    chain = identify_platoon(q[0], q[1:], entry_time=0.0)
    assert chain.members == ("f1",) == tuple(platoon_replay(q[0], q[1:], 0))
    assert chain.gaps == (pytest.approx(10.0),)


def test_slow_or_red_leader_gives_leader_only_chain():
    q = _queue([5.0], v=1.5)
    assert identify_platoon(q[0], q[1:], entry_time=0.0).members == ()
    q = _queue([5.0])
    assert identify_platoon(q[0], q[1:], entry_time=0.0, green=False).members == ()
    assert identify_platoon(q[0], q[1:], entry_time=99.0).members == ()


def test_sustained_violation_excludes():
    # follower meets the rule at entry then falls back 10 m/s relative for 1.5 s
    t = np.arange(201) * 0.1
    lead = cv_track("lead", AV, (0, 0), (5, 0), n=201, lane="L1")
    v = np.where(t < 1.0, 5.0, 0.5)
    x = -20.0 + np.concatenate([[0], np.cumsum(0.5 * (v[1:] + v[:-1]) * 0.1)])
    fol = make_track("f1", HDV, t, x, 0, v, 0, lane=np.array(["L1"] * 201, dtype=object))
    assert identify_platoon(lead, [fol], entry_time=0.0).members == ()
    assert identify_platoon(lead, [fol], entry_time=0.0, violation_frames=10_000).members == ("f1",)


def test_candidates_off_lane_ignored():
    q = _queue([8.0])
    other = cv_track("x", HDV, (-10, 0), (5, 0), n=201, lane="L2")
    assert identify_platoon(q[0], [other, q[1]], entry_time=0.0).members == ("f1",)


@pytest.mark.parametrize("seed", range(25))
def test_platoon_matches_replay_and_is_prefix_closed(seed):
    rng = np.random.default_rng(seed)
    tracks, k = synth.random_queue(rng)
    lead, fols = tracks[0], tracks[1:]
    chain = identify_platoon(lead, fols, entry_time=float(lead.t[k]))
    assert list(chain.members) == platoon_replay(lead, fols, k)
    # every adjacent pair satisfied the rule at formation
    by = {t.agent_id: t for t in tracks}
    seq = chain.vehicles
    for a, b in zip(seq, seq[1:]):
        gap = bumper_gap(by[a], k, by[b], k)
        assert SpacingPolicy().satisfied(gap, by[b].speed[k])
    if chain.members:
        shorter = [by[m] for m in chain.members[:-1]]
        assert list(identify_platoon(lead, shorter, entry_time=float(lead.t[k])).members) == \
            list(chain.members[:-1])


def _accel_track(agent_id, ax, ay=None, t0=0.0):
    ax = np.asarray(ax, dtype=float)
    ay = np.zeros_like(ax) if ay is None else np.asarray(ay, dtype=float)
    t = t0 + np.arange(ax.size) * 0.1
    return make_track(agent_id, HDV, t, 0, 0, 5, 0, ax, ay)


def test_gain_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=201)
    lead = _accel_track("l", a)
    assert stability_gain(lead, _accel_track("f", a), 10.0).gain == pytest.approx(1.0)
    zero = stability_gain(lead, _accel_track("f", np.zeros(201)), 10.0)
    assert zero.gain == 0.0 and zero.stable
    two = stability_gain(lead, _accel_track("f", 2 * a), 10.0)
    assert two.gain == pytest.approx(2.0) and not two.stable
    undefined = stability_gain(_accel_track("l", np.zeros(201)), lead, 10.0)
    assert undefined.gain is None and not undefined.defined and undefined.stable is None
    with pytest.raises(WindowCoverageError):
        stability_gain(lead, lead, 2.0)


def test_gain_uses_each_vehicles_own_window():
    a = np.zeros(301)
    a[100:120] = 1.0
    b = np.zeros(301)
    b[150:170] = 1.0
    lead, fol = _accel_track("l", a), _accel_track("f", b)
    g = stability_gain(lead, fol, 10.0, follower_t0=15.0)
    assert g.gain == pytest.approx(1.0)
    assert g.follower_window == (10.0, 20.0)


def test_gain_norm_matches_loop_oracle():
    rng = np.random.default_rng(2)
    ax, ay = rng.normal(size=201), rng.normal(size=201)
    g = stability_gain(_accel_track("l", ax, ay), _accel_track("f", ay, ax), 10.0)
    # window [5, 15] s covers samples 50..150 inclusive
    assert g.leader_norm == pytest.approx(l2_accel(ax[50:151], ay[50:151]), rel=1e-12)


@given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_gain_scale_covariant_and_shift_invariant(c, shift, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=201), rng.normal(size=201)
    base = stability_gain(_accel_track("l", a), _accel_track("f", b), 10.0).gain
    scaled = stability_gain(_accel_track("l", a), _accel_track("f", c * b), 10.0).gain
    assert scaled == pytest.approx(c * base, rel=1e-9)
    shifted = stability_gain(_accel_track("l", a, t0=shift), _accel_track("f", b, t0=shift), 10.0 + shift).gain
    assert shifted == pytest.approx(base, rel=1e-9)


def test_platoon_queue_scenario():
    spec = synth.load_scenario("platoon_queue")
    tracks = synth.generate(spec)
    res = analyze_platoons(tracks, spec.intersection_geometry())
    chains = {c.leader_id: c for c in res.chains}
    # chain length counts the leader
    assert len(chains["av1"].vehicles) == spec.expected["chain_length"].value
    g = [x for x in res.gains if x.leader_id == "av1"][0]
    assert g.gain == pytest.approx(spec.expected["first_follower_gain"].value, abs=1e-12)
    assert g.leader_norm == pytest.approx(math.sqrt(20), rel=1e-12)
    assert any("signal" in n for n in res.notes)


def test_hdv_led_chain_uses_same_procedure():
    q = _queue([8.0, 9.0])
    hdv_lead = make_track("lead", HDV, q[0].t, q[0].x, q[0].y, q[0].vx, q[0].vy,
                          lane=q[0].lane)
    assert identify_platoon(hdv_lead, q[1:], entry_time=0.0).members == \
        identify_platoon(q[0], q[1:], entry_time=0.0).members
    hdv_chain = identify_platoon(hdv_lead, q[1:], entry_time=0.0)
    assert hdv_chain.leader_class is HDV
