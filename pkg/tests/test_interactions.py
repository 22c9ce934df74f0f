import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cv_track
from oracles import episodes_brute_force
from trajconsensus.core import AgentClass, TrackSample
from trajconsensus.errors import ConfigurationError
from trajconsensus.interactions import (
    Sector, ZoneLayout, assign_zone, bearing_deg, default_layout, detect_interactions,
    read_interactions, write_interactions,
)

HDV, PED = AgentClass.HDV, AgentClass.PEDESTRIAN


def test_never_close_is_empty():
    a = cv_track("a", HDV, (0, 0), (1, 0))
    b = cv_track("b", HDV, (0, 100), (1, 0))
    assert detect_interactions([a, b], radius=30) == []
    assert detect_interactions([a]) == []


def test_no_temporal_overlap_is_empty():
    a = cv_track("a", HDV, (0, 0), (0, 0), n=50)
    b = cv_track("b", HDV, (1, 0), (0, 0), n=50, t0=10.0)
    assert detect_interactions([a, b]) == []


def test_stationary_pair():
    a = cv_track("a", HDV, (0, 0), (0, 0), n=201)
    b = cv_track("b", PED, (10, 0), (0, 0), n=201)
    recs = detect_interactions([a, b], radius=15)
    assert [(r.subject_id, r.other_id) for r in recs] == [("a", "b"), ("b", "a")]
    for r in recs:
        assert r.duration == pytest.approx(20.0)
        assert np.all(r.distances == 10.0)


def test_crossing_episode_matches_analytic_radius_times():
    # |dp(t)|^2 = (10t - 40)^2 + (5t - 30)^2 = r^2 solved as a quadratic
    r, dt = 20.0, 0.1
    a = cv_track("a", HDV, (-40, 0), (10, 0), n=141, dt=dt)
    b = cv_track("b", PED, (0, -30), (0, 5), n=141, dt=dt)
    qa, qb, qc = 125.0, -2 * (400 + 150), 1600 + 900 - r * r
    disc = math.sqrt(qb * qb - 4 * qa * qc)
    t_in, t_out = (-qb - disc) / (2 * qa), (-qb + disc) / (2 * qa)
    recs = detect_interactions([a, b], radius=r)
    assert len(recs) == 2
    for rec in recs:
        assert abs(rec.start_time - t_in) <= dt
        assert abs(rec.end_time - t_out) <= dt


def test_min_duration_filters_flicker():
    a = cv_track("a", HDV, (-50, 0), (50, 0), n=21)
    b = cv_track("b", HDV, (0, 29), (0, 0), n=21)
    assert detect_interactions([a, b], radius=30, min_duration=0.5) == []
    assert len(detect_interactions([a, b], radius=30, min_duration=0.0)) == 2


def test_bad_radius():
    with pytest.raises(ValueError):
        detect_interactions([], radius=0)


def _random_tracks(rng, n_agents, n=60):
    tracks = []
    for k in range(n_agents):
        p0 = rng.uniform(-40, 40, 2)
        v = rng.uniform(-8, 8, 2)
        t0 = 0.1 * rng.integers(0, 20)
        tracks.append(cv_track(f"ag{k:02d}", HDV if k % 2 else PED, p0, v, n=n, t0=t0))
    return tracks


@pytest.mark.parametrize("seed", range(8))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    tracks = _random_tracks(rng, 7)
    recs = detect_interactions(tracks, radius=25, min_duration=0.5)
    got = {}
    for r in recs:
        f = (int(round(r.start_time / 0.1)), int(round(r.end_time / 0.1)))
        got.setdefault((r.subject_id, r.other_id), []).append(f)
    assert got == episodes_brute_force(tracks, 25, 0.5, 0.1)
    for r in recs:
        assert np.all(r.distances <= 25) and np.all(r.distances >= 0)
        assert np.all((r.bearings >= 0) & (r.bearings < 360))
        assert np.all(np.diff(r.times) > 0)
    assert recs == sorted(recs, key=lambda r: (r.subject_id, r.other_id, r.start_time))


def test_directional_records_share_support():
    tracks = _random_tracks(np.random.default_rng(99), 6)
    recs = detect_interactions(tracks, radius=25)
    by_pair = {(r.subject_id, r.other_id, r.start_time): r for r in recs}
    for (s, o, t0), r in by_pair.items():
        twin = by_pair[(o, s, t0)]
        assert np.array_equal(twin.times, r.times)


def test_threads_do_not_change_result(monkeypatch):
    import trajconsensus.interactions as mod
    monkeypatch.setattr(mod, "_CHUNK_POINTS", 50)
    tracks = _random_tracks(np.random.default_rng(3), 8)
    one = detect_interactions(tracks, radius=25, threads=1)
    many = detect_interactions(tracks, radius=25, threads=4)
    assert [repr(r) for r in one] == [repr(r) for r in many]


def test_dump_round_trip(tmp_path):
    tracks = _random_tracks(np.random.default_rng(5), 5)
    recs = detect_interactions(tracks, radius=25)
    write_interactions(recs, tmp_path / "i.csv")
    back = read_interactions(tmp_path / "i.csv")
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert (a.subject_id, a.other_id, a.other_kind) == (b.subject_id, b.other_id, b.other_kind)
        assert np.array_equal(a.times, b.times) and np.array_equal(a.distances, b.distances)
        assert a.zones.tolist() == b.zones.tolist()


# zones

def _sample(heading_deg=0.0, speed=5.0):
    h = math.radians(heading_deg)
    return TrackSample(0.0, 0.0, 0.0, speed * math.cos(h), speed * math.sin(h), 0.0, 0.0)


def test_zone_examples():
    assert assign_zone(_sample(), (5, 0)) == "Main Fwd"
    assert "Rear" in assign_zone(_sample(), (-5, 0))
    # clockwise from heading: an agent on the right (negative y when heading +x) has a small positive bearing
    assert assign_zone(_sample(), (5, -2)).endswith("R")
    assert assign_zone(_sample(), (100, 0)) is None
    with pytest.raises(ValueError):
        assign_zone(_sample(speed=0.1), (5, 0))
    assert assign_zone(_sample(speed=0.1), (5, 0), heading=0.0) == "Main Fwd"


def test_boundary_goes_to_sector_starting_there():
    layout = default_layout()
    names = layout.names
    for s in layout.sectors:
        assert layout.lookup(s.start % 360, 1.0).item() == s.name
    # lower-indexed sector on a shared edge is the one whose span starts there
    assert layout.lookup(15.0, 1.0).item() == "Narrow Fwd R"
    assert layout.lookup(345.0, 1.0).item() == "Main Fwd"
    assert names.index("Main Fwd") == 0


def test_layout_validation():
    with pytest.raises(ConfigurationError):
        ZoneLayout([Sector("a", 0, 180, 10)])
    with pytest.raises(ConfigurationError):
        ZoneLayout([Sector("a", 0, 200, 10), Sector("b", 180, 360, 10)])
    with pytest.raises(ConfigurationError):
        ZoneLayout([Sector("a", 0, 360, 0)])
    with pytest.raises(ConfigurationError):
        ZoneLayout([])
    with pytest.raises(ConfigurationError):
        ZoneLayout.from_dict({"sectors": [{"name": "x"}]})
    wrap = ZoneLayout([Sector("front", 300, 60, 10), Sector("back", 60, 300, 10)])
    assert wrap.lookup(0.0, 1).item() == "front" and wrap.lookup(180.0, 1).item() == "back"
    assert ZoneLayout.from_dict(default_layout().to_dict()).names == default_layout().names


def test_rotation_equivariance_grid():
    layout = default_layout()
    rng = np.random.default_rng(11)
    pts = rng.uniform(-50, 50, size=(40, 2))
    base = [assign_zone(_sample(0.0), tuple(p), layout) for p in pts]
    for deg in range(360):
        # integer-degree rotations keep bearings off sector edges except where the base already sits on one
        c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
        rotated = [assign_zone(_sample(deg), (c * x - s * y, s * x + c * y), layout) for x, y in pts]
        assert rotated == base


@given(st.floats(-720, 720), st.floats(0.1, 100), st.floats(-math.pi, math.pi))
def test_bearing_in_range_and_inverse(angle, dist, heading):
    dx, dy = dist * math.cos(math.radians(angle)), dist * math.sin(math.radians(angle))
    b = float(bearing_deg(heading, dx, dy))
    assert 0 <= b < 360
    back = math.degrees(heading) - b
    assert math.isclose(math.cos(math.radians(back)), dx / dist, abs_tol=1e-9)
    assert math.isclose(math.sin(math.radians(back)), dy / dist, abs_tol=1e-9)
