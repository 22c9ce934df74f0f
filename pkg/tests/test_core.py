import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cv_track, make_track
from trajconsensus.core import (
    AgentClass, AgentTrack, IntersectionGeometry, LineSegment, Polygon, SchemaConfig, TrackSample,
    frame_grid, held_heading, ingest_dataset, load_geometry, resample_track, tracks_to_frame, write_tracks,
)
from trajconsensus.errors import ConfigurationError, EmptyDatasetError, ResampleError, SchemaError


def test_agent_class_flags():
    vru = {AgentClass.PEDESTRIAN, AgentClass.CYCLIST, AgentClass.SCOOTER}
    for kind in AgentClass:
        assert kind.vru_flag == (kind in vru)
        assert kind.platoon_eligible == (kind in (AgentClass.AV, AgentClass.HDV))
        assert kind.is_vehicle != kind.vru_flag
    assert AgentClass.parse(" pedestrian ") is AgentClass.PEDESTRIAN
    assert AgentClass.parse("hdv") is AgentClass.HDV
    with pytest.raises(ValueError):
        AgentClass.parse("tram")


def test_track_sample_speed():
    s = TrackSample(0.0, 1.0, 2.0, 3.0, -4.0, 0.0, 0.0)
    assert s.speed == 5.0
    assert s.position == (1.0, 2.0)


def test_track_validation():
    t = np.arange(5) * 0.1
    with pytest.raises(ValueError):
        make_track("a", AgentClass.HDV, [0.0, 0.1, 0.1], 0, 0)
    with pytest.raises(ValueError):
        AgentTrack("a", AgentClass.HDV, t, t[:4], t, t, t, t, t)
    with pytest.raises(ValueError):
        AgentTrack("a", AgentClass.HDV, [], [], [], [], [], [], [])
    with pytest.raises(ValueError):
        make_track("a", AgentClass.HDV, t, 0, 0, lane=np.array(["L1"] * 4, dtype=object))


def test_track_arrays_read_only_and_inputs_untouched():
    x = np.arange(4, dtype=float)
    tr = make_track("a", AgentClass.AV, np.arange(4) * 0.1, x, 0)
    assert not tr.x.flags.writeable
    with pytest.raises(ValueError):
        tr.x[0] = 5.0
    x2 = np.arange(4, dtype=float)
    AgentTrack("b", AgentClass.AV, np.arange(4) * 0.1, x2, x2, x2, x2, x2, x2)
    assert x2.flags.writeable
    assert tr.length == 4.8 and tr.width == 1.9


def test_track_accessors():
    tr = cv_track("a", AgentClass.HDV, (0, 0), (3, 4), n=11, lane="L2")
    assert tr.duration == pytest.approx(1.0)
    assert np.allclose(tr.speed, 5.0)
    assert tr.index_at(0.5) == 5
    assert tr.index_at(0.55) is None
    assert tr.sample(2).lane == "L2"
    assert len(tr.samples()) == 11
    assert list(tr.frames(0.1)) == list(range(11))


def test_held_heading_rule():
    vx = np.array([0.0, 0.1, 1.0, 0.0, 0.2, 0.0])
    vy = np.array([0.0, 0.0, 1.0, 1.0, 0.0, -0.2])
    h = held_heading(vx, vy)
    assert h[0] == h[1] == h[2] == pytest.approx(math.pi / 4)
    assert h[3] == pytest.approx(math.pi / 2)
    assert h[4] == h[5] == pytest.approx(math.pi / 2)
    assert np.all(held_heading(np.zeros(3), np.zeros(3)) == 0)


def test_polygon_validation_and_containment():
    with pytest.raises(ConfigurationError):
        Polygon("p", [[0, 0], [1, 0]])
    with pytest.raises(ConfigurationError):
        Polygon("p", [[0, 0], [1, 1], [2, 2]])
    with pytest.raises(ConfigurationError):
        Polygon("p", [[0, 0], [2, 0], [1, 0.5], [2, 2], [0, 2]])
    cw = Polygon("sq", [[0, 0], [0, 2], [2, 2], [2, 0]])
    inside = cw.contains([1, 0, 2, 2.0001, 1], [1, 1, 2, 1, -0.1])
    assert inside.tolist() == [True, True, True, False, False]


def test_line_segment():
    with pytest.raises(ConfigurationError):
        LineSegment((1, 1), (1, 1))
    seg = LineSegment((0, 0), (0, 10))
    assert seg.side(-1, 5) > 0 > seg.side(1, 5)
    assert seg.along(3, 5) == pytest.approx(0.5)


def test_geometry_round_trip(tmp_path):
    doc = {
        "crosswalk_zones": [{"name": "cw", "vertices": [[0, 0], [4, 0], [4, 10], [0, 10]]}],
        "entry_lines": {"L1": [[0, 5], [0, -5]]},
        "exit_lines": {"L1": [[30, 5], [30, -5]]},
        "signal_phases": {"L1": [[0, 30, "green"], [30, 35, "yellow"], [35, 60, "red"]]},
    }
    geo = IntersectionGeometry.from_dict(doc)
    assert geo.phase_at("L1", 29.9) == "green"
    assert geo.phase_at("L1", 30.0) == "yellow"
    assert geo.phase_at("L1", 61.0) is None
    assert geo.phase_at("L9", 1.0) is None
    again = IntersectionGeometry.from_dict(geo.to_dict())
    assert again.to_dict() == geo.to_dict()
    import yaml
    p = tmp_path / "g.yaml"
    p.write_text(yaml.safe_dump({"geometry": doc}))
    assert load_geometry(p).to_dict() == geo.to_dict()
    with pytest.raises(ConfigurationError):
        IntersectionGeometry.from_dict({"signal_phases": {"L1": [[0, 5, "blue"]]}})
    with pytest.raises(ConfigurationError):
        IntersectionGeometry.from_dict({"crosswalk_zones": [{"name": "x"}]})


def _frame(n_agents=3, n=100, dt=0.1):
    rows = []
    for a in range(n_agents):
        for k in range(n):
            rows.append({"id": f"a{a}", "time": k * dt, "x": k * 0.5, "y": float(a), "vx": 5.0, "vy": 0.0,
                         "ax": 0.0, "ay": 0.0, "class": "HDV", "lane": "L1"})
    return pd.DataFrame(rows)


def test_ingest_well_formed(tmp_path):
    p = tmp_path / "t.csv"
    _frame().to_csv(p, index=False)
    ds = ingest_dataset(p)
    assert len(ds) == 3
    assert ds.report.rows_rejected == 0
    assert ds.report.rows_accepted == 300


def test_ingest_repeated_time_rejected(tmp_path):
    df = _frame(1, 10)
    df = pd.concat([df.iloc[:5], df.iloc[[4]], df.iloc[5:]], ignore_index=True)
    p = tmp_path / "t.csv"
    df.to_csv(p, index=False)
    ds = ingest_dataset(p)
    assert ds.report.rejected["non_monotonic_time"] == 1
    assert len(ds.tracks["a0"]) == 10


def test_ingest_bad_rows_counted(tmp_path):
    df = _frame(2, 10).astype(object)
    # track ends only, so the surviving rows stay evenly sampled
    df.loc[0, "x"] = "oops"
    df.loc[9, "class"] = "Zeppelin"
    df.loc[19, "id"] = ""
    p = tmp_path / "t.csv"
    df.to_csv(p, index=False)
    ds = ingest_dataset(p)
    r = ds.report.to_dict()
    assert {k: v for k, v in r["rejected_by_reason"].items() if v} == {"missing_id": 1, "non_numeric": 1, "unknown_class": 1}
    assert r["rows_accepted"] == 17


def test_ingest_irregular_sampling_rejects_track(tmp_path):
    df = _frame(2, 10)
    df = df.drop(index=[3, 4, 5])  # a0 jumps 0.4 s once
    p = tmp_path / "t.csv"
    df.to_csv(p, index=False)
    ds = ingest_dataset(p)
    assert list(ds.tracks) == ["a1"]
    assert ds.report.rejected["irregular_sampling"] == 7


def test_ingest_errors(tmp_path):
    p = tmp_path / "t.csv"
    _frame().drop(columns=["ax"]).to_csv(p, index=False)
    with pytest.raises(SchemaError):
        ingest_dataset(p)
    p.write_text("")
    with pytest.raises(EmptyDatasetError):
        ingest_dataset(p)
    p.write_text(",".join(_frame().columns) + "\n")
    with pytest.raises(EmptyDatasetError):
        ingest_dataset(p)


def test_ingest_schema_mapping(tmp_path):
    df = _frame(2, 10).rename(columns={"id": "Vehicle_ID", "time": "Global_Time", "class": "type"})
    df["type"] = ["car"] * 10 + ["walker"] * 10
    df["av"] = ["yes"] * 10 + ["no"] * 10
    p = tmp_path / "t.tsv"
    df.to_csv(p, index=False, sep="\t")
    schema = SchemaConfig.from_dict({
        "columns": {"id": "Vehicle_ID", "time": "Global_Time", "class": "type"},
        "class_map": {"car": "HDV", "walker": "Pedestrian"},
        "delimiter": "\t", "av_column": "av",
    })
    ds = ingest_dataset(p, schema)
    assert ds.tracks["a0"].kind is AgentClass.AV
    assert ds.tracks["a1"].kind is AgentClass.PEDESTRIAN
    with pytest.raises(SchemaError):
        SchemaConfig.from_dict({"columns": {"colour": "c"}})


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=30))
def test_write_ingest_round_trip_is_exact(values):
    import tempfile
    n = len(values)
    v = np.array(values)
    t = np.arange(n) * 0.1 + 1234.5
    tr = AgentTrack("agent 7", AgentClass.CYCLIST, t, v, v[::-1], v * 0.3, v / 7, v, -v,
                    lane=np.array(["L1"] * (n - 1) + [None], dtype=object), length=1.7)
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/r.csv"
        write_tracks([tr], path)
        back = ingest_dataset(path).tracks["agent 7"]
    for name in ("t", "x", "y", "vx", "vy", "ax", "ay"):
        assert np.array_equal(getattr(back, name), getattr(tr, name)), name
    assert back.lane.tolist() == tr.lane.tolist()
    assert back.length == 1.7 and back.kind is AgentClass.CYCLIST


def test_tracks_to_frame_columns():
    df = tracks_to_frame([cv_track("a", AgentClass.AV, (0, 0), (1, 0), n=3)])
    assert list(df.columns[:10]) == ["id", "time", "x", "y", "vx", "vy", "ax", "ay", "class", "lane"]


def test_frame_grid():
    assert frame_grid(0.0, 1.0, 0.1).tolist() == list(range(11))
    assert frame_grid(0.05, 0.31, 0.1).tolist() == [1, 2, 3]
    assert frame_grid(0.3, 0.30000000000000004, 0.1).tolist() == [3]


@pytest.mark.parametrize("dt", [0.05, 0.1, 0.2, 0.3, 0.7])
def test_resample_constant_velocity_stays_on_line(dt):
    tr = cv_track("a", AgentClass.HDV, (1.0, 2.0), (3.0, -1.5), n=50, dt=0.1)
    rs = resample_track(tr, dt)
    assert rs.t[0] >= tr.t[0] - 1e-12 and rs.t[-1] <= tr.t[-1] + 1e-12
    tau = np.clip(rs.t, tr.t[0], tr.t[-1]) - tr.t[0]
    assert np.allclose(rs.x, 1.0 + 3.0 * tau, atol=1e-9)
    assert np.allclose(rs.y, 2.0 - 1.5 * tau, atol=1e-9)


def test_resample_identity_and_idempotence():
    tr = cv_track("a", AgentClass.HDV, (0, 0), (2, 1), n=40, dt=0.1, t0=3.0)
    rs = resample_track(tr, 0.1)
    assert np.max(np.abs(rs.x - tr.x)) < 1e-9 and np.max(np.abs(rs.t - tr.t)) < 1e-9
    again = resample_track(rs, 0.1)
    assert np.array_equal(again.x, rs.x) and np.array_equal(again.t, rs.t)


def test_resample_constant_acceleration_error_bound():
    # linear interpolation of x = a t^2 / 2 sampled at dt errs by a dt^2 / 8 at midpoints
    a, dt = 2.0, 0.2
    t = np.arange(51) * dt
    tr = make_track("q", AgentClass.HDV, t, 0.5 * a * t**2, 0, a * t, 0, a, 0)
    rs = resample_track(tr, dt / 2)
    err = np.max(np.abs(rs.x - 0.5 * a * rs.t**2))
    assert err == pytest.approx(a * dt**2 / 8, rel=1e-9)


def test_resample_errors_and_lanes():
    tr = cv_track("a", AgentClass.HDV, (0, 0), (1, 0), n=3)
    with pytest.raises(ResampleError):
        resample_track(tr, 0.5)
    with pytest.raises(ValueError):
        resample_track(tr, 0.0)
    lanes = np.array(["A", "A", "B", "B"], dtype=object)
    tr = make_track("b", AgentClass.HDV, [0.0, 0.2, 0.4, 0.6], [0, 1, 2, 3], 0, lane=lanes)
    rs = resample_track(tr, 0.1)
    assert rs.lane.tolist() == ["A", "A", "A", "A", "B", "B", "B"]


def test_velocity_matches_finite_difference():
    from trajconsensus import synth
    spec = synth.ScenarioSpec("ca", (synth.AgentSpec("a", AgentClass.HDV, "constant_acceleration",
                                                     {"p0": [0, 0], "v0": [3, 1], "a": [1.5, -0.5]}),),
                              duration=5.0)
    tr = synth.generate(spec)[0]
    fd = np.hypot(np.diff(tr.x), np.diff(tr.y)) / np.diff(tr.t)
    mid = 0.5 * (tr.speed[1:] + tr.speed[:-1])
    assert np.max(np.abs(fd - mid) / mid) < 0.01
