"""Closed-form synthetic trajectories and brute-force oracles.

Scenarios are data: YAML documents listing agents with a motion primitive
each, an optional geometry section and the analytic values the scenario is
built to produce. Velocities and accelerations are analytic derivatives of
the position functions, never finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .core import AgentClass, AgentTrack, IntersectionGeometry, frame_grid
from .errors import ScenarioError

PRIMITIVES = ("constant_velocity", "constant_acceleration", "circular_arc", "piecewise_speed")


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    kind: AgentClass
    primitive: str
    params: Mapping[str, Any]
    start: float = 0.0
    end: float | None = None
    length: float | None = None
    width: float | None = None
    lane: str | None = None


@dataclass(frozen=True)
class Expected:
    value: Any
    derivation: str


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    agents: tuple[AgentSpec, ...]
    duration: float
    dt: float = 0.1
    expected: Mapping[str, Expected] = field(default_factory=dict)
    geometry: Mapping | None = None
    description: str = ""

    def __post_init__(self):
        if not self.duration > 0 or not self.dt > 0:
            raise ScenarioError(f"{self.name}: duration and dt must be positive")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"{self.name}: duplicate agent ids")
        for key, exp in self.expected.items():
            if not isinstance(exp, Expected) or not str(exp.derivation).strip():
                raise ScenarioError(f"{self.name}: expected value {key!r} lacks a derivation note")

    def intersection_geometry(self) -> IntersectionGeometry | None:
        return None if self.geometry is None else IntersectionGeometry.from_dict(self.geometry)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ScenarioSpec":
        try:
            agents = tuple(
                AgentSpec(
                    str(a["id"]), AgentClass.parse(a["class"]), str(a["primitive"]),
                    dict(a.get("params", {})), float(a.get("start", 0.0)),
                    None if a.get("end") is None else float(a["end"]),
                    a.get("length"), a.get("width"), a.get("lane"),
                )
                for a in doc["agents"]
            )
            expected = {}
            for key, val in (doc.get("expected") or {}).items():
                if not isinstance(val, Mapping) or "derivation" not in val:
                    raise ScenarioError(f"{doc.get('name')}: expected value {key!r} lacks a derivation note")
                expected[str(key)] = Expected(val["value"], str(val["derivation"]))
            return cls(
                str(doc["name"]), agents, float(doc["duration"]), float(doc.get("dt", 0.1)),
                expected, doc.get("geometry"), str(doc.get("description", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "duration": self.duration,
            "dt": self.dt,
            "agents": [
                {k: v for k, v in {
                    "id": a.agent_id, "class": a.kind.value, "primitive": a.primitive,
                    "params": dict(a.params), "start": a.start, "end": a.end,
                    "length": a.length, "width": a.width, "lane": a.lane,
                }.items() if v is not None}
                for a in self.agents
            ],
            "expected": {k: {"value": e.value, "derivation": e.derivation} for k, e in self.expected.items()},
            **({"geometry": dict(self.geometry)} if self.geometry is not None else {}),
        }


def load_scenario(source: str | Path) -> ScenarioSpec:
    """Load a scenario by file path or by name from the bundled library."""
    path = Path(source)
    if path.suffix not in (".yaml", ".yml", ".json"):
        ref = resources.files("trajconsensus") / "scenarios" / f"{source}.yaml"
        if not ref.is_file():
            raise ScenarioError(f"no bundled scenario named {source!r}; have {library()}")
        return ScenarioSpec.from_dict(yaml.safe_load(ref.read_text(encoding="utf-8")))
    with open(path, encoding="utf-8") as fh:
        return ScenarioSpec.from_dict(yaml.safe_load(fh))


def library() -> list[str]:
    root = resources.files("trajconsensus") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


# --------------------------------------------------------------------------
# motion primitives


def _vec(params, key) -> np.ndarray:
    try:
        v = np.asarray(params[key], dtype=float)
    except KeyError as exc:
        raise ScenarioError(f"missing parameter {key!r}") from exc
    if v.shape != (2,) or not np.all(np.isfinite(v)):
        raise ScenarioError(f"parameter {key!r} must be a finite (x, y) pair")
    return v


def _num(params, key, default=None) -> float:
    if key not in params:
        if default is None:
            raise ScenarioError(f"missing parameter {key!r}")
        return default
    val = float(params[key])
    if not math.isfinite(val):
        raise ScenarioError(f"parameter {key!r} must be finite")
    return val


def motion(primitive: str, params: Mapping[str, Any], tau: np.ndarray):
    """Position, velocity and acceleration at local times ``tau``.

    Returns six arrays ``x, y, vx, vy, ax, ay``.
    """
    tau = np.asarray(tau, dtype=float)
    zeros = np.zeros_like(tau)
    if primitive == "constant_velocity":
        p0, v = _vec(params, "p0"), _vec(params, "v")
        return (p0[0] + v[0] * tau, p0[1] + v[1] * tau,
                zeros + v[0], zeros + v[1], zeros.copy(), zeros.copy())
    if primitive == "constant_acceleration":
        p0, v0, a = _vec(params, "p0"), _vec(params, "v0"), _vec(params, "a")
        return (p0[0] + v0[0] * tau + 0.5 * a[0] * tau**2,
                p0[1] + v0[1] * tau + 0.5 * a[1] * tau**2,
                v0[0] + a[0] * tau, v0[1] + a[1] * tau,
                zeros + a[0], zeros + a[1])
    if primitive == "circular_arc":
        c = _vec(params, "center")
        r = _num(params, "radius")
        speed = _num(params, "speed")
        theta0 = math.radians(_num(params, "theta0_deg", 0.0))
        direction = params.get("direction", "left")
        if r <= 0 or speed < 0 or direction not in ("left", "right"):
            raise ScenarioError("circular_arc needs radius > 0, speed >= 0, direction left|right")
        sgn = 1.0 if direction == "left" else -1.0
        w = sgn * speed / r
        th = theta0 + w * tau
        cos, sin = np.cos(th), np.sin(th)
        return (c[0] + r * cos, c[1] + r * sin,
                -r * w * sin, r * w * cos,
                -r * w * w * cos, -r * w * w * sin)
    if primitive == "piecewise_speed":
        p0 = _vec(params, "p0")
        heading = math.radians(_num(params, "heading_deg", 0.0))
        knots = np.asarray(params.get("knots", []), dtype=float)
        if knots.ndim != 2 or knots.shape[1] != 2 or knots.shape[0] < 1:
            raise ScenarioError("piecewise_speed needs knots [[t, speed], ...]")
        kt, kv = knots[:, 0], knots[:, 1]
        if np.any(np.diff(kt) <= 0) or np.any(kv < 0):
            raise ScenarioError("piecewise_speed knots need increasing times and non-negative speeds")
        dist, speed, acc = _piecewise(kt, kv, tau)
        ux, uy = math.cos(heading), math.sin(heading)
        return (p0[0] + ux * dist, p0[1] + uy * dist,
                ux * speed, uy * speed, ux * acc, uy * acc)
    raise ScenarioError(f"unknown primitive {primitive!r}; expected one of {PRIMITIVES}")


def _piecewise(kt: np.ndarray, kv: np.ndarray, tau: np.ndarray):
    """Distance, speed and acceleration for a piecewise-linear speed profile.

    Speed is held constant before the first and after the last knot; the
    acceleration on a knot belongs to the segment that starts there.
    """
    slopes = np.diff(kv) / np.diff(kt) if kt.shape[0] > 1 else np.zeros(0)
    seg_dist = 0.5 * (kv[:-1] + kv[1:]) * np.diff(kt)
    cum = np.concatenate([[0.0], np.cumsum(seg_dist)])
    seg = np.searchsorted(kt, tau, side="right") - 1
    dist = np.empty_like(tau)
    speed = np.empty_like(tau)
    acc = np.zeros_like(tau)
    before = seg < 0
    after = seg >= kt.shape[0] - 1
    mid = ~before & ~after
    dist[before] = kv[0] * (tau[before] - kt[0])
    speed[before] = kv[0]
    dist[after] = cum[-1] + kv[-1] * (tau[after] - kt[-1])
    speed[after] = kv[-1]
    s = seg[mid]
    dtau = tau[mid] - kt[s]
    dist[mid] = cum[s] + kv[s] * dtau + 0.5 * slopes[s] * dtau**2
    speed[mid] = kv[s] + slopes[s] * dtau
    acc[mid] = slopes[s]
    return dist, speed, acc


def generate_agent(agent: AgentSpec, duration: float, dt: float) -> AgentTrack:
    end = duration if agent.end is None else agent.end
    if end <= agent.start:
        raise ScenarioError(f"agent {agent.agent_id}: end must follow start")
    frames = frame_grid(agent.start, end, dt)
    if frames.shape[0] < 1:
        raise ScenarioError(f"agent {agent.agent_id}: no samples in [{agent.start}, {end}]")
    t = frames * dt
    x, y, vx, vy, ax, ay = motion(agent.primitive, agent.params, t - agent.start)
    lane = None if agent.lane is None else np.full(t.shape[0], str(agent.lane), dtype=object)
    return AgentTrack(agent.agent_id, agent.kind, t, x, y, vx, vy, ax, ay,
                      lane=lane, length=agent.length, width=agent.width)


def generate(spec: ScenarioSpec) -> list[AgentTrack]:
    return [generate_agent(a, spec.duration, spec.dt) for a in spec.agents]


def renamed(track: AgentTrack, agent_id: str, **arrays) -> AgentTrack:
    """Copy of ``track`` under a new id, optionally with replaced arrays."""
    t = track.with_arrays(**arrays) if arrays else track
    return AgentTrack(agent_id, t.kind, t.t, t.x, t.y, t.vx, t.vy, t.ax, t.ay, t.lane, t.length, t.width)


def combine(specs: Sequence[ScenarioSpec], spacing: float = 1000.0) -> tuple[list[AgentTrack], IntersectionGeometry]:
    """Lay several scenarios side by side (offset along x by ``spacing``) as
    one dataset; agent ids, lanes and zone names get a ``name/`` prefix."""
    tracks = []
    zones, entry, exit_, phases = [], {}, {}, {}
    for i, spec in enumerate(specs):
        off = i * spacing
        pre = f"{spec.name}/"
        for tr in generate(spec):
            lane = None if tr.lane is None else np.array(
                [None if v is None else pre + v for v in tr.lane], dtype=object)
            tracks.append(renamed(tr, pre + tr.agent_id, x=tr.x + off, lane=lane))
        geo = spec.geometry or {}
        for z in geo.get("crosswalk_zones", []) or []:
            zones.append({"name": pre + z["name"],
                          "vertices": [[vx + off, vy] for vx, vy in z["vertices"]]})
        for src, dst in (("entry_lines", entry), ("exit_lines", exit_)):
            for lane, seg in (geo.get(src) or {}).items():
                dst[pre + str(lane)] = [[seg[0][0] + off, seg[0][1]], [seg[1][0] + off, seg[1][1]]]
        for lane, items in (geo.get("signal_phases") or {}).items():
            phases[pre + str(lane)] = items
    doc = {"crosswalk_zones": zones, "entry_lines": entry, "exit_lines": exit_}
    if phases:
        doc["signal_phases"] = phases
    return tracks, IntersectionGeometry.from_dict(doc)


# --------------------------------------------------------------------------
# oracles


def oracle_closest(track_a: AgentTrack, track_b: AgentTrack) -> tuple[float, float, float]:
    """Exhaustive scan of every (t_a, t_b) sample pair.

    Returns ``(separation, t_a, t_b)``; ties in separation resolve to the
    smallest time gap.
    """
    best = None
    for i in range(len(track_a)):
        d2 = (track_a.x[i] - track_b.x) ** 2 + (track_a.y[i] - track_b.y) ** 2
        gap = np.abs(track_a.t[i] - track_b.t)
        m = d2.min()
        j = int(np.flatnonzero(d2 == m)[np.argmin(gap[d2 == m])])
        cand = (float(m), float(gap[j]), i, j)
        if best is None or cand[:2] < best[:2]:
            best = cand
    d2, _, i, j = best
    return math.sqrt(d2), float(track_a.t[i]), float(track_b.t[j])


def oracle_pet(track_a: AgentTrack, track_b: AgentTrack, proximity_threshold: float = 5.0) -> float | None:
    sep, ta, tb = oracle_closest(track_a, track_b)
    return abs(ta - tb) if sep < proximity_threshold else None


def oracle_collision_time(dp: np.ndarray, dv: np.ndarray, rtol: float = 1e-12) -> float:
    """Time at which ``|dp + dv t| = 0`` for ``t >= 0``, else infinity.

    ``dp`` is other minus subject position, ``dv`` other minus subject
    velocity.
    """
    dp = np.asarray(dp, dtype=float)
    dv = np.asarray(dv, dtype=float)
    vv = float(dv @ dv)
    if float(dp @ dp) == 0.0:
        return 0.0
    if vv == 0.0:
        return math.inf
    t = -float(dp @ dv) / vv
    miss = np.linalg.norm(dp + dv * t)
    if t <= 0 or miss > rtol * np.linalg.norm(dp):
        return math.inf
    return t


# --------------------------------------------------------------------------
# seeded random scenarios


def random_crossing_pair(
    rng: np.random.Generator, max_samples: int = 500, dt: float = 0.1
) -> tuple[AgentTrack, AgentTrack]:
    """Two agents passing near a shared point at independent times.

    Lateral miss distance is drawn from [0, 10] m so about half the pairs
    come within the 5 m PET threshold.
    """
    point = rng.uniform(-50, 50, size=2)
    tracks = []
    for name in ("a", "b"):
        n = int(rng.integers(20, max_samples + 1))
        start = int(rng.integers(0, 200)) * dt
        t_pass = start + rng.uniform(0.2, 0.8) * (n - 1) * dt
        ang = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.5, 15.0)
        miss = rng.uniform(0, 10.0) if name == "b" else 0.0
        normal = np.array([-math.sin(ang), math.cos(ang)])
        target = point + miss * normal
        v = speed * np.array([math.cos(ang), math.sin(ang)])
        if rng.random() < 0.5:
            a = rng.uniform(-1.0, 1.0) * np.array([math.cos(ang), math.sin(ang)])
            tau_pass = t_pass - start
            p0 = target - v * tau_pass - 0.5 * a * tau_pass**2
            spec = AgentSpec(name, AgentClass.HDV if name == "a" else AgentClass.PEDESTRIAN,
                             "constant_acceleration", {"p0": p0.tolist(), "v0": v.tolist(), "a": a.tolist()},
                             start=start, end=start + (n - 1) * dt)
        else:
            p0 = target - v * (t_pass - start)
            spec = AgentSpec(name, AgentClass.HDV if name == "a" else AgentClass.PEDESTRIAN,
                             "constant_velocity", {"p0": p0.tolist(), "v": v.tolist()},
                             start=start, end=start + (n - 1) * dt)
        tracks.append(generate_agent(spec, spec.end, dt))
    return tracks[0], tracks[1]


def random_pairs(
    rng: np.random.Generator, n: int, first_slot: int = 0, spacing: float = 1000.0, dt: float = 0.1
) -> list[AgentTrack]:
    """``n`` random crossing pairs, pair ``k`` shifted along x into slot
    ``first_slot + k`` (same layout as ``combine``) and prefixed ``randNNNN/``."""
    out = []
    for k in range(n):
        off = (first_slot + k) * spacing
        for tr in random_crossing_pair(rng, dt=dt):
            out.append(renamed(tr, f"rand{k:04d}/{tr.agent_id}", x=tr.x + off))
    return out


def random_constant_velocity_pair(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, str]:
    """Subject/other positions and velocities for a random TTC case.

    Cases are collinear-approaching, collinear-receding or equal-velocity,
    returned as ``(p_subject, v_subject, p_other, v_other, case)``.
    """
    ps = rng.uniform(-100, 100, size=2)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    gap = rng.uniform(0.5, 80.0)
    po = ps + gap * direction
    vs = rng.uniform(-15, 15, size=2)
    case = ("approach", "recede", "parallel")[int(rng.integers(0, 3))]
    rel = rng.uniform(0.1, 20.0)
    if case == "approach":
        vo = vs - rel * direction
    elif case == "recede":
        vo = vs + rel * direction
    else:
        vo = vs.copy()
    return ps, vs, po, vo, case


HESITATION_KINDS = ("positive", "no-recover", "no-vehicle", "far-vehicle", "straight-vehicle")


def hesitation_scenario(rng: np.random.Generator, kind: str = "positive", dt: float = 0.1) -> ScenarioSpec:
    """Labelled pedestrian speed-pattern case for the hesitation detector.

    The pedestrian walks north at ``w``, ramps down to ``s`` (10-40% of
    ``w``), holds, then ramps back. Negatives break exactly one ingredient:
    the speed never recovers, there is no vehicle, the turning vehicle stays
    beyond 16 m, or the nearby vehicle drives straight.
    """
    if kind not in HESITATION_KINDS:
        raise ScenarioError(f"unknown hesitation case {kind!r}")
    w = float(rng.uniform(1.0, 1.8))
    s = w * float(rng.uniform(0.1, 0.4))
    t1 = float(np.round(rng.uniform(3.0, 5.0), 1))
    hold = float(np.round(rng.uniform(1.0, 3.0), 1))
    t2 = t1 + 1.0 + hold
    w_end = {"no-recover": w * float(rng.uniform(0.5, 0.8))}.get(kind, w)
    duration = t2 + 6.0
    knots = [[0.0, w], [t1, w], [t1 + 1.0, s], [t2, s], [t2 + 1.0, w_end]]
    ped = AgentSpec("ped", AgentClass.PEDESTRIAN, "piecewise_speed",
                    {"p0": [0.0, -10.0], "heading_deg": 90.0, "knots": knots})
    # pedestrian position at the start of the slow hold
    dist, _, _ = _piecewise(np.array([k[0] for k in knots]), np.array([k[1] for k in knots]),
                            np.array([t1 + 1.0]))
    py = -10.0 + float(dist[0])
    agents = [ped]
    t_car = max(0.0, t1 - 1.0)
    if kind == "straight-vehicle":
        offset = float(rng.uniform(5.0, 10.0))
        agents.append(AgentSpec("car", AgentClass.HDV, "constant_velocity",
                                {"p0": [offset, py - 3.0 * 3.0], "v": [0.0, 3.0]},
                                start=t_car, end=t_car + 6.0))
    elif kind != "no-vehicle":
        dc = float(rng.uniform(22.0, 26.0)) if kind == "far-vehicle" else float(rng.uniform(6.0, 8.0))
        agents.append(AgentSpec("car", AgentClass.HDV, "circular_arc",
                                {"center": [dc, py], "radius": 6.0, "theta0_deg": -90.0,
                                 "speed": 3.0, "direction": "left"},
                                start=t_car, end=t_car + 6.0))
    label = 1 if kind == "positive" else 0
    return ScenarioSpec(
        f"hesitation-{kind}", tuple(agents), duration, dt,
        {"hesitations": Expected(label, f"{kind} case: walk-slow-recover pattern "
                                        f"{'with' if label else 'missing one ingredient of'} a left-turning vehicle within 15 m")},
    )


def random_queue(
    rng: np.random.Generator, n_followers: int = 4, dt: float = 0.1, entry_frame: int = 80
) -> tuple[list[AgentTrack], int]:
    """Single-lane queue heading +x behind a leader that reaches x = 0 at
    frame ``entry_frame``. Bumper gaps are drawn from [2, 35] m; some
    followers brake after entry so their gap opens up inside the horizon.

    Returns the tracks (leader first, then upstream order) and the entry
    frame index.
    """
    t_entry = entry_frame * dt
    duration = t_entry + 12.0
    v0 = float(rng.uniform(3.0, 10.0))
    lengths = rng.uniform(4.0, 5.5, size=n_followers + 1)
    specs = [AgentSpec("lead", AgentClass.AV, "constant_velocity",
                       {"p0": [-v0 * t_entry, 0.0], "v": [v0, 0.0]}, lane="L1", length=float(lengths[0]))]
    x_entry = 0.0
    for k in range(1, n_followers + 1):
        gap = float(rng.uniform(2.0, 35.0))
        x_entry -= gap + 0.5 * (lengths[k - 1] + lengths[k])
        v = float(rng.uniform(3.0, 10.0))
        if rng.random() < 0.4:
            brake_to = v * float(rng.uniform(0.0, 0.6))
            knots = [[0.0, v], [t_entry, v], [t_entry + float(rng.uniform(0.5, 3.0)), brake_to]]
        else:
            knots = [[0.0, v]]
        # place the follower so it sits at x_entry at t_entry
        d_entry, _, _ = _piecewise(np.array([k_[0] for k_ in knots]), np.array([k_[1] for k_ in knots]),
                                   np.array([t_entry]))
        specs.append(AgentSpec(f"f{k}", AgentClass.HDV if rng.random() < 0.7 else AgentClass.AV,
                               "piecewise_speed",
                               {"p0": [x_entry - float(d_entry[0]), 0.0], "heading_deg": 0.0, "knots": knots},
                               lane="L1", length=float(lengths[k])))
    return [generate_agent(a, duration, dt) for a in specs], entry_frame
