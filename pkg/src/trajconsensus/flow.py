"""Traffic-performance metrics: line-crossing headways, affine-spacing
platoons and first-follower string-stability gains."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import AgentClass, AgentTrack, IntersectionGeometry, LineSegment
from .errors import WindowCoverageError

log = logging.getLogger(__name__)

DEFAULT_HEADWAY_CUTOFF = 5.0
DEFAULT_MIN_ENTRY_SPEED = 2.0
DEFAULT_VIOLATION_FRAMES = 10
DEFAULT_HALF_WINDOW = 5.0


# --------------------------------------------------------------------------
# headways


@dataclass(frozen=True)
class HeadwayEvent:
    leader_id: str
    follower_id: str
    lane: str
    boundary: str
    headway: float
    crossing_times: tuple[float, float]
    leader_kind: AgentClass | None = None
    follower_kind: AgentClass | None = None


def line_crossings(track: AgentTrack, line: LineSegment, lane: str | None = None) -> list[float]:
    """Times at which ``track`` crosses ``line`` from its right to its left side.

    The crossing time is the linear-interpolation root of the signed distance
    between the bracketing samples. With ``lane`` given, only steps where the
    track is in that lane at either bracketing sample count.
    """
    s = line.side(track.x, track.y)
    k = np.flatnonzero((s[:-1] < 0) & (s[1:] >= 0))
    if lane is not None:
        if track.lane is None:
            return []
        in_lane = track.lane == lane
        k = k[in_lane[k] | in_lane[k + 1]]
    out = []
    for i in k.tolist():
        s0, s1 = s[i], s[i + 1]
        t0, t1 = track.t[i], track.t[i + 1]
        if s1 == 0:
            tc, frac = float(t1), 1.0
        else:
            frac = -s0 / (s1 - s0)
            tc = float(t0 + frac * (t1 - t0))
        xc = track.x[i] + frac * (track.x[i + 1] - track.x[i])
        yc = track.y[i] + frac * (track.y[i + 1] - track.y[i])
        if 0.0 <= float(line.along(xc, yc)) <= 1.0:
            out.append(tc)
    return out


def first_crossing(track: AgentTrack, line: LineSegment, lane: str | None = None) -> float | None:
    hits = line_crossings(track, line, lane)
    return hits[0] if hits else None


def lanes_without_lines(tracks: Iterable[AgentTrack], geometry: IntersectionGeometry, boundary: str) -> list[str]:
    lines = geometry.lines(boundary)
    seen = set()
    for tr in tracks:
        if tr.lane is not None and tr.kind.platoon_eligible:
            seen.update(v for v in tr.lane if v is not None)
    return sorted(seen - set(lines))


def compute_headways(
    tracks: Iterable[AgentTrack],
    geometry: IntersectionGeometry,
    boundary: str = "exit",
    cutoff: float = DEFAULT_HEADWAY_CUTOFF,
) -> list[HeadwayEvent]:
    """Headways between consecutive same-lane crossings of a boundary line.

    Only AVs and HDVs take part. Events with ``headway >= cutoff`` or a
    non-positive headway are discarded.
    """
    tracks = [tr for tr in tracks if tr.kind.platoon_eligible]
    for lane in lanes_without_lines(tracks, geometry, boundary):
        log.warning("lane %s has no %s line; skipped", lane, boundary)
    events = []
    for lane, line in sorted(geometry.lines(boundary).items()):
        crossings = []
        for tr in tracks:
            tc = first_crossing(tr, line, lane)
            if tc is not None:
                crossings.append((tc, tr.agent_id, tr.kind))
        crossings.sort()
        for (tl, lid, lk), (tf, fid, fk) in zip(crossings, crossings[1:]):
            h = tf - tl
            if 0 < h < cutoff:
                events.append(HeadwayEvent(lid, fid, lane, boundary, h, (tl, tf), lk, fk))
    return events


# --------------------------------------------------------------------------
# platoons


@dataclass(frozen=True)
class SpacingPolicy:
    d0: float = 4.0
    h: float = 2.0
    epsilon: float = 5.0

    def __post_init__(self):
        if not (self.d0 > 0 and self.h > 0 and self.epsilon >= 0):
            raise ValueError(f"invalid spacing policy {self}")

    def threshold(self, v):
        return self.d0 + self.h * np.asarray(v) + self.epsilon

    def satisfied(self, gap, v):
        return np.asarray(gap) - (self.d0 + self.h * np.asarray(v)) <= self.epsilon


@dataclass(frozen=True)
class PlatoonChain:
    leader_id: str
    leader_class: AgentClass
    formation_time: float
    members: tuple[str, ...] = ()
    gaps: tuple[float, ...] = ()
    speeds: tuple[float, ...] = ()
    lane: str | None = None

    def __len__(self):
        return 1 + len(self.members)

    @property
    def vehicles(self) -> tuple[str, ...]:
        return (self.leader_id, *self.members)


def bumper_gap(lead: AgentTrack, i: int, follow: AgentTrack, j: int) -> float:
    center = math.hypot(lead.x[i] - follow.x[j], lead.y[i] - follow.y[j])
    return center - 0.5 * (lead.length + follow.length)


def _max_violation_run(ok: np.ndarray) -> int:
    best = run = 0
    for flag in ok.tolist():
        run = 0 if flag else run + 1
        best = max(best, run)
    return best


def _upstream_candidates(leader: AgentTrack, li: int, candidates, time, lane, lane_half_width):
    hx, hy = math.cos(leader.heading[li]), math.sin(leader.heading[li])
    found = []
    for c in candidates:
        if c.agent_id == leader.agent_id or not c.kind.platoon_eligible:
            continue
        ci = c.index_at(time)
        if ci is None:
            continue
        dx, dy = c.x[ci] - leader.x[li], c.y[ci] - leader.y[li]
        lon = dx * hx + dy * hy
        if lon >= 0:
            continue
        c_lane = c.lane_at(ci)
        if lane is not None and c_lane is not None:
            if c_lane != lane:
                continue
        elif abs(-dx * hy + dy * hx) > lane_half_width:
            continue
        found.append((-lon, c.agent_id, c))
    found.sort(key=lambda item: (item[0], item[1]))
    return [c for _, _, c in found]


def identify_platoon(
    leader: AgentTrack,
    candidates: Iterable[AgentTrack],
    policy: SpacingPolicy = SpacingPolicy(),
    entry_time: float = 0.0,
    min_speed: float = DEFAULT_MIN_ENTRY_SPEED,
    green: bool | None = None,
    violation_frames: int = DEFAULT_VIOLATION_FRAMES,
    horizon: float = DEFAULT_HALF_WINDOW,
    lane_half_width: float = 2.0,
) -> PlatoonChain:
    """Walk upstream from ``leader`` collecting followers that satisfy the
    affine spacing rule ``gap - (d0 + h v) <= epsilon``.

    A follower joins when the rule holds at ``entry_time`` against its
    immediate predecessor and it never violates the rule for
    ``violation_frames`` consecutive frames within ``horizon`` seconds after
    entry. The chain ends at the first candidate that fails. A leader that is
    not moving faster than ``min_speed`` at entry, or enters on a non-green
    phase (``green is False``), yields a leader-only chain.
    """
    li = leader.index_at(entry_time)
    lane = leader.lane_at(li) if li is not None else None
    chain = PlatoonChain(leader.agent_id, leader.kind, entry_time, lane=lane)
    if li is None or leader.speed[li] <= min_speed or green is False:
        return chain

    members, gaps, speeds = [], [], []
    pred = leader
    for cand in _upstream_candidates(leader, li, candidates, entry_time, lane, lane_half_width):
        pi = pred.index_at(entry_time)
        ci = cand.index_at(entry_time)
        gap = bumper_gap(pred, pi, cand, ci)
        v = float(cand.speed[ci])
        if not policy.satisfied(gap, v):
            break
        win = np.flatnonzero((pred.t >= entry_time - 1e-9) & (pred.t <= entry_time + horizon + 1e-9))
        matched = [(i, cand.index_at(pred.t[i])) for i in win.tolist()]
        pidx = np.array([i for i, j in matched if j is not None], dtype=np.int64)
        cidx = np.array([j for i, j in matched if j is not None], dtype=np.int64)
        d = np.hypot(pred.x[pidx] - cand.x[cidx], pred.y[pidx] - cand.y[cidx]) - 0.5 * (pred.length + cand.length)
        if _max_violation_run(policy.satisfied(d, cand.speed[cidx])) >= violation_frames:
            break
        members.append(cand.agent_id)
        gaps.append(float(gap))
        speeds.append(v)
        pred = cand
    return PlatoonChain(leader.agent_id, leader.kind, entry_time,
                        tuple(members), tuple(gaps), tuple(speeds), lane)


# --------------------------------------------------------------------------
# string stability


@dataclass(frozen=True)
class GainResult:
    platoon_leader_id: str
    leader_id: str
    follower_id: str
    follower_position: int
    gain: float | None
    window: tuple[float, float]
    follower_window: tuple[float, float]
    leader_norm: float
    follower_norm: float
    leader_class: AgentClass | None = None

    @property
    def defined(self) -> bool:
        return self.gain is not None

    @property
    def stable(self) -> bool | None:
        return None if self.gain is None else self.gain <= 1.0


def accel_norm(track: AgentTrack, t0: float, half_window: float = DEFAULT_HALF_WINDOW) -> float:
    """L2 norm of the acceleration magnitude over ``[t0 - hw, t0 + hw]``."""
    lo, hi = t0 - half_window, t0 + half_window
    tol = 1e-6
    if track.t[0] > lo + tol or track.t[-1] < hi - tol:
        raise WindowCoverageError(
            f"track {track.agent_id!r} spans [{track.t[0]:.3f}, {track.t[-1]:.3f}], "
            f"window needs [{lo:.3f}, {hi:.3f}]"
        )
    mask = (track.t >= lo - tol) & (track.t <= hi + tol)
    a = track.accel_magnitude[mask]
    return float(np.sqrt(np.sum(a * a)))


def stability_gain(
    leader: AgentTrack,
    follower: AgentTrack,
    t0: float,
    half_window: float = DEFAULT_HALF_WINDOW,
    follower_t0: float | None = None,
    follower_position: int = 1,
    platoon_leader_id: str | None = None,
) -> GainResult:
    """Ratio of follower to leader acceleration L2 norms.

    The leader's window is centred at ``t0`` and the follower's at
    ``follower_t0`` (its own entry time; defaults to ``t0``). The gain is
    None when the leader's norm is zero.
    """
    ft0 = t0 if follower_t0 is None else follower_t0
    ln = accel_norm(leader, t0, half_window)
    fn = accel_norm(follower, ft0, half_window)
    gain = fn / ln if ln > 0 else None
    return GainResult(
        platoon_leader_id or leader.agent_id, leader.agent_id, follower.agent_id,
        follower_position, gain,
        (t0 - half_window, t0 + half_window), (ft0 - half_window, ft0 + half_window),
        ln, fn, leader.kind,
    )


# --------------------------------------------------------------------------
# orchestration over a dataset


@dataclass
class PlatoonAnalysis:
    chains: list[PlatoonChain] = field(default_factory=list)
    gains: list[GainResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def analyze_platoons(
    tracks: Sequence[AgentTrack],
    geometry: IntersectionGeometry,
    policy: SpacingPolicy = SpacingPolicy(),
    min_speed: float = DEFAULT_MIN_ENTRY_SPEED,
    violation_frames: int = DEFAULT_VIOLATION_FRAMES,
    half_window: float = DEFAULT_HALF_WINDOW,
    dt: float = 0.1,
    leader_kinds: Sequence[AgentClass] = (AgentClass.AV, AgentClass.HDV),
) -> PlatoonAnalysis:
    """Platoons for every AV/HDV entering on its lane's entry line, and the
    first follower's gain for every chain with at least one member.

    HDV-led chains use exactly the AV-led procedure.
    """
    out = PlatoonAnalysis()
    eligible = [tr for tr in tracks if tr.kind.platoon_eligible]
    by_id = {tr.agent_id: tr for tr in eligible}
    if not geometry.has_signals:
        out.notes.append("no signal phases supplied; green-entry filter reduced to a speed-only filter")
        log.warning(out.notes[-1])
    entry_times: dict[str, tuple[float, str]] = {}
    for lane, line in sorted(geometry.entry_lines.items()):
        for tr in eligible:
            tc = first_crossing(tr, line, lane)
            if tc is not None and (tr.agent_id not in entry_times or tc < entry_times[tr.agent_id][0]):
                entry_times[tr.agent_id] = (tc, lane)
    for vid in sorted(entry_times):
        tc, lane = entry_times[vid]
        leader = by_id[vid]
        if leader.kind not in leader_kinds:
            continue
        frame_time = round(tc / dt) * dt
        green = None
        if geometry.has_signals:
            phase = geometry.phase_at(lane, tc)
            green = None if phase is None else phase == "green"
        li = leader.index_at(frame_time)
        if li is None or leader.speed[li] <= min_speed or green is False:
            continue
        chain = identify_platoon(leader, eligible, policy, frame_time, min_speed, green,
                                 violation_frames, half_window)
        out.chains.append(chain)
        if not chain.members:
            continue
        follower = by_id[chain.members[0]]
        if follower.agent_id not in entry_times:
            out.notes.append(f"follower {follower.agent_id} of {vid} never crosses an entry line; gain skipped")
            continue
        try:
            out.gains.append(stability_gain(leader, follower, tc, half_window,
                                            follower_t0=entry_times[follower.agent_id][0]))
        except WindowCoverageError as exc:
            out.notes.append(f"gain for {vid}->{follower.agent_id} skipped: {exc}")
    return out
