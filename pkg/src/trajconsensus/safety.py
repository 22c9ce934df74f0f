"""Surrogate safety measures: time-to-collision, post-encroachment time,
TTC exposure and crosswalk co-occupancy."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import AgentTrack, IntersectionGeometry, TrackSample, common_dt
from .errors import ConfigurationError
from .interactions import InteractionRecord

DEFAULT_PET_THRESHOLD = 5.0
DEFAULT_EXPOSURE_THRESHOLD = 3.0
DEFAULT_TTC_REPORT_CUTOFF = 10.0
DEFAULT_VRU_SPEED_MIN = 0.5

# closing speed returned for coincident positions; ttc_frame maps d = 0 to 0
OVERLAP = math.inf


def ttc_frame(d: float, v_rel: float) -> float:
    """Time to collision ``d / v_rel``; infinite when not closing, 0 on overlap."""
    if d < 0:
        raise ValueError(f"distance must be non-negative, got {d}")
    if d == 0:
        return 0.0
    if v_rel <= 0:
        return math.inf
    return d / v_rel


def ttc_array(d: np.ndarray, v_rel: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    v_rel = np.asarray(v_rel, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(v_rel > 0, d / np.where(v_rel > 0, v_rel, 1.0), np.inf)
    out[d == 0] = 0.0
    return out


def relative_closing_speed(subject: TrackSample, other: TrackSample) -> float:
    """Relative speed along the line joining the agents; positive when closing."""
    dx, dy = other.x - subject.x, other.y - subject.y
    dist = math.hypot(dx, dy)
    if dist == 0:
        return OVERLAP
    dvx, dvy = other.vx - subject.vx, other.vy - subject.vy
    return -(dvx * dx + dvy * dy) / dist


def closing_speed_array(px, py, pvx, pvy, qx, qy, qvx, qvy) -> np.ndarray:
    dx, dy = qx - px, qy - py
    dist = np.hypot(dx, dy)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = -((qvx - pvx) * dx + (qvy - pvy) * dy) / dist
    return np.where(dist == 0, OVERLAP, v)


@dataclass(frozen=True)
class ClosestApproach:
    separation: float
    t_a: float
    t_b: float

    @property
    def time_gap(self) -> float:
        return abs(self.t_a - self.t_b)


def _pick(d2: np.ndarray, gap: np.ndarray, ia: np.ndarray, ib: np.ndarray):
    best = d2.min()
    tie = d2 == best
    k = np.flatnonzero(tie)[np.argmin(gap[tie])]
    return best, ia[k], ib[k]


def closest_approach(track_a: AgentTrack, track_b: AgentTrack) -> ClosestApproach:
    """Global minimum separation over all (t_a, t_b) sample pairs.

    Ties in separation go to the pair with the smallest time gap. A KD-tree
    prunes the search to pairs within rounding of the minimum; the exact
    squared distances are then compared directly.
    """
    pa = np.column_stack([track_a.x, track_a.y])
    pb = np.column_stack([track_b.x, track_b.y])
    tree = cKDTree(pb)
    nn, _ = tree.query(pa, k=1)
    dmin = float(nn.min())
    reach = dmin * (1 + 1e-9) + 1e-9
    cand_a = np.flatnonzero(nn <= reach)
    ia, ib = [], []
    for i, hits in zip(cand_a, tree.query_ball_point(pa[cand_a], reach)):
        ia.extend([i] * len(hits))
        ib.extend(hits)
    ia = np.asarray(ia, dtype=np.int64)
    ib = np.asarray(ib, dtype=np.int64)
    d2 = (track_a.x[ia] - track_b.x[ib]) ** 2 + (track_a.y[ia] - track_b.y[ib]) ** 2
    gap = np.abs(track_a.t[ia] - track_b.t[ib])
    best, i, j = _pick(d2, gap, ia, ib)
    return ClosestApproach(math.sqrt(best), float(track_a.t[i]), float(track_b.t[j]))


def compute_pet(
    track_a: AgentTrack, track_b: AgentTrack, proximity_threshold: float = DEFAULT_PET_THRESHOLD
) -> float | None:
    """Post-encroachment time at the point of closest proximity, or None when
    the agents never come within ``proximity_threshold``."""
    ca = closest_approach(track_a, track_b)
    if ca.separation < proximity_threshold:
        return ca.time_gap
    return None


@dataclass(frozen=True, eq=False)
class ConflictMetrics:
    subject_id: str
    other_id: str
    record_id: str
    times: np.ndarray
    distances: np.ndarray
    closing_speeds: np.ndarray
    ttc: np.ndarray
    pet: float | None
    min_separation: float
    min_separation_times: tuple[float, float]

    @property
    def pair(self) -> tuple[str, str]:
        return (self.subject_id, self.other_id)

    @property
    def ttc_series(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.ttc.tolist()))

    @property
    def min_ttc(self) -> float:
        return float(self.ttc.min())


def ttc_exposure(metrics: ConflictMetrics, threshold: float = DEFAULT_EXPOSURE_THRESHOLD,
                 dt: float = 0.1) -> float:
    """Total time spent with finite TTC below ``threshold``."""
    if metrics.ttc.shape[0] == 0:
        raise ValueError("empty TTC series")
    ttc = metrics.ttc
    return dt * int(np.count_nonzero(np.isfinite(ttc) & (ttc < threshold)))


def _indices_at(track: AgentTrack, times: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(track.t, times - 1e-6)
    idx = np.clip(idx, 0, len(track) - 1)
    if np.any(np.abs(track.t[idx] - times) > 1e-6):
        raise ValueError(f"track {track.agent_id!r} has no sample at some interaction frame")
    return idx


def conflict_metrics(
    record: InteractionRecord,
    tracks: Mapping[str, AgentTrack],
    pet_threshold: float = DEFAULT_PET_THRESHOLD,
    closest: ClosestApproach | None = None,
) -> ConflictMetrics:
    """TTC for every frame of ``record`` plus the pair's PET."""
    s = tracks[record.subject_id]
    o = tracks[record.other_id]
    i = _indices_at(s, record.times)
    j = _indices_at(o, record.times)
    v = closing_speed_array(s.x[i], s.y[i], s.vx[i], s.vy[i], o.x[j], o.y[j], o.vx[j], o.vy[j])
    ttc = ttc_array(record.distances, v)
    if closest is None:
        closest = closest_approach(s, o)
    pet = closest.time_gap if closest.separation < pet_threshold else None
    return ConflictMetrics(
        record.subject_id, record.other_id, record.record_id,
        record.times, record.distances, v, ttc, pet,
        closest.separation, (closest.t_a, closest.t_b),
    )


def compute_conflicts(
    records: Sequence[InteractionRecord],
    tracks: Mapping[str, AgentTrack],
    pet_threshold: float = DEFAULT_PET_THRESHOLD,
    threads: int = 1,
) -> list[ConflictMetrics]:
    """Conflict metrics for every record; the closest approach is computed
    once per unordered pair and reused for both directions."""
    pairs = sorted({tuple(sorted((r.subject_id, r.other_id))) for r in records})

    def approach(pair):
        return closest_approach(tracks[pair[0]], tracks[pair[1]])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            found = dict(zip(pairs, pool.map(approach, pairs)))
    else:
        found = {p: approach(p) for p in pairs}

    out = []
    for rec in records:
        key = tuple(sorted((rec.subject_id, rec.other_id)))
        ca = found[key]
        if key[0] != rec.subject_id:
            ca = ClosestApproach(ca.separation, ca.t_b, ca.t_a)
        out.append(conflict_metrics(rec, tracks, pet_threshold, closest=ca))
    return out


# --------------------------------------------------------------------------
# crosswalk co-occupancy


@dataclass(frozen=True)
class CoOccupancyEvent:
    vehicle_id: str
    vru_id: str
    zone: str
    overlap_interval: tuple[float, float]
    vru_speed_at_entry: float
    vru_ids: tuple[str, ...] = ()

    @property
    def duration(self) -> float:
        return self.overlap_interval[1] - self.overlap_interval[0]


def detect_co_occupancy(
    tracks: Iterable[AgentTrack],
    geometry: IntersectionGeometry,
    vru_speed_min: float = DEFAULT_VRU_SPEED_MIN,
    dt: float | None = None,
) -> list[CoOccupancyEvent]:
    """Maximal intervals where a vehicle and a moving VRU share a crosswalk.

    A VRU counts while its speed exceeds ``vru_speed_min``. Each event names
    the lowest-id VRU present at its first frame and lists every VRU seen.
    """
    if geometry is None or not geometry.crosswalk_zones:
        raise ConfigurationError("co-occupancy needs at least one crosswalk zone")
    tracks = sorted(tracks, key=lambda tr: tr.agent_id)
    dt = dt or common_dt(tracks)
    vrus = [tr for tr in tracks if tr.kind.vru_flag]
    vehicles = [tr for tr in tracks if tr.kind.is_vehicle]
    events = []
    for poly in geometry.crosswalk_zones:
        active: dict[int, list[tuple[str, float]]] = {}
        for tr in vrus:
            mask = poly.contains(tr.x, tr.y) & (tr.speed > vru_speed_min)
            for f, sp in zip(tr.frames(dt)[mask].tolist(), tr.speed[mask].tolist()):
                active.setdefault(f, []).append((tr.agent_id, sp))
        if not active:
            continue
        active_frames = np.array(sorted(active), dtype=np.int64)
        for veh in vehicles:
            frames = veh.frames(dt)
            inside = poly.contains(veh.x, veh.y) & np.isin(frames, active_frames)
            idx = np.flatnonzero(inside)
            if idx.size == 0:
                continue
            runs = np.split(idx, np.flatnonzero(np.diff(frames[idx]) != 1) + 1)
            for run in runs:
                first = active[int(frames[run[0]])]
                vru_id, speed = min(first)
                seen = sorted({v for k in run for v, _ in active[int(frames[k])]})
                events.append(CoOccupancyEvent(
                    veh.agent_id, vru_id, poly.name,
                    (float(veh.t[run[0]]), float(veh.t[run[-1]])), float(speed), tuple(seen),
                ))
    events.sort(key=lambda e: (e.vehicle_id, e.zone, e.overlap_interval[0]))
    return events
