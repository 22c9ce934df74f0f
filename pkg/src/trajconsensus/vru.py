"""Vulnerable-road-user metrics: pedestrian hesitation near turning
vehicles, deceleration grids and acceleration-vs-distance samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .core import AgentClass, AgentTrack
from .interactions import InteractionRecord

STRAIGHT = "straight"
TURNING_LEFT = "turning-left"
TURNING_RIGHT = "turning-right"

DECEL_CLIP = (0.0, 3.0)


def _median_dt(track: AgentTrack) -> float:
    return float(np.median(np.diff(track.t))) if len(track) > 1 else 0.1


def classify_turning(vehicle: AgentTrack, window: float = 3.0, threshold: float = 20.0) -> np.ndarray:
    """Per-frame turn label from the heading change over a centred window.

    Heading change is measured clockwise (positive to the right), so a
    cumulative change of ``-threshold`` degrees or less is a left turn. The
    threshold is inclusive.
    """
    n = len(vehicle)
    labels = np.full(n, STRAIGHT, dtype=object)
    if n < 2:
        return labels
    half = max(1, int(round(window / 2 / _median_dt(vehicle))))
    h = np.degrees(np.unwrap(vehicle.heading))
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n - 1)
    hi = np.clip(idx + half, 0, n - 1)
    cw_change = -(h[hi] - h[lo])
    tol = 1e-9
    labels[cw_change <= -threshold + tol] = TURNING_LEFT
    labels[cw_change >= threshold - tol] = TURNING_RIGHT
    return labels


@dataclass(frozen=True)
class HesitationParams:
    walk_threshold: float = 0.5
    min_walk_frames: int = 5
    slow_drop_fraction: float = 0.6
    min_slow_frames: int = 5
    recovery_fraction: float = 0.9
    vehicle_radius: float = 15.0
    turn_window: float = 3.0
    turn_threshold: float = 20.0
    turn_directions: tuple[str, ...] = (TURNING_LEFT,)

    def __post_init__(self):
        if not 0 < self.slow_drop_fraction < self.recovery_fraction:
            raise ValueError("need 0 < slow_drop_fraction < recovery_fraction")
        if self.min_walk_frames < 1 or self.min_slow_frames < 1:
            raise ValueError("frame counts must be at least 1")


@dataclass(frozen=True, eq=False)
class HesitationEvent:
    vru_id: str
    vehicle_id: str
    phases: tuple[float, float, float]
    min_speed_during_slow: float
    vehicle_distance_at_slow: float
    reference_speed: float
    slow_frames: int
    vehicle_kind: AgentClass | None = None
    vehicle_speed_profile: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def t_walk_start(self) -> float:
        return self.phases[0]

    @property
    def t_slow_start(self) -> float:
        return self.phases[1]

    @property
    def t_recover(self) -> float:
        return self.phases[2]

    def covers(self, time: float) -> bool:
        return self.phases[0] <= time <= self.phases[2]


def _speed_patterns(s: np.ndarray, p: HesitationParams):
    """Yield (walk_start, slow_start, recover, reference_speed) index tuples."""
    n = s.shape[0]
    w0 = None
    run_sum = 0.0
    run_len = 0
    k = 0
    while k < n:
        if w0 is None:
            if s[k] > p.walk_threshold:
                w0, run_sum, run_len = k, float(s[k]), 1
            k += 1
            continue
        ref = run_sum / run_len
        if run_len >= p.min_walk_frames and s[k] < p.slow_drop_fraction * ref:
            m = k
            while m < n and s[m] < p.slow_drop_fraction * ref:
                m += 1
            if m - k < p.min_slow_frames:
                w0 = None
                k = m
                continue
            j = m
            while j < n and not s[j] > p.recovery_fraction * ref:
                j += 1
            if j >= n:
                return
            yield w0, k, j, ref
            if s[j] > p.walk_threshold:
                w0, run_sum, run_len = j, float(s[j]), 1
            else:
                w0 = None
            k = j + 1
            continue
        if s[k] > p.walk_threshold:
            run_sum += float(s[k])
            run_len += 1
        else:
            w0 = None
        k += 1


def detect_hesitation(
    vru: AgentTrack,
    vehicles: Iterable[AgentTrack],
    params: HesitationParams = HesitationParams(),
    turning: Mapping[str, np.ndarray] | None = None,
    dt: float | None = None,
) -> list[HesitationEvent]:
    """Walk -> slow -> recover speed patterns with a turning vehicle nearby.

    The reference speed is the mean over the walking run that precedes the
    slow-down. A slow phase needs ``min_slow_frames`` consecutive frames
    below ``slow_drop_fraction`` of the reference and ends at the first frame
    above ``recovery_fraction`` of it. Some vehicle turning in one of
    ``params.turn_directions`` must be within ``vehicle_radius`` during the
    slow phase. ``turning`` may supply precomputed turn labels by vehicle id.
    """
    if not vru.kind.vru_flag:
        raise ValueError(f"agent {vru.agent_id!r} is not a VRU")
    vehicles = sorted((v for v in vehicles if v.kind.is_vehicle), key=lambda v: v.agent_id)
    dt = dt or _median_dt(vru)
    vru_frames = vru.frames(dt)
    events = []
    for w0, k, j, ref in _speed_patterns(vru.speed, params):
        slow = slice(k, j)
        best = None
        for veh in vehicles:
            labels = turning[veh.agent_id] if turning is not None and veh.agent_id in turning else \
                classify_turning(veh, params.turn_window, params.turn_threshold)
            vf = veh.frames(dt)
            common, vi, vj = np.intersect1d(vru_frames[slow], vf, return_indices=True)
            if common.size == 0:
                continue
            vi = vi + k
            d = np.hypot(vru.x[vi] - veh.x[vj], vru.y[vi] - veh.y[vj])
            ok = (d <= params.vehicle_radius) & np.isin(labels[vj], params.turn_directions)
            if not ok.any():
                continue
            first = int(np.argmax(ok))
            cand = (int(common[first]), float(d[first]), veh.agent_id, veh)
            if best is None or cand[:3] < best[:3]:
                best = cand
        if best is None:
            continue
        _, dist, vid, veh = best
        t_lo, t_hi = vru.t[w0], vru.t[j]
        m = (veh.t >= t_lo - 1e-9) & (veh.t <= t_hi + 1e-9)
        events.append(HesitationEvent(
            vru.agent_id, vid, (float(vru.t[w0]), float(vru.t[k]), float(vru.t[j])),
            float(vru.speed[slow].min()), dist, float(ref), j - k, veh.kind,
            (veh.t[m].copy(), veh.speed[m].copy()),
        ))
    return events


def detect_all_hesitations(
    tracks: Sequence[AgentTrack],
    params: HesitationParams = HesitationParams(),
    dt: float | None = None,
) -> list[HesitationEvent]:
    vehicles = [tr for tr in tracks if tr.kind.is_vehicle]
    turning = {v.agent_id: classify_turning(v, params.turn_window, params.turn_threshold) for v in vehicles}
    events = []
    for tr in sorted(tracks, key=lambda tr: tr.agent_id):
        if tr.kind.vru_flag:
            events.extend(detect_hesitation(tr, vehicles, params, turning, dt))
    return events


# --------------------------------------------------------------------------
# deceleration grid


@dataclass(frozen=True, eq=False)
class DecelGrid:
    origin: tuple[float, float]
    cell_size: float
    sums: np.ndarray
    counts: np.ndarray
    maxima: np.ndarray
    clip_range: tuple[float, float] = DECEL_CLIP

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    @property
    def total_count(self) -> int:
        return int(self.counts.sum())

    def values(self, reducer: str = "mean") -> np.ndarray:
        if reducer == "mean":
            return self.mean
        if reducer == "max":
            return np.where(self.counts > 0, self.maxima, np.nan)
        raise ValueError(f"unknown reducer {reducer!r}")

    def write(self, path: str | Path, reducer: str = "mean", label: str = "") -> None:
        """Dense matrix export; row ``r`` holds cells with y index ``r``."""
        vals = self.values(reducer)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# origin_x={self.origin[0]!r} origin_y={self.origin[1]!r} "
                     f"cell_size={self.cell_size!r} nx={self.shape[0]} ny={self.shape[1]} "
                     f"reducer={reducer} {label}".rstrip() + "\n")
            for row in vals.T:
                fh.write(",".join("" if np.isnan(v) else repr(float(v)) for v in row) + "\n")
        counts_path = Path(path).with_name(Path(path).stem + "_counts.csv")
        np.savetxt(counts_path, self.counts.T, fmt="%d", delimiter=",")


def build_decel_grid(
    tracks: Iterable[AgentTrack],
    region: tuple[float, float, float, float],
    cell_size: float,
    class_filter: AgentClass | Sequence[AgentClass] | None = None,
    clip: float = DECEL_CLIP[1],
) -> DecelGrid:
    """Accumulate clipped longitudinal deceleration per grid cell.

    ``region`` is ``(xmin, ymin, xmax, ymax)``, inclusive. Only frames with
    positive deceleration (negative acceleration along the heading)
    contribute.
    """
    xmin, ymin, xmax, ymax = map(float, region)
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("region is empty")
    if isinstance(class_filter, AgentClass):
        class_filter = (class_filter,)
    nx = max(1, int(np.ceil((xmax - xmin) / cell_size)))
    ny = max(1, int(np.ceil((ymax - ymin) / cell_size)))
    sums = np.zeros((nx, ny))
    counts = np.zeros((nx, ny), dtype=np.int64)
    maxima = np.zeros((nx, ny))
    for tr in tracks:
        if class_filter is not None and tr.kind not in class_filter:
            continue
        decel = -tr.longitudinal_accel
        m = (decel > 0) & (tr.x >= xmin) & (tr.x <= xmax) & (tr.y >= ymin) & (tr.y <= ymax)
        if not m.any():
            continue
        val = np.minimum(decel[m], clip)
        ix = np.minimum(((tr.x[m] - xmin) // cell_size).astype(np.int64), nx - 1)
        iy = np.minimum(((tr.y[m] - ymin) // cell_size).astype(np.int64), ny - 1)
        np.add.at(sums, (ix, iy), val)
        np.add.at(counts, (ix, iy), 1)
        np.maximum.at(maxima, (ix, iy), val)
    return DecelGrid((xmin, ymin), float(cell_size), sums, counts, maxima)


# --------------------------------------------------------------------------
# acceleration vs distance


class AccelDistance(NamedTuple):
    distance: float
    accel: float
    subject_class: AgentClass
    subject_id: str
    other_id: str
    time: float


def accel_vs_distance(
    interactions: Iterable[InteractionRecord], tracks: Mapping[str, AgentTrack]
) -> list[AccelDistance]:
    """One sample per frame of every vehicle->VRU record: the frame distance
    paired with the vehicle's signed longitudinal acceleration."""
    out = []
    for rec in interactions:
        if not (rec.subject_kind.is_vehicle and rec.other_kind.vru_flag):
            continue
        tr = tracks[rec.subject_id]
        idx = np.clip(np.searchsorted(tr.t, rec.times - 1e-6), 0, len(tr) - 1)
        acc = tr.longitudinal_accel[idx]
        for d, a, t in zip(rec.distances.tolist(), acc.tolist(), rec.times.tolist()):
            out.append(AccelDistance(d, a, rec.subject_kind, rec.subject_id, rec.other_id, t))
    return out
