"""Pairwise encounter detection and field-of-view zone assignment.

Bearings are measured clockwise from the subject's heading in degrees,
0 = straight ahead, 90 = to the right, in ``[0, 360)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from .core import HEADING_MIN_SPEED, AgentClass, AgentTrack, TrackSample, common_dt
from .errors import ConfigurationError

DEFAULT_RADIUS = 30.0
DEFAULT_MIN_DURATION = 0.5

# points processed per grid-hashing chunk; bounds peak memory
_CHUNK_POINTS = 2_000_000


@dataclass(frozen=True)
class Sector:
    name: str
    start: float
    end: float
    max_range: float


class ZoneLayout:
    """Angular sectors around a subject, tiling ``[0, 360)`` with half-open spans.

    A sector whose start is greater than its end wraps through 0.
    """

    def __init__(self, sectors: Sequence[Sector | tuple]):
        self.sectors = tuple(s if isinstance(s, Sector) else Sector(*s) for s in sectors)
        if not self.sectors:
            raise ConfigurationError("zone layout has no sectors")
        pieces = []
        for idx, s in enumerate(self.sectors):
            if not s.max_range > 0:
                raise ConfigurationError(f"sector {s.name!r} has non-positive range")
            a, b = s.start % 360.0, s.end % 360.0
            if a == b:
                raise ConfigurationError(f"sector {s.name!r} has an empty span")
            if a < b:
                pieces.append((a, b, idx))
            else:
                pieces.append((a, 360.0, idx))
                if b > 0:
                    pieces.append((0.0, b, idx))
        pieces.sort()
        edge = 0.0
        for a, b, idx in pieces:
            if abs(a - edge) > 1e-9:
                kind = "gap" if a > edge else "overlap"
                raise ConfigurationError(
                    f"zone layout has a {kind} at {min(a, edge):g} deg (sector {self.sectors[idx].name!r})"
                )
            edge = b
        if abs(edge - 360.0) > 1e-9:
            raise ConfigurationError(f"zone layout leaves a gap at {edge:g} deg")
        self._starts = np.array([p[0] for p in pieces])
        self._owner = np.array([p[2] for p in pieces])
        self._ranges = np.array([s.max_range for s in self.sectors])
        self._names = np.array([s.name for s in self.sectors] + [None], dtype=object)

    def __repr__(self):
        return f"ZoneLayout({[s.name for s in self.sectors]})"

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.sectors]

    def sector_index(self, bearing) -> np.ndarray:
        pos = np.searchsorted(self._starts, np.asarray(bearing, dtype=float), side="right") - 1
        return self._owner[np.clip(pos, 0, len(self._starts) - 1)]

    def lookup(self, bearing, distance) -> np.ndarray:
        """Zone names (object array, None where beyond the sector's range)."""
        idx = self.sector_index(bearing)
        out_of_range = np.asarray(distance, dtype=float) > self._ranges[idx]
        idx = np.where(out_of_range, len(self.sectors), idx)
        return np.asarray(self._names[idx], dtype=object)

    def to_dict(self) -> dict:
        return {
            "sectors": [
                {"name": s.name, "start": s.start, "end": s.end, "range": s.max_range}
                for s in self.sectors
            ]
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ZoneLayout":
        try:
            return cls([
                Sector(str(s["name"]), float(s["start"]), float(s["end"]), float(s["range"]))
                for s in doc["sectors"]
            ])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed zone layout: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ZoneLayout":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


def default_layout() -> ZoneLayout:
    return ZoneLayout([
        Sector("Main Fwd", -15.0, 15.0, 60.0),
        Sector("Narrow Fwd R", 15.0, 40.0, 40.0),
        Sector("Wide Fwd R", 40.0, 75.0, 30.0),
        Sector("Side Fwd R", 75.0, 110.0, 20.0),
        Sector("Rear R", 110.0, 160.0, 20.0),
        Sector("Rear Center", 160.0, 200.0, 20.0),
        Sector("Rear L", 200.0, 250.0, 20.0),
        Sector("Side Fwd L", 250.0, 285.0, 20.0),
        Sector("Wide Fwd L", 285.0, 320.0, 30.0),
        Sector("Narrow Fwd L", 320.0, 345.0, 40.0),
    ])


def bearing_deg(heading, dx, dy) -> np.ndarray:
    """Clockwise angle from ``heading`` (radians, math convention) to ``(dx, dy)``."""
    b = np.degrees(np.asarray(heading, dtype=float) - np.arctan2(dy, dx))
    b = np.mod(b, 360.0)
    return np.where(b >= 360.0, 0.0, b)


def assign_zone(
    subject_sample: TrackSample,
    other_position: tuple[float, float],
    layout: ZoneLayout | None = None,
    heading: float | None = None,
) -> str | None:
    layout = layout or default_layout()
    if heading is None:
        if subject_sample.speed <= HEADING_MIN_SPEED:
            raise ValueError("subject heading undefined at this speed; pass heading explicitly")
        heading = math.atan2(subject_sample.vy, subject_sample.vx)
    dx = other_position[0] - subject_sample.x
    dy = other_position[1] - subject_sample.y
    b = bearing_deg(heading, dx, dy)
    return layout.lookup(b, math.hypot(dx, dy)).item()


@dataclass(frozen=True, eq=False)
class InteractionRecord:
    subject_id: str
    other_id: str
    subject_kind: AgentClass
    other_kind: AgentClass
    times: np.ndarray
    distances: np.ndarray
    bearings: np.ndarray
    zones: np.ndarray

    @property
    def start_time(self) -> float:
        return float(self.times[0])

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time

    @property
    def record_id(self) -> str:
        return f"{self.subject_id}|{self.other_id}|{self.start_time:.6f}"

    @property
    def frames(self) -> list[tuple[float, float, float, str | None]]:
        return list(zip(self.times.tolist(), self.distances.tolist(),
                        self.bearings.tolist(), self.zones.tolist()))

    def __len__(self):
        return self.times.shape[0]

    def __repr__(self):
        return (f"InteractionRecord({self.subject_id!r}->{self.other_id!r}, "
                f"[{self.start_time:.2f}, {self.end_time:.2f}], n={len(self)})")


def _sort_key(rec: InteractionRecord):
    return (rec.subject_id, rec.other_id, rec.start_time)


def _chunk_pairs(x, y, frames, radius):
    """Unordered within-radius pairs in one chunk via uniform-grid hashing.

    Returns local point indices (i, j) and their distances.
    """
    cx = np.floor(x / radius).astype(np.int64)
    cy = np.floor(y / radius).astype(np.int64)
    # pad by one cell on every side so neighbour offsets never wrap
    cx -= cx.min() - 1
    cy -= cy.min() - 1
    ny = int(cy.max()) + 2
    nx = int(cx.max()) + 2
    fr = frames - frames.min()
    if (int(fr.max()) + 1) * nx * ny >= 2**62:
        raise OverflowError("spatial extent too large for grid hashing")
    key = (fr * nx + cx) * ny + cy
    perm = np.argsort(key, kind="stable")
    sk = key[perm]
    n = sk.shape[0]
    ar = np.arange(n)
    out_i, out_j = [], []
    for dxc, dyc in ((0, 0), (0, 1), (1, -1), (1, 0), (1, 1)):
        target = sk + (dxc * ny + dyc)
        hi = np.searchsorted(sk, target, side="right")
        if dxc == 0 and dyc == 0:
            lo = ar + 1
        else:
            lo = np.searchsorted(sk, target, side="left")
        counts = np.maximum(hi - lo, 0)
        total = int(counts.sum())
        if total == 0:
            continue
        starts = np.cumsum(counts) - counts
        ii = np.repeat(ar, counts)
        jj = np.arange(total) - np.repeat(starts - lo, counts)
        out_i.append(perm[ii])
        out_j.append(perm[jj])
    if not out_i:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    i = np.concatenate(out_i)
    j = np.concatenate(out_j)
    d = np.hypot(x[j] - x[i], y[j] - y[i])
    keep = d <= radius
    return i[keep], j[keep], d[keep]


def detect_interactions(
    tracks: Iterable[AgentTrack],
    radius: float = DEFAULT_RADIUS,
    min_duration: float = DEFAULT_MIN_DURATION,
    layout: ZoneLayout | None = None,
    dt: float | None = None,
    threads: int = 1,
) -> list[InteractionRecord]:
    """Find contiguous within-``radius`` episodes for every ordered agent pair.

    Tracks must share a frame-aligned grid (see ``resample_track``). Candidate
    pairs come from hashing each frame's positions into ``radius``-sized cells
    and comparing only neighbouring cells. Both directions of every episode
    are returned, sorted by (subject, other, start time).
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    tracks = sorted(tracks, key=lambda tr: tr.agent_id)
    if len(tracks) < 2:
        return []
    layout = layout or default_layout()
    dt = dt or common_dt(tracks)

    sizes = np.array([len(tr) for tr in tracks])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    frames = np.concatenate([tr.frames(dt) for tr in tracks])
    order = np.argsort(frames, kind="stable")
    frames_sorted = frames[order]

    # chunk boundaries fall between frames so each frame lives in one chunk
    bounds = [0]
    while bounds[-1] < order.shape[0]:
        nxt = min(bounds[-1] + _CHUNK_POINTS, order.shape[0])
        if nxt < order.shape[0]:
            nxt = int(np.searchsorted(frames_sorted, frames_sorted[nxt], side="left"))
            if nxt <= bounds[-1]:
                nxt = int(np.searchsorted(frames_sorted, frames_sorted[bounds[-1]], side="right"))
        bounds.append(nxt)

    xs = np.concatenate([tr.x for tr in tracks])
    ys = np.concatenate([tr.y for tr in tracks])
    agent = np.repeat(np.arange(len(tracks)), sizes)

    def work(k):
        sel = order[bounds[k]:bounds[k + 1]]
        i, j, d = _chunk_pairs(xs[sel], ys[sel], frames[sel], radius)
        return sel[i], sel[j], d

    nchunks = len(bounds) - 1
    if threads > 1 and nchunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(nchunks)))
    else:
        results = [work(k) for k in range(nchunks)]
    pi = np.concatenate([r[0] for r in results])
    pj = np.concatenate([r[1] for r in results])
    dist = np.concatenate([r[2] for r in results])
    if pi.size == 0:
        return []

    # orient every pair so the lower agent index comes first
    swap = agent[pi] > agent[pj]
    pa = np.where(swap, pj, pi)
    pb = np.where(swap, pi, pj)
    na = len(tracks)
    pair_key = agent[pa].astype(np.int64) * na + agent[pb]
    fr = frames[pa]
    srt = np.lexsort((fr, pair_key))
    pa, pb, dist, pair_key, fr = pa[srt], pb[srt], dist[srt], pair_key[srt], fr[srt]

    brk = np.flatnonzero((pair_key[1:] != pair_key[:-1]) | (fr[1:] != fr[:-1] + 1)) + 1
    starts = np.concatenate([[0], brk])
    ends = np.concatenate([brk, [pa.shape[0]]])
    long_enough = (fr[ends - 1] - fr[starts]) * dt >= min_duration - 1e-9
    starts, ends = starts[long_enough], ends[long_enough]
    if starts.size == 0:
        return []

    seg = np.zeros(pa.shape[0] + 1, dtype=np.int64)
    np.add.at(seg, starts, 1)
    np.add.at(seg, ends, -1)
    keep = np.cumsum(seg[:-1]) > 0
    pa, pb, dist = pa[keep], pb[keep], dist[keep]
    lengths = ends - starts
    new_starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])

    headings = np.concatenate([tr.heading for tr in tracks])
    ts = np.concatenate([tr.t for tr in tracks])
    dx = xs[pb] - xs[pa]
    dy = ys[pb] - ys[pa]
    bear_ab = bearing_deg(headings[pa], dx, dy)
    bear_ba = bearing_deg(headings[pb], -dx, -dy)
    zone_ab = layout.lookup(bear_ab, dist)
    zone_ba = layout.lookup(bear_ba, dist)
    times = ts[pa]

    records = []
    for s, n in zip(new_starts.tolist(), lengths.tolist()):
        sl = slice(s, s + n)
        ta = tracks[agent[pa[s]]]
        tb = tracks[agent[pb[s]]]
        t = times[sl]
        d = dist[sl]
        records.append(InteractionRecord(ta.agent_id, tb.agent_id, ta.kind, tb.kind,
                                         t, d, bear_ab[sl], zone_ab[sl]))
        records.append(InteractionRecord(tb.agent_id, ta.agent_id, tb.kind, ta.kind,
                                         t, d, bear_ba[sl], zone_ba[sl]))
    records.sort(key=_sort_key)
    return records


# --------------------------------------------------------------------------
# dump I/O

INTERACTION_COLUMNS = ["record_id", "subject", "other", "subject_class", "other_class",
                       "time", "distance", "bearing", "zone"]


def interactions_to_frame(records: Sequence[InteractionRecord]) -> pd.DataFrame:
    if not records:
        return pd.DataFrame(columns=INTERACTION_COLUMNS)
    n = np.array([len(r) for r in records])
    zones = np.concatenate([r.zones for r in records])
    return pd.DataFrame({
        "record_id": np.repeat([r.record_id for r in records], n),
        "subject": np.repeat([r.subject_id for r in records], n),
        "other": np.repeat([r.other_id for r in records], n),
        "subject_class": np.repeat([r.subject_kind.value for r in records], n),
        "other_class": np.repeat([r.other_kind.value for r in records], n),
        "time": np.concatenate([r.times for r in records]),
        "distance": np.concatenate([r.distances for r in records]),
        "bearing": np.concatenate([r.bearings for r in records]),
        "zone": np.where(zones == None, "", zones),  # noqa: E711
    })


def write_interactions(records: Sequence[InteractionRecord], path: str | Path) -> None:
    interactions_to_frame(records).to_csv(path, index=False)


def read_interactions(path: str | Path) -> list[InteractionRecord]:
    df = pd.read_csv(path, dtype={"record_id": str, "subject": str, "other": str, "zone": str},
                     keep_default_na=False, float_precision="round_trip")
    records = []
    for _, grp in df.groupby("record_id", sort=False):
        first = grp.iloc[0]
        zones = grp["zone"].to_numpy(dtype=object)
        zones = np.where(zones == "", None, zones)
        records.append(InteractionRecord(
            str(first["subject"]), str(first["other"]),
            AgentClass.parse(first["subject_class"]), AgentClass.parse(first["other_class"]),
            grp["time"].to_numpy(float), grp["distance"].to_numpy(float),
            grp["bearing"].to_numpy(float), zones,
        ))
    records.sort(key=_sort_key)
    return records
