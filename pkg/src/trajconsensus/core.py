"""Trajectory data model, intersection geometry and ingestion.

Tracks are stored column-wise as read-only numpy arrays. Everything
downstream assumes tracks have been put on a common, frame-aligned time grid
with :func:`resample_track` (time ``k * dt`` for integer ``k``), so that two
tracks can be joined on their integer frame index.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from .errors import ConfigurationError, EmptyDatasetError, ResampleError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_DT = 0.1
HEADING_MIN_SPEED = 0.3

REQUIRED_COLUMNS = ("id", "time", "x", "y", "vx", "vy", "ax", "ay", "class", "lane")
OPTIONAL_COLUMNS = ("length", "width")
KINEMATIC_COLUMNS = ("time", "x", "y", "vx", "vy", "ax", "ay")


class AgentClass(enum.Enum):
    AV = "AV"
    HDV = "HDV"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    SCOOTER = "Scooter"
    BUS = "Bus"
    TRUCK = "Truck"

    @property
    def vru_flag(self) -> bool:
        return self in _VRU_KINDS

    @property
    def platoon_eligible(self) -> bool:
        return self in (AgentClass.AV, AgentClass.HDV)

    @property
    def is_vehicle(self) -> bool:
        return not self.vru_flag

    @classmethod
    def parse(cls, raw: str) -> "AgentClass":
        key = str(raw).strip().lower()
        for kind in cls:
            if key in (kind.value.lower(), kind.name.lower()):
                return kind
        raise ValueError(f"unknown agent class {raw!r}")


_VRU_KINDS = frozenset({AgentClass.PEDESTRIAN, AgentClass.CYCLIST, AgentClass.SCOOTER})

# (length, width) in meters, used when the input carries no dimensions
DEFAULT_DIMENSIONS = {
    AgentClass.AV: (4.8, 1.9),
    AgentClass.HDV: (4.8, 1.9),
    AgentClass.BUS: (12.0, 2.55),
    AgentClass.TRUCK: (8.0, 2.5),
    AgentClass.PEDESTRIAN: (0.5, 0.5),
    AgentClass.CYCLIST: (1.8, 0.6),
    AgentClass.SCOOTER: (1.2, 0.6),
}


@dataclass(frozen=True)
class TrackSample:
    time: float
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    lane: str | None = None

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def _readonly(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One road user's time-indexed kinematic record.

    Array fields share one length and are read-only after construction.
    ``lane`` is either ``None`` (no lane information at all) or an object
    array holding a lane id or ``None`` per sample.
    """

    agent_id: str
    kind: AgentClass
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    lane: np.ndarray | None = None
    length: float | None = None
    width: float | None = None

    def __post_init__(self):
        n = None
        for name in ("t", "x", "y", "vx", "vy", "ax", "ay"):
            arr = _readonly(getattr(self, name))
            object.__setattr__(self, name, arr)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} samples, expected {n}")
        if n == 0:
            raise ValueError(f"track {self.agent_id!r} has no samples")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError(f"track {self.agent_id!r} times are not strictly increasing")
        if self.lane is not None:
            lane = np.asarray(self.lane, dtype=object)
            if lane.shape != (n,):
                raise ValueError("lane must have one entry per sample")
            lane.setflags(write=False)
            object.__setattr__(self, "lane", lane)
        default_len, default_wid = DEFAULT_DIMENSIONS[self.kind]
        if self.length is None:
            object.__setattr__(self, "length", default_len)
        if self.width is None:
            object.__setattr__(self, "width", default_wid)
        object.__setattr__(self, "agent_id", str(self.agent_id))

    def __len__(self) -> int:
        return self.t.shape[0]

    def __repr__(self) -> str:
        return (
            f"AgentTrack({self.agent_id!r}, {self.kind.value}, n={len(self)}, "
            f"t=[{self.t[0]:.3f}, {self.t[-1]:.3f}])"
        )

    @property
    def start_time(self) -> float:
        return float(self.t[0])

    @property
    def end_time(self) -> float:
        return float(self.t[-1])

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @functools.cached_property
    def speed(self) -> np.ndarray:
        return _readonly(np.hypot(self.vx, self.vy))

    @functools.cached_property
    def heading(self) -> np.ndarray:
        """Heading in radians (math convention, counter-clockwise from +x)."""
        return _readonly(held_heading(self.vx, self.vy))

    @functools.cached_property
    def accel_magnitude(self) -> np.ndarray:
        return _readonly(np.hypot(self.ax, self.ay))

    @functools.cached_property
    def longitudinal_accel(self) -> np.ndarray:
        """Signed acceleration along the heading (negative while braking)."""
        h = self.heading
        return _readonly(self.ax * np.cos(h) + self.ay * np.sin(h))

    def lane_at(self, i: int) -> str | None:
        return None if self.lane is None else self.lane[i]

    def sample(self, i: int) -> TrackSample:
        return TrackSample(
            float(self.t[i]), float(self.x[i]), float(self.y[i]),
            float(self.vx[i]), float(self.vy[i]),
            float(self.ax[i]), float(self.ay[i]),
            self.lane_at(i),
        )

    def samples(self) -> list[TrackSample]:
        return [self.sample(i) for i in range(len(self))]

    def index_at(self, time: float, tol: float = 1e-6) -> int | None:
        """Index of the sample at ``time`` (within ``tol``), else None."""
        i = int(np.searchsorted(self.t, time - tol))
        if i < len(self) and abs(self.t[i] - time) <= tol:
            return i
        return None

    def frames(self, dt: float) -> np.ndarray:
        return np.rint(self.t / dt).astype(np.int64)

    def with_arrays(self, **arrays) -> "AgentTrack":
        kw = {
            name: getattr(self, name)
            for name in ("t", "x", "y", "vx", "vy", "ax", "ay", "lane")
        }
        kw.update(arrays)
        return AgentTrack(self.agent_id, self.kind, length=self.length, width=self.width, **kw)


def held_heading(vx: np.ndarray, vy: np.ndarray, min_speed: float = HEADING_MIN_SPEED) -> np.ndarray:
    """``atan2(vy, vx)`` where speed exceeds ``min_speed``; held otherwise.

    Leading low-speed samples take the first valid heading. A track that never
    moves gets heading 0.
    """
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    raw = np.arctan2(vy, vx)
    valid = np.hypot(vx, vy) > min_speed
    if not valid.any():
        return np.zeros_like(raw)
    idx = np.where(valid, np.arange(raw.shape[0]), -1)
    np.maximum.accumulate(idx, out=idx)
    idx[idx < 0] = int(np.argmax(valid))
    return raw[idx]


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class LineSegment:
    """Directed segment ``a -> b``. Crossings count from right to left side."""

    a: tuple[float, float]
    b: tuple[float, float]

    def __post_init__(self):
        if math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1]) <= 0:
            raise ConfigurationError(f"line segment {self.a}->{self.b} has zero length")

    def side(self, x, y):
        """Signed side value, positive on the left of ``a -> b`` (in meters)."""
        dx, dy = self.b[0] - self.a[0], self.b[1] - self.a[1]
        norm = math.hypot(dx, dy)
        return (dx * (np.asarray(y) - self.a[1]) - dy * (np.asarray(x) - self.a[0])) / norm

    def along(self, x, y):
        """Fractional position of the projection onto the segment (0 at a, 1 at b)."""
        dx, dy = self.b[0] - self.a[0], self.b[1] - self.a[1]
        return ((np.asarray(x) - self.a[0]) * dx + (np.asarray(y) - self.a[1]) * dy) / (dx * dx + dy * dy)


@dataclass(frozen=True)
class Polygon:
    name: str
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ConfigurationError(f"polygon {self.name!r} needs at least 3 (x, y) vertices")
        area = polygon_area(v)
        if abs(area) <= 0:
            raise ConfigurationError(f"polygon {self.name!r} has zero area")
        if area < 0:
            v = v[::-1].copy()
        if not _is_convex(v):
            raise ConfigurationError(f"polygon {self.name!r} is not convex")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def contains(self, x, y) -> np.ndarray:
        """Vectorized inclusion test; points on the boundary count as inside."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = np.ones(np.broadcast(x, y).shape, dtype=bool)
        v = self.vertices
        for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
            cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
            inside &= cross >= 0
        return inside


def polygon_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _is_convex(v: np.ndarray) -> bool:
    d1 = np.roll(v, -1, axis=0) - v
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross >= -1e-12))


@dataclass(frozen=True)
class SignalPhase:
    start: float
    end: float
    phase: str

    def __post_init__(self):
        if self.phase not in ("green", "yellow", "red"):
            raise ConfigurationError(f"unknown signal phase {self.phase!r}")
        if not self.end > self.start:
            raise ConfigurationError(f"signal phase [{self.start}, {self.end}) is empty")


@dataclass(frozen=True)
class IntersectionGeometry:
    crosswalk_zones: tuple[Polygon, ...] = ()
    entry_lines: Mapping[str, LineSegment] = field(default_factory=dict)
    exit_lines: Mapping[str, LineSegment] = field(default_factory=dict)
    signal_phases: Mapping[str, tuple[SignalPhase, ...]] | None = None

    def lines(self, boundary: str) -> Mapping[str, LineSegment]:
        if boundary == "entry":
            return self.entry_lines
        if boundary == "exit":
            return self.exit_lines
        raise ValueError(f"boundary must be 'entry' or 'exit', got {boundary!r}")

    @property
    def has_signals(self) -> bool:
        return bool(self.signal_phases)

    def phase_at(self, approach: str, time: float) -> str | None:
        if not self.signal_phases or approach not in self.signal_phases:
            return None
        for ph in self.signal_phases[approach]:
            if ph.start <= time < ph.end:
                return ph.phase
        return None

    @classmethod
    def from_dict(cls, doc: Mapping) -> "IntersectionGeometry":
        doc = doc or {}
        try:
            zones = tuple(
                Polygon(str(z["name"]), np.asarray(z["vertices"], dtype=float))
                for z in doc.get("crosswalk_zones", []) or []
            )
            names = [z.name for z in zones]
            if len(set(names)) != len(names):
                raise ConfigurationError("crosswalk zone names must be unique")

            def _lines(key):
                return {
                    str(lane): LineSegment(tuple(map(float, seg[0])), tuple(map(float, seg[1])))
                    for lane, seg in (doc.get(key, {}) or {}).items()
                }

            phases = None
            if doc.get("signal_phases"):
                phases = {
                    str(approach): tuple(
                        SignalPhase(float(p[0]), float(p[1]), str(p[2])) for p in items
                    )
                    for approach, items in doc["signal_phases"].items()
                }
            return cls(zones, _lines("entry_lines"), _lines("exit_lines"), phases)
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise ConfigurationError(f"malformed geometry document: {exc}") from exc

    def to_dict(self) -> dict:
        doc: dict = {
            "crosswalk_zones": [
                {"name": z.name, "vertices": z.vertices.tolist()} for z in self.crosswalk_zones
            ],
            "entry_lines": {k: [list(s.a), list(s.b)] for k, s in self.entry_lines.items()},
            "exit_lines": {k: [list(s.a), list(s.b)] for k, s in self.exit_lines.items()},
        }
        if self.signal_phases:
            doc["signal_phases"] = {
                k: [[p.start, p.end, p.phase] for p in v] for k, v in self.signal_phases.items()
            }
        return doc


def load_geometry(path: str | Path) -> IntersectionGeometry:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if "geometry" in doc and isinstance(doc["geometry"], dict):
        doc = doc["geometry"]
    return IntersectionGeometry.from_dict(doc)


# --------------------------------------------------------------------------
# ingestion


@dataclass
class SchemaConfig:
    """Maps canonical column names to the names used in a source file."""

    columns: dict[str, str] = field(
        default_factory=lambda: {c: c for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS})
    class_map: dict[str, str] = field(default_factory=dict)
    delimiter: str = ","
    # optional column flagging automated vehicles, e.g. TGSIM's "av" column
    av_column: str | None = None
    av_true_values: tuple[str, ...] = ("yes", "true", "1", "y")

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "SchemaConfig":
        doc = dict(doc or {})
        columns = {c: c for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
        columns.update({str(k): str(v) for k, v in (doc.get("columns") or {}).items()})
        unknown = set(columns) - set(REQUIRED_COLUMNS) - set(OPTIONAL_COLUMNS)
        if unknown:
            raise SchemaError(f"unknown canonical columns in schema: {sorted(unknown)}")
        return cls(
            columns=columns,
            class_map={str(k): str(v) for k, v in (doc.get("class_map") or {}).items()},
            delimiter=str(doc.get("delimiter", ",")),
            av_column=doc.get("av_column"),
            av_true_values=tuple(str(v).lower() for v in doc.get("av_true_values", cls.av_true_values)),
        )

    def to_dict(self) -> dict:
        return {
            "columns": dict(self.columns),
            "class_map": dict(self.class_map),
            "delimiter": self.delimiter,
            "av_column": self.av_column,
            "av_true_values": list(self.av_true_values),
        }

    def parse_class(self, raw: str) -> AgentClass:
        raw = str(raw).strip()
        return AgentClass.parse(self.class_map.get(raw, raw))


def load_schema(path: str | Path | None) -> SchemaConfig:
    if path is None:
        return SchemaConfig()
    with open(path, encoding="utf-8") as fh:
        return SchemaConfig.from_dict(yaml.safe_load(fh))


@dataclass
class IngestionReport:
    rows_total: int = 0
    rows_accepted: int = 0
    rejected: Counter = field(default_factory=Counter)
    tracks_accepted: int = 0
    tracks_rejected: int = 0

    @property
    def rows_rejected(self) -> int:
        return sum(self.rejected.values())

    def to_dict(self) -> dict:
        return {
            "rows_total": self.rows_total,
            "rows_accepted": self.rows_accepted,
            "rows_rejected": self.rows_rejected,
            "rejected_by_reason": dict(sorted(self.rejected.items())),
            "tracks_accepted": self.tracks_accepted,
            "tracks_rejected": self.tracks_rejected,
        }


@dataclass
class Dataset:
    tracks: dict[str, AgentTrack]
    geometry: IntersectionGeometry | None = None
    report: IngestionReport = field(default_factory=IngestionReport)

    def __len__(self):
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks.values())

    def of_kind(self, *kinds: AgentClass) -> list[AgentTrack]:
        return [t for t in self.tracks.values() if t.kind in kinds]

    def resampled(self, dt: float = DEFAULT_DT) -> "Dataset":
        out = {}
        for tid, tr in self.tracks.items():
            try:
                out[tid] = resample_track(tr, dt)
            except ResampleError:
                log.warning("track %s too short to resample at dt=%s; dropped", tid, dt)
        return Dataset(out, self.geometry, self.report)


def _irregular(t: np.ndarray) -> bool:
    if t.shape[0] < 3:
        return False
    d = np.diff(t)
    med = float(np.median(d))
    return bool(np.max(np.abs(d - med)) >= 0.5 * med)


def parse_floats(col: pd.Series) -> np.ndarray:
    """Exact decimal-to-double conversion; unparseable cells become NaN.

    pandas' own numeric parser is fast but not correctly rounded, which would
    break bit-exact round trips of written tracks.
    """
    out = pd.to_numeric(col, errors="coerce").to_numpy(dtype=float)
    ok = np.isfinite(out)
    if ok.any():
        out[ok] = np.asarray(col.to_numpy(dtype=str)[ok], dtype=float)
    return out


def ingest_dataset(
    source: str | Path,
    schema: SchemaConfig | Mapping | None = None,
    geometry: IntersectionGeometry | str | Path | None = None,
) -> Dataset:
    """Read a delimited trajectory file into one :class:`AgentTrack` per id.

    Rows that fail validation are dropped and counted by reason in the
    returned dataset's ``report``. Tracks whose sampling interval deviates
    from the median interval by 50% or more are rejected whole.
    """
    if not isinstance(schema, SchemaConfig):
        schema = SchemaConfig.from_dict(schema)
    if geometry is not None and not isinstance(geometry, IntersectionGeometry):
        geometry = load_geometry(geometry)

    cols = schema.columns
    try:
        frame = pd.read_csv(
            source, sep=schema.delimiter, dtype=str, keep_default_na=False, encoding="utf-8"
        )
    except pd.errors.EmptyDataError as exc:
        raise EmptyDatasetError(f"{source}: file is empty") from exc
    missing = [c for c in REQUIRED_COLUMNS if cols[c] not in frame.columns]
    if missing:
        raise SchemaError(
            f"{source}: missing required columns "
            + ", ".join(f"{c} (as {cols[c]!r})" for c in missing)
        )
    if schema.av_column and schema.av_column not in frame.columns:
        raise SchemaError(f"{source}: missing AV flag column {schema.av_column!r}")
    if frame.empty:
        raise EmptyDatasetError(f"{source}: no data rows")

    report = IngestionReport(rows_total=len(frame))
    ids = frame[cols["id"]].str.strip().to_numpy(dtype=object)
    ok = ids != ""
    report.rejected["missing_id"] += int((~ok).sum())

    num = {}
    finite = np.ones(len(frame), dtype=bool)
    for c in KINEMATIC_COLUMNS:
        vals = parse_floats(frame[cols[c]])
        num[c] = vals
        finite &= np.isfinite(vals)
    bad = ok & ~finite
    report.rejected["non_numeric"] += int(bad.sum())
    ok &= finite
    if (~finite).any():
        for row in np.flatnonzero(bad)[:20]:
            log.info("row %d rejected: non-numeric kinematic field", row + 2)

    raw_class = frame[cols["class"]].to_numpy(dtype=object)
    kinds = np.empty(len(frame), dtype=object)
    cache: dict[str, AgentClass | None] = {}
    for i in np.flatnonzero(ok):
        raw = raw_class[i]
        if raw not in cache:
            try:
                cache[raw] = schema.parse_class(raw)
            except ValueError:
                cache[raw] = None
        kinds[i] = cache[raw]
    if schema.av_column:
        flags = frame[schema.av_column].str.strip().str.lower().isin(schema.av_true_values).to_numpy()
        for i in np.flatnonzero(ok & flags):
            if kinds[i] is AgentClass.HDV:
                kinds[i] = AgentClass.AV
    unknown = ok & np.array([k is None for k in kinds])
    report.rejected["unknown_class"] += int(unknown.sum())
    ok &= ~unknown

    dims = {}
    for c in OPTIONAL_COLUMNS:
        if c in cols and cols[c] in frame.columns:
            dims[c] = parse_floats(frame[cols[c]])
    lanes = frame[cols["lane"]].str.strip().to_numpy(dtype=object)

    rows = np.flatnonzero(ok)
    # stable sort keeps file order among equal times so the first one survives
    order = rows[np.lexsort((num["time"][rows], ids[rows].astype(str)))]
    tracks: dict[str, AgentTrack] = {}
    sorted_ids = ids[order].astype(str)
    boundaries = np.flatnonzero(sorted_ids[1:] != sorted_ids[:-1]) + 1
    for grp in np.split(order, boundaries):
        if grp.size == 0:
            continue
        t = num["time"][grp]
        keep = np.ones(grp.size, dtype=bool)
        keep[1:] = np.diff(t) > 0
        report.rejected["non_monotonic_time"] += int((~keep).sum())
        grp = grp[keep]
        agent_id = str(ids[grp[0]])
        if _irregular(num["time"][grp]):
            report.rejected["irregular_sampling"] += int(grp.size)
            report.tracks_rejected += 1
            log.warning("track %s rejected: irregular sampling interval", agent_id)
            continue
        kind = Counter(kinds[grp]).most_common(1)[0][0]
        lane = np.array([ln if ln != "" else None for ln in lanes[grp]], dtype=object)
        if all(ln is None for ln in lane):
            lane = None
        size = {}
        for c, vals in dims.items():
            good = vals[grp][np.isfinite(vals[grp])]
            size[c] = float(np.median(good)) if good.size else None
        tracks[agent_id] = AgentTrack(
            agent_id, kind,
            *(num[c][grp] for c in KINEMATIC_COLUMNS),
            lane=lane, length=size.get("length"), width=size.get("width"),
        )
        report.rows_accepted += int(grp.size)
    report.tracks_accepted = len(tracks)
    if not tracks:
        raise EmptyDatasetError(f"{source}: no valid rows ({report.to_dict()['rejected_by_reason']})")
    return Dataset(dict(sorted(tracks.items())), geometry, report)


def tracks_to_frame(tracks: Iterable[AgentTrack], schema: SchemaConfig | None = None) -> pd.DataFrame:
    schema = schema or SchemaConfig()
    cols = schema.columns
    parts = []
    for tr in tracks:
        n = len(tr)
        lane = tr.lane if tr.lane is not None else np.full(n, None, dtype=object)
        part = {
            cols["id"]: np.full(n, tr.agent_id, dtype=object),
            cols["time"]: tr.t,
            cols["x"]: tr.x, cols["y"]: tr.y,
            cols["vx"]: tr.vx, cols["vy"]: tr.vy,
            cols["ax"]: tr.ax, cols["ay"]: tr.ay,
            cols["class"]: np.full(n, tr.kind.value, dtype=object),
            cols["lane"]: np.array(["" if v is None else v for v in lane], dtype=object),
            cols["length"]: np.full(n, tr.length),
            cols["width"]: np.full(n, tr.width),
        }
        parts.append(pd.DataFrame(part))
    if not parts:
        return pd.DataFrame(columns=[cols[c] for c in REQUIRED_COLUMNS])
    return pd.concat(parts, ignore_index=True)


def write_tracks(tracks: Iterable[AgentTrack], path: str | Path, schema: SchemaConfig | None = None) -> None:
    """Write tracks in the ingestion schema; floats are written round-trip exact."""
    schema = schema or SchemaConfig()
    tracks_to_frame(tracks, schema).to_csv(path, index=False, sep=schema.delimiter)


# --------------------------------------------------------------------------
# resampling


def frame_grid(t0: float, t1: float, dt: float) -> np.ndarray:
    """Integer frames ``k`` with ``t0 <= k * dt <= t1`` (tolerant to rounding)."""
    eps = 1e-9
    k0 = math.ceil(t0 / dt - eps)
    k1 = math.floor(t1 / dt + eps)
    return np.arange(k0, k1 + 1, dtype=np.int64)


def resample_track(track: AgentTrack, dt: float = DEFAULT_DT) -> AgentTrack:
    """Linearly interpolate a track onto the frame-aligned grid ``k * dt``.

    Grid points are restricted to the original time span, so nothing is
    extrapolated; endpoints that do not fall on the grid are dropped.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if len(track) < 2:
        raise ValueError(f"track {track.agent_id!r} needs at least 2 samples to resample")
    if dt > track.duration:
        raise ResampleError(
            f"dt={dt} exceeds the {track.duration:.3f} s duration of track {track.agent_id!r}"
        )
    frames = frame_grid(track.start_time, track.end_time, dt)
    t_new = frames * dt
    # grid points within rounding of an endpoint are clamped onto the span
    t_eval = np.clip(t_new, track.t[0], track.t[-1])
    arrays = {
        name: np.interp(t_eval, track.t, getattr(track, name))
        for name in ("x", "y", "vx", "vy", "ax", "ay")
    }
    lane = None
    if track.lane is not None:
        idx = np.clip(np.searchsorted(track.t, t_eval, side="right") - 1, 0, len(track) - 1)
        lane = track.lane[idx]
    if t_new.shape[0] < 2:
        raise ResampleError(f"track {track.agent_id!r} collapses to a single sample at dt={dt}")
    return track.with_arrays(t=t_new, lane=lane, **arrays)


def common_dt(tracks: Sequence[AgentTrack]) -> float:
    """Median inter-sample interval over all tracks (the data-driven rate)."""
    diffs = [np.diff(tr.t) for tr in tracks if len(tr) > 1]
    if not diffs:
        return DEFAULT_DT
    return float(np.median(np.concatenate(diffs)))
