"""Stage orchestration: run configuration, artifact manifests and dumps.

Every stage writes into ``<out>/<stage>/`` a set of flat delimited files
plus a ``manifest.json`` holding the stage's own settings, the sha256 of
each output and the sha256 of each upstream manifest it consumed. A stage
refuses to run on upstream artifacts whose hashes no longer match. Outputs
are staged in a scratch directory and moved into place only on success.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd
import yaml

from . import __version__, synth
from .consensus import (
    PAPER_TARGET, ConsensusPolicy, ConsensusThresholds, EvidenceIndex, build_contexts,
    classify_all, policy_search, summarize,
)
from .core import (
    AgentClass, AgentTrack, IntersectionGeometry, SchemaConfig, ingest_dataset, load_geometry,
    load_schema, parse_floats, write_tracks,
)
from .errors import (
    ConfigurationError, EmptySummaryError, MissingDependencyError, StaleArtifactError,
)
from .flow import GainResult, HeadwayEvent, SpacingPolicy, analyze_platoons, compute_headways
from .interactions import ZoneLayout, default_layout, detect_interactions, read_interactions, write_interactions
from .safety import ConflictMetrics, compute_conflicts, detect_co_occupancy, ttc_exposure
from .vru import HesitationEvent, HesitationParams, accel_vs_distance, build_decel_grid, detect_all_hesitations

log = logging.getLogger(__name__)

STAGES = ("ingest", "interactions", "safety", "flow", "vru", "consensus", "report")
DEPENDS = {
    "ingest": (),
    "interactions": ("ingest",),
    "safety": ("ingest", "interactions"),
    "flow": ("ingest",),
    "vru": ("ingest", "interactions"),
    "consensus": ("ingest", "interactions", "safety", "flow", "vru"),
    "report": ("ingest", "interactions", "safety", "flow", "vru", "consensus"),
}
MANIFEST = "manifest.json"
RUN_MANIFEST = "run_manifest.json"


# --------------------------------------------------------------------------
# configuration


@dataclass
class IngestSection:
    input: list = field(default_factory=list)
    schema: Any = None
    geometry: str | None = None
    dt: float = 0.1
    scenario: str | None = None
    random_pairs: int = 0


@dataclass
class InteractionSection:
    radius: float = 30.0
    min_duration: float = 0.5
    zone_layout: str | None = None


@dataclass
class SafetySection:
    pet_threshold: float = 5.0
    pet_critical: float = 5.0
    exposure_threshold: float = 3.0
    ttc_report_cutoff: float = 10.0
    vru_speed_min: float = 0.5


@dataclass
class FlowSection:
    enabled: bool = True
    headway_cutoff: float = 5.0
    d0: float = 4.0
    h: float = 2.0
    epsilon: float = 5.0
    min_entry_speed: float = 2.0
    violation_frames: int = 10
    half_window: float = 5.0
    leader_classes: list = field(default_factory=lambda: ["AV", "HDV"])


@dataclass
class VruSection:
    walk_threshold: float = 0.5
    min_walk_frames: int = 5
    slow_drop_fraction: float = 0.6
    min_slow_frames: int = 5
    recovery_fraction: float = 0.9
    vehicle_radius: float = 15.0
    turn_window: float = 3.0
    turn_threshold: float = 20.0
    turn_directions: list = field(default_factory=lambda: ["turning-left"])
    grid_cell: float = 2.0
    grid_region: list | None = None
    grid_reducer: str = "mean"
    decel_clip: float = 3.0


@dataclass
class ConsensusSection:
    ttc_min: float = 3.0
    pet_min: float = 5.0
    exit_headway_max: float = 4.0
    gain_max: float = 1.0
    hesitation_window: float = 3.0
    speed_cv_max: float = 0.25
    pet_missing: str = "vacuous"
    performance_missing: str = "strict"
    ttc_mode: str = "per-frame"
    policy_search: bool = False


@dataclass
class ReportSection:
    zone_ttc_other_classes: list = field(default_factory=lambda: ["Pedestrian", "Cyclist", "Scooter"])


SECTIONS = {
    "ingest": IngestSection,
    "interactions": InteractionSection,
    "safety": SafetySection,
    "flow": FlowSection,
    "vru": VruSection,
    "consensus": ConsensusSection,
    "report": ReportSection,
}

# interpretive choices that shape results; echoed in every run manifest
ASSUMPTIONS = (
    "HDV-led platoons are selected with exactly the AV-led procedure",
    "zone-based TTC dumps keep only the other classes in report.zone_ttc_other_classes",
    "all tracks are analyzed, including partial AV trajectories",
    "performance evidence (exit headway, first-follower gain) is broadcast to every frame of an encounter",
)


@dataclass
class RunConfig:
    ingest: IngestSection = field(default_factory=IngestSection)
    interactions: InteractionSection = field(default_factory=InteractionSection)
    safety: SafetySection = field(default_factory=SafetySection)
    flow: FlowSection = field(default_factory=FlowSection)
    vru: VruSection = field(default_factory=VruSection)
    consensus: ConsensusSection = field(default_factory=ConsensusSection)
    report: ReportSection = field(default_factory=ReportSection)
    out: str = "out"
    threads: int = 0
    seed: int = 0

    @property
    def effective_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)

    def section(self, stage: str) -> dict:
        return dataclasses.asdict(getattr(self, stage)) if stage in SECTIONS else {}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["threads"] = self.effective_threads
        return d

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "RunConfig":
        doc = dict(doc or {})
        # a run manifest can be fed back in as a config
        if "run_config" in doc:
            doc = dict(doc["run_config"])
        cfg = cls()
        for key, value in doc.items():
            if key in SECTIONS:
                if value is None:
                    continue
                if not isinstance(value, Mapping):
                    raise ConfigurationError(f"config section {key!r} must be a mapping")
                for k, v in value.items():
                    _set(getattr(cfg, key), f"{key}.{k}", k, v)
            elif key in ("out", "threads", "seed"):
                _set(cfg, key, key, value)
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        return cfg

    def override(self, dotted: str, raw: str) -> None:
        """Apply ``name=value`` style overrides; a bare name is looked up in
        every section and must be unambiguous."""
        value = yaml.safe_load(raw) if raw != "" else None
        if "." in dotted:
            sec, key = dotted.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigurationError(f"unknown config section {sec!r}")
            _set(getattr(self, sec), dotted, key, value)
            return
        if dotted in ("out", "threads", "seed"):
            _set(self, dotted, dotted, value)
            return
        hits = [s for s, c in SECTIONS.items() if dotted in {f.name for f in dataclasses.fields(c)}]
        if len(hits) != 1:
            raise ConfigurationError(
                f"override {dotted!r} is {'ambiguous' if hits else 'unknown'}; use section.name"
            )
        _set(getattr(self, hits[0]), f"{hits[0]}.{dotted}", dotted, value)


def _set(obj, label: str, key: str, value) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if key not in fields:
        raise ConfigurationError(f"unknown config key {label!r}")
    default = getattr(type(obj)(), key) if dataclasses.is_dataclass(obj) else None
    try:
        if value is None or default is None:
            pass
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError(f"expected true/false, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError(f"expected an integer, got {value!r}")
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
        elif isinstance(default, list):
            value = [value] if isinstance(value, (str, int, float)) else list(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {label}: {exc}") from exc
    setattr(obj, key, value)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(doc)


def _scenarios(cfg: IngestSection) -> list[synth.ScenarioSpec]:
    if cfg.scenario is None:
        return []
    if cfg.scenario == "suite":
        return [synth.load_scenario(name) for name in synth.library()]
    return [synth.load_scenario(cfg.scenario)]


def validate(config: RunConfig, stages=STAGES) -> None:
    """Fail fast on anything that would break a stage after compute began."""
    ing = config.ingest
    if "ingest" in stages:
        if not ing.input and ing.scenario is None and ing.random_pairs <= 0:
            raise ConfigurationError("no input: give --input, ingest.scenario or ingest.random_pairs")
        if ing.input and (ing.scenario is not None or ing.random_pairs > 0):
            raise ConfigurationError("ingest.input and synthetic sources are mutually exclusive")
        for p in ing.input:
            if not Path(p).is_file():
                raise ConfigurationError(f"input file not found: {p}")
        if isinstance(ing.schema, str) and not Path(ing.schema).is_file():
            raise ConfigurationError(f"schema file not found: {ing.schema}")
        if ing.geometry is not None and not Path(ing.geometry).is_file():
            raise ConfigurationError(f"geometry file not found: {ing.geometry}")
        if ing.random_pairs < 0:
            raise ConfigurationError("ingest.random_pairs must be >= 0")
    if not ing.dt > 0:
        raise ConfigurationError("ingest.dt must be positive")
    if config.threads < 0:
        raise ConfigurationError("threads must be >= 0 (0 = all cores)")
    it = config.interactions
    if not it.radius > 0 or it.min_duration < 0:
        raise ConfigurationError("interactions.radius must be positive and min_duration non-negative")
    if it.zone_layout is not None:
        if not Path(it.zone_layout).is_file():
            raise ConfigurationError(f"zone layout file not found: {it.zone_layout}")
        ZoneLayout.load(it.zone_layout)
    for k, v in config.section("safety").items():
        if not v > 0:
            raise ConfigurationError(f"safety.{k} must be positive")
    try:
        flow_policy(config)
        hesitation_params(config)
        consensus_settings(config)
        [AgentClass.parse(c) for c in config.flow.leader_classes]
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    v = config.vru
    if not v.grid_cell > 0 or not v.decel_clip > 0:
        raise ConfigurationError("vru.grid_cell and vru.decel_clip must be positive")
    if v.grid_reducer not in ("mean", "max"):
        raise ConfigurationError("vru.grid_reducer must be mean or max")
    try:
        [AgentClass.parse(c) for c in config.report.zone_ttc_other_classes]
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    if v.grid_region is not None and len(v.grid_region) != 4:
        raise ConfigurationError("vru.grid_region must be [xmin, ymin, xmax, ymax]")
    if config.flow.enabled and "flow" in stages and "ingest" in stages:
        has_geo = ing.geometry is not None or any(s.geometry for s in _scenarios(ing))
        if not has_geo:
            raise ConfigurationError(
                "headway/platoon analysis requested (flow.enabled) but no geometry was given; "
                "supply ingest.geometry or set flow.enabled=false"
            )


def flow_policy(config: RunConfig) -> SpacingPolicy:
    f = config.flow
    if not f.headway_cutoff > 0 or not f.half_window > 0 or f.violation_frames < 1:
        raise ValueError("flow.headway_cutoff, half_window must be positive and violation_frames >= 1")
    return SpacingPolicy(f.d0, f.h, f.epsilon)


def hesitation_params(config: RunConfig) -> HesitationParams:
    v = config.vru
    return HesitationParams(v.walk_threshold, v.min_walk_frames, v.slow_drop_fraction,
                            v.min_slow_frames, v.recovery_fraction, v.vehicle_radius,
                            v.turn_window, v.turn_threshold, tuple(v.turn_directions))


def consensus_settings(config: RunConfig) -> tuple[ConsensusThresholds, ConsensusPolicy]:
    c = config.consensus
    return (ConsensusThresholds(c.ttc_min, c.pet_min, c.exit_headway_max, c.gain_max,
                                c.hesitation_window, c.speed_cv_max),
            ConsensusPolicy(c.pet_missing, c.performance_missing, c.ttc_mode))


# --------------------------------------------------------------------------
# artifacts


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def _read_csv(path: Path, **kw) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, float_precision="round_trip", **kw)


def _num(v):
    """Float cell from a dump; empty strings mean absent."""
    return None if v == "" or v is None else float(v)


class StageContext:
    """Scratch directory, notes and upstream bookkeeping for one stage run."""

    def __init__(self, out: Path, stage: str, config: RunConfig):
        self.out = out
        self.stage = stage
        self.config = config
        self.notes: list[str] = []
        self.upstream: dict[str, str] = {}
        self.extra: dict[str, Any] = {}
        self.dir = out / f".{stage}.partial"

    def path(self, name: str) -> Path:
        return self.dir / name

    def note(self, msg: str) -> None:
        log.info("%s: %s", self.stage, msg)
        self.notes.append(msg)


def check_upstream(out: Path, stage: str, config: RunConfig) -> tuple[dict[str, str], list[str]]:
    """Hashes of upstream manifests plus notes on settings drift.

    Raises MissingDependencyError when an upstream stage never completed and
    StaleArtifactError when an upstream output or its own inputs changed
    since its manifest was written.
    """
    hashes, notes = {}, []
    for dep in DEPENDS[stage]:
        mpath = out / dep / MANIFEST
        if not mpath.is_file():
            raise MissingDependencyError(
                f"stage {stage!r} needs the {dep!r} outputs in {out / dep}; run the {dep} stage first"
            )
        man = json.loads(mpath.read_text(encoding="utf-8"))
        if not man.get("complete"):
            raise MissingDependencyError(f"upstream stage {dep!r} did not complete")
        for fname, digest in sorted(man["outputs"].items()):
            fpath = out / dep / fname
            if not fpath.is_file():
                raise MissingDependencyError(f"upstream artifact {fpath} is missing")
            if sha256_file(fpath) != digest:
                raise StaleArtifactError(
                    f"{fpath} no longer matches the hash recorded in its manifest; rerun {dep!r}"
                )
        for ddep, digest in sorted(man.get("upstream", {}).items()):
            dpath = out / ddep / MANIFEST
            if not dpath.is_file() or sha256_file(dpath) != digest:
                raise StaleArtifactError(
                    f"{dep!r} outputs were built from an older {ddep!r} run; rerun {dep!r}"
                )
        current = _jsonable(config.section(dep))
        if dep in SECTIONS and man.get("config") != current:
            changed = sorted(k for k in current if man.get("config", {}).get(k) != current[k])
            notes.append(
                f"upstream {dep!r} was produced with different settings ({', '.join(changed)}); "
                "its outputs are used as-is"
            )
        hashes[dep] = sha256_file(mpath)
    return hashes, notes


def _jsonable(obj):
    return json.loads(json.dumps(obj, sort_keys=True))


def run_stage(stage: str, config: RunConfig) -> Path:
    """Run one stage into ``<out>/<stage>``; returns that directory."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = StageContext(out, stage, config)
    ctx.upstream, drift = check_upstream(out, stage, config)
    ctx.notes.extend(drift)
    if ctx.dir.exists():
        shutil.rmtree(ctx.dir)
    ctx.dir.mkdir()
    try:
        STAGE_FUNCS[stage](ctx)
        outputs = {p.name: sha256_file(p) for p in sorted(ctx.dir.iterdir()) if p.is_file()}
        manifest = {
            "stage": stage,
            "complete": True,
            "config": _jsonable(config.section(stage)),
            "upstream": ctx.upstream,
            "outputs": outputs,
            "notes": ctx.notes,
            **ctx.extra,
        }
        _dump_json(manifest, ctx.path(MANIFEST))
    except BaseException:
        shutil.rmtree(ctx.dir, ignore_errors=True)
        raise
    final = out / stage
    if final.exists():
        shutil.rmtree(final)
    ctx.dir.rename(final)
    return final


def write_run_manifest(config: RunConfig, extra: Mapping | None = None) -> Path:
    """Echo every effective setting plus the manifest hash of each stage on disk."""
    out = Path(config.out)
    stages = {}
    for s in STAGES:
        m = out / s / MANIFEST
        if m.is_file():
            stages[s] = sha256_file(m)
    import scipy

    doc = {
        "run_config": config.to_dict(),
        "stages": stages,
        "seed": config.seed,
        "assumptions": list(ASSUMPTIONS),
        "versions": {"trajconsensus": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "pandas": pd.__version__},
    }
    search = out / "consensus" / "consensus_summary.json"
    if search.is_file():
        summary = json.loads(search.read_text(encoding="utf-8"))
        if summary.get("policy_search"):
            doc["winning_policy"] = summary["policy_search"]["best"]
    doc.update(extra or {})
    path = out / RUN_MANIFEST
    _dump_json(doc, path)
    return path


def run_pipeline(config: RunConfig, stages=STAGES) -> Path:
    validate(config, stages)
    for stage in stages:
        run_stage(stage, config)
    write_run_manifest(config)
    return Path(config.out)


# --------------------------------------------------------------------------
# loading upstream dumps


def load_tracks(out: Path) -> dict[str, AgentTrack]:
    return ingest_dataset(out / "ingest" / "tracks.csv", SchemaConfig()).tracks


def load_geometry_artifact(out: Path) -> IntersectionGeometry | None:
    p = out / "ingest" / "geometry.yaml"
    return load_geometry(p) if p.is_file() else None


def load_conflicts(out: Path) -> dict[str, ConflictMetrics]:
    enc = _read_csv(out / "safety" / "encounters.csv", dtype={"record_id": str, "subject": str, "other": str})
    frames = _read_csv(out / "safety" / "ttc_frames.csv", dtype={"record_id": str})
    groups = {rid: g for rid, g in frames.groupby("record_id", sort=False)}
    out_map = {}
    for row in enc.itertuples(index=False):
        g = groups[row.record_id]
        out_map[row.record_id] = ConflictMetrics(
            row.subject, row.other, row.record_id,
            g["time"].to_numpy(float), g["distance"].to_numpy(float),
            g["closing_speed"].to_numpy(float), g["ttc"].to_numpy(float),
            _num(row.pet), float(row.min_separation),
            (float(row.t_subject_closest), float(row.t_other_closest)),
        )
    return out_map


def load_headways(out: Path) -> list[HeadwayEvent]:
    df = _read_csv(out / "flow" / "headways.csv", dtype={"leader": str, "follower": str, "lane": str})
    return [
        HeadwayEvent(r.leader, r.follower, r.lane, r.boundary, float(r.headway),
                     (float(r.t_leader), float(r.t_follower)),
                     AgentClass.parse(r.leader_class), AgentClass.parse(r.follower_class))
        for r in df.itertuples(index=False)
    ]


def load_gains(out: Path) -> list[GainResult]:
    df = _read_csv(out / "flow" / "gains.csv",
                   dtype={"platoon_leader": str, "leader": str, "follower": str})
    return [
        GainResult(r.platoon_leader, r.leader, r.follower, int(r.follower_position), _num(r.gain),
                   (float(r.window_start), float(r.window_end)),
                   (float(r.follower_window_start), float(r.follower_window_end)),
                   float(r.leader_norm), float(r.follower_norm), AgentClass.parse(r.leader_class))
        for r in df.itertuples(index=False)
    ]


def load_hesitations(out: Path) -> list[HesitationEvent]:
    df = _read_csv(out / "vru" / "hesitation.csv", dtype={"vru": str, "vehicle": str})
    return [
        HesitationEvent(r.vru, r.vehicle, (float(r.t_walk_start), float(r.t_slow_start), float(r.t_recover)),
                        float(r.min_speed_slow), float(r.vehicle_distance), float(r.reference_speed),
                        int(r.slow_frames), AgentClass.parse(r.vehicle_class))
        for r in df.itertuples(index=False)
    ]


# --------------------------------------------------------------------------
# stages


def _stage_ingest(ctx: StageContext) -> None:
    cfg = ctx.config.ingest
    schema = cfg.schema if isinstance(cfg.schema, Mapping) else load_schema(cfg.schema)
    geometry = load_geometry(cfg.geometry) if cfg.geometry else None
    sources = [Path(p) for p in cfg.input]
    specs = _scenarios(cfg)
    if specs or cfg.random_pairs > 0:
        tracks: list[AgentTrack] = []
        if specs:
            tracks, geo = synth.combine(specs)
            if geometry is None and (geo.crosswalk_zones or geo.entry_lines or geo.exit_lines):
                geometry = geo
        rng = np.random.default_rng(ctx.config.seed)
        tracks.extend(synth.random_pairs(rng, cfg.random_pairs, first_slot=len(specs), dt=cfg.dt))
        src = ctx.path("synthetic_source.csv")
        write_tracks(tracks, src)
        sources = [src]
        ctx.extra["synthetic"] = {"scenarios": [s.name for s in specs],
                                  "random_pairs": cfg.random_pairs, "seed": ctx.config.seed}
        schema = SchemaConfig()
    merged: dict[str, AgentTrack] = {}
    report = Counter()
    per_file = {}
    for src in sources:
        ds = ingest_dataset(src, schema)
        dup = sorted(set(ds.tracks) & set(merged))
        if dup:
            raise ConfigurationError(f"agent ids repeat across input files: {dup[:5]}")
        rep = ds.report.to_dict()
        per_file[src.name] = rep
        for k in ("rows_total", "rows_accepted", "rows_rejected", "tracks_accepted", "tracks_rejected"):
            report[k] += rep[k]
        for k, v in rep["rejected_by_reason"].items():
            report[f"rejected.{k}"] += v
        merged.update(ds.resampled(cfg.dt).tracks)
    if not sources:
        raise ConfigurationError("no input sources")
    n_dropped = report["tracks_accepted"] - len(merged)
    if n_dropped:
        ctx.note(f"{n_dropped} tracks too short to resample at dt={cfg.dt} were dropped")
    merged = dict(sorted(merged.items()))
    write_tracks(merged.values(), ctx.path("tracks.csv"))
    if geometry is not None:
        ctx.path("geometry.yaml").write_text(yaml.safe_dump(geometry.to_dict(), sort_keys=True), encoding="utf-8")
    classes = Counter(tr.kind.value for tr in merged.values())
    _dump_json({
        "rows_total": report["rows_total"],
        "rows_accepted": report["rows_accepted"],
        "rows_rejected": report["rows_rejected"],
        "rejected_by_reason": {k.split(".", 1)[1]: v for k, v in sorted(report.items()) if k.startswith("rejected.")},
        "tracks_accepted": report["tracks_accepted"],
        "tracks_rejected": report["tracks_rejected"],
        "tracks_dropped_by_resampling": n_dropped,
        "tracks_by_class": dict(sorted(classes.items())),
        "dt": cfg.dt,
        "per_file": per_file,
        "input_sha256": {Path(p).name: sha256_file(p) for p in cfg.input},
    }, ctx.path("ingestion_report.json"))


def _stage_interactions(ctx: StageContext) -> None:
    cfg = ctx.config.interactions
    tracks = load_tracks(ctx.out)
    layout = ZoneLayout.load(cfg.zone_layout) if cfg.zone_layout else default_layout()
    records = detect_interactions(tracks.values(), cfg.radius, cfg.min_duration, layout,
                                  dt=ctx.config.ingest.dt, threads=ctx.config.effective_threads)
    write_interactions(records, ctx.path("interactions.csv"))
    zone_counts = Counter()
    pair_counts = Counter()
    for r in records:
        pair_counts[(r.subject_kind.value, r.other_kind.value)] += 1
        for z in r.zones.tolist():
            zone_counts[(r.subject_kind.value, r.other_kind.value, z or "")] += 1
    _write_csv(pd.DataFrame(
        [(s, o, z, n) for (s, o, z), n in sorted(zone_counts.items())],
        columns=["subject_class", "other_class", "zone", "frames"]), ctx.path("zone_counts.csv"))
    _dump_json({
        "records": len(records),
        "pairs": len({tuple(sorted((r.subject_id, r.other_id))) for r in records}),
        "frames": int(sum(len(r) for r in records)),
        "records_by_class_pair": {f"{s}->{o}": n for (s, o), n in sorted(pair_counts.items())},
        "zone_layout": layout.to_dict(),
    }, ctx.path("interactions_summary.json"))


def _stage_safety(ctx: StageContext) -> None:
    cfg = ctx.config.safety
    dt = ctx.config.ingest.dt
    tracks = load_tracks(ctx.out)
    records = read_interactions(ctx.out / "interactions" / "interactions.csv")
    conflicts = compute_conflicts(records, tracks, cfg.pet_threshold, ctx.config.effective_threads)
    enc_rows, frame_parts = [], []
    for rec, cm in zip(records, conflicts):
        enc_rows.append({
            "record_id": rec.record_id, "subject": rec.subject_id, "other": rec.other_id,
            "subject_class": rec.subject_kind.value, "other_class": rec.other_kind.value,
            "start": rec.start_time, "end": rec.end_time, "frames": len(rec),
            "min_ttc": cm.min_ttc, "pet": cm.pet,
            "exposure": ttc_exposure(cm, cfg.exposure_threshold, dt),
            "min_separation": cm.min_separation,
            "t_subject_closest": cm.min_separation_times[0],
            "t_other_closest": cm.min_separation_times[1],
        })
        frame_parts.append(pd.DataFrame({
            "record_id": rec.record_id, "subject": rec.subject_id, "other": rec.other_id,
            "time": cm.times, "distance": cm.distances, "closing_speed": cm.closing_speeds, "ttc": cm.ttc,
        }))
    enc_cols = ["record_id", "subject", "other", "subject_class", "other_class", "start", "end", "frames",
                "min_ttc", "pet", "exposure", "min_separation", "t_subject_closest", "t_other_closest"]
    enc = pd.DataFrame(enc_rows, columns=enc_cols)
    _write_csv(enc, ctx.path("encounters.csv"))
    frames = pd.concat(frame_parts, ignore_index=True) if frame_parts else pd.DataFrame(
        columns=["record_id", "subject", "other", "time", "distance", "closing_speed", "ttc"])
    _write_csv(frames, ctx.path("ttc_frames.csv"))

    geometry = load_geometry_artifact(ctx.out)
    co_cols = ["vehicle", "vru", "zone", "start", "end", "duration", "vru_speed_at_entry", "vrus_present"]
    co_rows = []
    if geometry is not None and geometry.crosswalk_zones:
        for ev in detect_co_occupancy(tracks.values(), geometry, cfg.vru_speed_min, dt):
            co_rows.append((ev.vehicle_id, ev.vru_id, ev.zone, ev.overlap_interval[0], ev.overlap_interval[1],
                            ev.duration, ev.vru_speed_at_entry, ";".join(ev.vru_ids)))
    else:
        ctx.note("no crosswalk zones in the geometry; co-occupancy skipped")
    _write_csv(pd.DataFrame(co_rows, columns=co_cols), ctx.path("co_occupancy.csv"))

    # PET-critical encounters per vehicle under both denominators
    by_class = defaultdict(set)
    for tr in tracks.values():
        by_class[tr.kind].add(tr.agent_id)
    pet_rows = []
    for kind in AgentClass:
        if not kind.is_vehicle or not by_class[kind]:
            continue
        recs = [r for r in enc_rows if r["subject_class"] == kind.value]
        crit = [r for r in recs if r["pet"] is not None and r["pet"] < cfg.pet_critical]
        with_enc = len({r["subject"] for r in recs})
        n_all = len(by_class[kind])
        pet_rows.append((kind.value, n_all, with_enc, len(crit),
                         len(crit) / n_all, len(crit) / with_enc if with_enc else float("nan")))
    _write_csv(pd.DataFrame(pet_rows, columns=[
        "vehicle_class", "vehicles_all", "vehicles_with_encounter", "pet_critical_encounters",
        "per_vehicle_all", "per_vehicle_with_encounter"]), ctx.path("pet_per_vehicle.csv"))

    finite = enc[np.isfinite(enc["min_ttc"].astype(float))] if len(enc) else enc
    _dump_json({
        "thresholds": ctx.config.section("safety"),
        "encounters": len(enc_rows),
        "pairs": len({tuple(sorted((r["subject"], r["other"]))) for r in enc_rows}),
        "encounters_with_pet": int(sum(r["pet"] is not None for r in enc_rows)),
        "min_ttc": float(finite["min_ttc"].min()) if len(finite) else None,
        "co_occupancy_events": len(co_rows),
    }, ctx.path("safety_summary.json"))


def _stage_flow(ctx: StageContext) -> None:
    cfg = ctx.config.flow
    hw_cols = ["boundary", "lane", "leader", "follower", "leader_class", "follower_class",
               "headway", "t_leader", "t_follower"]
    pl_cols = ["leader", "leader_class", "lane", "formation_time", "length", "members", "gaps", "speeds"]
    g_cols = ["platoon_leader", "leader", "follower", "follower_position", "leader_class", "gain",
              "window_start", "window_end", "follower_window_start", "follower_window_end",
              "leader_norm", "follower_norm", "stable"]
    hw_rows, pl_rows, g_rows = [], [], []
    summary: dict[str, Any] = {"enabled": cfg.enabled}
    if not cfg.enabled:
        ctx.note("flow analysis disabled; empty dumps written")
    else:
        tracks = load_tracks(ctx.out)
        geometry = load_geometry_artifact(ctx.out)
        if geometry is None:
            raise ConfigurationError("flow analysis needs intersection geometry (entry/exit lines)")
        for boundary in ("entry", "exit"):
            for ev in compute_headways(tracks.values(), geometry, boundary, cfg.headway_cutoff):
                hw_rows.append((boundary, ev.lane, ev.leader_id, ev.follower_id, ev.leader_kind.value,
                                ev.follower_kind.value, ev.headway, *ev.crossing_times))
        pa = analyze_platoons(list(tracks.values()), geometry, flow_policy(ctx.config), cfg.min_entry_speed,
                              cfg.violation_frames, cfg.half_window, ctx.config.ingest.dt,
                              tuple(AgentClass.parse(c) for c in cfg.leader_classes))
        for ch in pa.chains:
            pl_rows.append((ch.leader_id, ch.leader_class.value, ch.lane or "", ch.formation_time, len(ch),
                            ";".join(ch.members), ";".join(repr(g) for g in ch.gaps),
                            ";".join(repr(s) for s in ch.speeds)))
        for g in pa.gains:
            g_rows.append((g.platoon_leader_id, g.leader_id, g.follower_id, g.follower_position,
                           g.leader_class.value if g.leader_class else "", g.gain, *g.window,
                           *g.follower_window, g.leader_norm, g.follower_norm, g.stable))
        for n in pa.notes:
            ctx.note(n)
        summary.update({
            "headway_events": len(hw_rows),
            "platoons": len(pl_rows),
            "platoons_with_followers": sum(1 for r in pl_rows if r[4] > 1),
            "gains_defined": sum(1 for r in g_rows if r[5] is not None),
            "policy": {"d0": cfg.d0, "h": cfg.h, "epsilon": cfg.epsilon},
        })
    _write_csv(pd.DataFrame(hw_rows, columns=hw_cols), ctx.path("headways.csv"))
    _write_csv(pd.DataFrame(pl_rows, columns=pl_cols), ctx.path("platoons.csv"))
    _write_csv(pd.DataFrame(g_rows, columns=g_cols), ctx.path("gains.csv"))
    _dump_json(summary, ctx.path("flow_summary.json"))


def _stage_vru(ctx: StageContext) -> None:
    cfg = ctx.config.vru
    dt = ctx.config.ingest.dt
    tracks = load_tracks(ctx.out)
    records = read_interactions(ctx.out / "interactions" / "interactions.csv")
    events = detect_all_hesitations(list(tracks.values()), hesitation_params(ctx.config), dt)
    h_rows, prof = [], []
    for ev in events:
        h_rows.append((ev.vru_id, ev.vehicle_id, ev.vehicle_kind.value, *ev.phases, ev.min_speed_during_slow,
                       ev.vehicle_distance_at_slow, ev.reference_speed, ev.slow_frames))
        t, s = ev.vehicle_speed_profile
        prof.append(pd.DataFrame({"vru": ev.vru_id, "vehicle": ev.vehicle_id, "time": t, "speed": s}))
    _write_csv(pd.DataFrame(h_rows, columns=[
        "vru", "vehicle", "vehicle_class", "t_walk_start", "t_slow_start", "t_recover", "min_speed_slow",
        "vehicle_distance", "reference_speed", "slow_frames"]), ctx.path("hesitation.csv"))
    _write_csv(pd.concat(prof, ignore_index=True) if prof else
               pd.DataFrame(columns=["vru", "vehicle", "time", "speed"]),
               ctx.path("hesitation_vehicle_speeds.csv"))

    if cfg.grid_region is not None:
        region = tuple(float(v) for v in cfg.grid_region)
    else:
        xs = np.concatenate([tr.x for tr in tracks.values()])
        ys = np.concatenate([tr.y for tr in tracks.values()])
        c = cfg.grid_cell
        region = (math.floor(xs.min() / c) * c, math.floor(ys.min() / c) * c,
                  math.ceil(xs.max() / c) * c + c, math.ceil(ys.max() / c) * c + c)
    for kind in (AgentClass.AV, AgentClass.HDV):
        grid = build_decel_grid(tracks.values(), region, cfg.grid_cell, kind, cfg.decel_clip)
        grid.write(ctx.path(f"decel_grid_{kind.value}.csv"), cfg.grid_reducer, label=f"class={kind.value}")

    samples = accel_vs_distance(records, tracks)
    _write_csv(pd.DataFrame(
        [(s.subject_id, s.other_id, s.subject_class.value, s.time, s.distance, s.accel) for s in samples],
        columns=["subject", "other", "subject_class", "time", "distance", "accel"]),
        ctx.path("accel_distance.csv"))
    _dump_json({
        "hesitations": len(events),
        "hesitations_by_vehicle_class": dict(sorted(Counter(e.vehicle_kind.value for e in events).items())),
        "grid_region": list(region),
        "grid_cell": cfg.grid_cell,
        "accel_distance_samples": len(samples),
    }, ctx.path("vru_summary.json"))


def _stage_consensus(ctx: StageContext) -> None:
    thresholds, policy = consensus_settings(ctx.config)
    tracks = load_tracks(ctx.out)
    records = read_interactions(ctx.out / "interactions" / "interactions.csv")
    conflicts = load_conflicts(ctx.out)
    evidence = EvidenceIndex.build(load_headways(ctx.out), load_gains(ctx.out), load_hesitations(ctx.out))
    contexts = build_contexts(records, conflicts, tracks, evidence, thresholds)
    frames = classify_all(contexts, thresholds, policy)
    rows = []
    for c, f in zip(contexts, frames):
        rows.append((c.subject_id, c.other_id, c.time, c.ttc, c.pet, c.hesitating, c.speed_cv,
                     c.exit_headway, c.gain,
                     None if f is None else f.safety_ok, None if f is None else f.interaction_ok,
                     None if f is None else f.performance_ok, None if f is None else f.satisfied_count,
                     f is None))
    _write_csv(pd.DataFrame(rows, columns=[
        "subject", "other", "time", "ttc", "pet", "hesitating", "speed_cv", "exit_headway", "gain",
        "safety_ok", "interaction_ok", "performance_ok", "satisfied_count", "excluded"]),
        ctx.path("consensus_frames.csv"))
    doc: dict[str, Any] = {
        "thresholds": dataclasses.asdict(thresholds),
        "policy": dataclasses.asdict(policy),
    }
    try:
        doc["summary"] = summarize(frames).to_dict()
    except EmptySummaryError:
        ctx.note("no AV-VRU interaction frames; consensus summary is empty")
        doc["summary"] = None
    if ctx.config.consensus.policy_search and contexts:
        trials = policy_search(contexts, thresholds)
        _write_csv(pd.DataFrame([
            (t.policy.pet_missing, t.policy.performance_missing, t.policy.ttc_mode,
             t.summary.pct_all_three, t.summary.pct_exactly_two, t.summary.pct_at_most_one,
             t.summary.total_frames, t.summary.excluded_frames, t.max_deviation)
            for t in trials], columns=["pet_missing", "performance_missing", "ttc_mode", "pct_all_three",
                                       "pct_exactly_two", "pct_at_most_one", "frames", "excluded",
                                       "max_deviation"]), ctx.path("policy_search.csv"))
        best = trials[0]
        doc["policy_search"] = {
            "target": list(PAPER_TARGET),
            "best": {**dataclasses.asdict(best.policy), "max_deviation": best.max_deviation},
            "within_2pp": best.max_deviation <= 2.0,
        }
    _dump_json(doc, ctx.path("consensus_summary.json"))


def _ecdf_frame(values: np.ndarray, **labels) -> pd.DataFrame:
    v = np.sort(np.asarray(values, dtype=float))
    return pd.DataFrame({**labels, "value": v, "ecdf": np.arange(1, v.size + 1) / max(v.size, 1)})


def _stage_report(ctx: StageContext) -> None:
    """Plot-ready value dumps (ECDFs, zone shares) and a headline summary."""
    cutoff = ctx.config.safety.ttc_report_cutoff
    enc = _read_csv(ctx.out / "safety" / "encounters.csv", dtype={"subject": str, "other": str})
    ttc_parts, pet_parts = [], []
    for (sc, oc), g in enc.groupby(["subject_class", "other_class"], sort=True):
        ttc = g["min_ttc"].astype(float).to_numpy()
        ttc = ttc[np.isfinite(ttc) & (ttc <= cutoff)]
        if ttc.size:
            ttc_parts.append(_ecdf_frame(ttc, subject_class=sc, other_class=oc))
        pet = parse_floats(g["pet"].astype(str))
        pet = pet[np.isfinite(pet)]
        if pet.size:
            pet_parts.append(_ecdf_frame(pet, subject_class=sc, other_class=oc))
    empty = pd.DataFrame(columns=["subject_class", "other_class", "value", "ecdf"])
    _write_csv(pd.concat(ttc_parts, ignore_index=True) if ttc_parts else empty, ctx.path("ttc_ecdf.csv"))
    _write_csv(pd.concat(pet_parts, ignore_index=True) if pet_parts else empty, ctx.path("pet_ecdf.csv"))

    hw = _read_csv(ctx.out / "flow" / "headways.csv")
    parts = [_ecdf_frame(g["headway"].to_numpy(float), boundary=b, leader_class=lc, follower_class=fc)
             for (b, lc, fc), g in hw.groupby(["boundary", "leader_class", "follower_class"], sort=True)]
    _write_csv(pd.concat(parts, ignore_index=True) if parts else
               pd.DataFrame(columns=["boundary", "leader_class", "follower_class", "value", "ecdf"]),
               ctx.path("headway_ecdf.csv"))
    gains = _read_csv(ctx.out / "flow" / "gains.csv")
    gvals = parse_floats(gains["gain"].astype(str)) if len(gains) else np.zeros(0)
    defined = np.isfinite(gvals)
    _write_csv(pd.DataFrame({"leader_class": gains["leader_class"].to_numpy()[defined] if len(gains) else [],
                             "gain": gvals[defined]}), ctx.path("gain_values.csv"))

    zones = _read_csv(ctx.out / "interactions" / "zone_counts.csv")
    if len(zones):
        tot = zones.groupby(["subject_class", "other_class"])["frames"].transform("sum")
        zones = zones.assign(share=zones["frames"] / tot)
    _write_csv(zones, ctx.path("zone_shares.csv"))

    # per-frame TTC by detection zone, restricted to the configured other classes
    keep = {AgentClass.parse(c).value for c in ctx.config.report.zone_ttc_other_classes}
    inter = _read_csv(ctx.out / "interactions" / "interactions.csv", dtype={"record_id": str, "zone": str})
    ttc_frames = _read_csv(ctx.out / "safety" / "ttc_frames.csv", dtype={"record_id": str})
    if len(inter) != len(ttc_frames) or not (
            (inter["record_id"].to_numpy() == ttc_frames["record_id"].to_numpy()).all()
            and (inter["time"].to_numpy() == ttc_frames["time"].to_numpy()).all()):
        raise StaleArtifactError("interaction and TTC frame dumps are not row-aligned; rerun safety")
    zt = pd.DataFrame({
        "subject_class": inter["subject_class"].to_numpy(), "other_class": inter["other_class"].to_numpy(),
        "zone": inter["zone"].to_numpy(), "ttc": ttc_frames["ttc"].to_numpy(float) if len(inter) else [],
    })
    zt = zt[zt["other_class"].isin(keep) & np.isfinite(zt["ttc"].astype(float)) & (zt["ttc"] <= cutoff)]
    _write_csv(zt.sort_values(["subject_class", "zone", "ttc"], kind="stable"), ctx.path("zone_ttc.csv"))

    safety = json.loads((ctx.out / "safety" / "safety_summary.json").read_text(encoding="utf-8"))
    consensus = json.loads((ctx.out / "consensus" / "consensus_summary.json").read_text(encoding="utf-8"))
    av_vru = enc[(enc["subject_class"] == AgentClass.AV.value)
                 & enc["other_class"].isin([k.value for k in AgentClass if k.vru_flag])]
    summ = consensus.get("summary")
    _dump_json({
        "encounters": safety["pairs"],
        "directed_records": safety["encounters"],
        "av_vru_encounters": len(av_vru),
        "min_ttc": safety["min_ttc"],
        "co_occupancy_events": safety["co_occupancy_events"],
        "consensus": None if summ is None else {
            "frames": summ["total_frames"],
            "pct_all_three": summ["pct_all_three"],
            "pct_exactly_two": summ["pct_exactly_two"],
            "pct_at_most_one": summ["pct_at_most_one"],
        },
        "policy": consensus["policy"],
    }, ctx.path("report.json"))


STAGE_FUNCS: dict[str, Callable[[StageContext], None]] = {
    "ingest": _stage_ingest,
    "interactions": _stage_interactions,
    "safety": _stage_safety,
    "flow": _stage_flow,
    "vru": _stage_vru,
    "consensus": _stage_consensus,
    "report": _stage_report,
}
