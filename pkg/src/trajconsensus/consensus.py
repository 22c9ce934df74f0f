"""Per-frame consensus classification of AV-VRU interactions.

Each frame gets three flags (safety, interaction, performance). How absent
evidence is treated (no PET because the pair never came close, no headway or
gain because the AV led no platoon) is a policy choice:

``strict``         the sub-condition fails
``vacuous``        the sub-condition passes
``exclude-frame``  the frame is dropped from the denominator
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import AgentClass, AgentTrack
from .errors import EmptySummaryError
from .flow import GainResult, HeadwayEvent
from .interactions import InteractionRecord
from .safety import ConflictMetrics
from .vru import HesitationEvent

POLICIES = ("strict", "vacuous", "exclude-frame")
TTC_MODES = ("per-frame", "encounter-min")
PAPER_TARGET = (1.63, 27.65, 70.71)


@dataclass(frozen=True)
class ConsensusThresholds:
    ttc_min: float = 3.0
    pet_min: float = 5.0
    exit_headway_max: float = 4.0
    gain_max: float = 1.0
    hesitation_window: float = 3.0
    speed_cv_max: float = 0.25

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"threshold {name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class ConsensusPolicy:
    pet_missing: str = "vacuous"
    performance_missing: str = "strict"
    ttc_mode: str = "per-frame"

    def __post_init__(self):
        for name in ("pet_missing", "performance_missing"):
            if getattr(self, name) not in POLICIES:
                raise ValueError(f"{name} must be one of {POLICIES}")
        if self.ttc_mode not in TTC_MODES:
            raise ValueError(f"ttc_mode must be one of {TTC_MODES}")


@dataclass(frozen=True)
class FrameContext:
    subject_id: str
    other_id: str
    time: float
    ttc: float
    pet: float | None
    hesitating: bool
    speed_cv: float | None
    exit_headway: float | None
    gain: float | None
    encounter_min_ttc: float | None = None


@dataclass(frozen=True)
class ConsensusFrame:
    subject_id: str
    other_id: str
    time: float
    safety_ok: bool
    interaction_ok: bool
    performance_ok: bool

    @property
    def satisfied_count(self) -> int:
        return int(self.safety_ok) + int(self.interaction_ok) + int(self.performance_ok)


class _Excluded(Exception):
    pass


def _missing(policy: str) -> bool:
    if policy == "exclude-frame":
        raise _Excluded
    return policy == "vacuous"


def classify_frame(
    ctx: FrameContext,
    thresholds: ConsensusThresholds = ConsensusThresholds(),
    policy: ConsensusPolicy = ConsensusPolicy(),
) -> ConsensusFrame | None:
    """Evaluate one frame; returns None when a policy excludes it."""
    try:
        ttc = ctx.ttc
        if policy.ttc_mode == "encounter-min" and ctx.encounter_min_ttc is not None:
            ttc = ctx.encounter_min_ttc
        pet_ok = ctx.pet > thresholds.pet_min if ctx.pet is not None else _missing(policy.pet_missing)
        safety = ttc > thresholds.ttc_min and pet_ok

        stable = ctx.speed_cv is not None and ctx.speed_cv < thresholds.speed_cv_max
        interaction = not ctx.hesitating and stable

        if ctx.exit_headway is not None:
            headway_ok = ctx.exit_headway < thresholds.exit_headway_max
        else:
            headway_ok = _missing(policy.performance_missing)
        if ctx.gain is not None:
            gain_ok = ctx.gain <= thresholds.gain_max
        else:
            gain_ok = _missing(policy.performance_missing)
        performance = headway_ok and gain_ok
    except _Excluded:
        return None
    return ConsensusFrame(ctx.subject_id, ctx.other_id, ctx.time,
                          bool(safety), bool(interaction), bool(performance))


@dataclass(frozen=True)
class ConsensusSummary:
    total_frames: int
    counts: Mapping[int, int]
    pct_all_three: float
    pct_exactly_two: float
    pct_at_most_one: float
    pct_safety: float
    pct_interaction: float
    pct_performance: float
    excluded_frames: int = 0

    def to_dict(self, digits: int | None = None) -> dict:
        d = asdict(self)
        d["counts"] = {str(k): v for k, v in sorted(self.counts.items())}
        if digits is not None:
            for k, v in d.items():
                if k.startswith("pct_"):
                    d[k] = round(v, digits)
        return d


def summarize(frames: Iterable[ConsensusFrame | None]) -> ConsensusSummary:
    """Exact 3 / 2 / at-most-1 breakdown; ``None`` entries count as excluded."""
    frames = list(frames)
    kept = [f for f in frames if f is not None]
    if not kept:
        raise EmptySummaryError("no consensus frames to summarize")
    n = len(kept)
    counts = Counter(f.satisfied_count for f in kept)
    for c in range(4):
        counts.setdefault(c, 0)

    def pct(k):
        return 100.0 * k / n

    return ConsensusSummary(
        n, dict(sorted(counts.items())),
        pct(counts[3]), pct(counts[2]), pct(counts[0] + counts[1]),
        pct(sum(f.safety_ok for f in kept)),
        pct(sum(f.interaction_ok for f in kept)),
        pct(sum(f.performance_ok for f in kept)),
        len(frames) - n,
    )


# --------------------------------------------------------------------------
# assembling frame contexts from stage outputs


def rolling_cv(track: AgentTrack, window: float) -> np.ndarray:
    """Coefficient of variation of speed over a centred window at every sample.

    Windows are truncated at the track ends. Each window's mean and standard
    deviation are computed in two passes and a flat window is exactly 0.
    """
    s = track.speed
    n = s.shape[0]
    dt = float(np.median(np.diff(track.t))) if n > 1 else 0.1
    half = max(1, int(round(window / 2 / dt)))
    mean = np.empty(n)
    std = np.empty(n)
    if n > 2 * half:
        win = np.lib.stride_tricks.sliding_window_view(s, 2 * half + 1)
        mean[half:n - half] = win.mean(axis=1)
        flat = win.max(axis=1) == win.min(axis=1)
        std[half:n - half] = np.where(flat, 0.0, win.std(axis=1))
        edges = [*range(half), *range(n - half, n)]
    else:
        edges = range(n)
    for i in edges:
        seg = s[max(0, i - half):min(n, i + half + 1)]
        mean[i] = seg.mean()
        std[i] = 0.0 if seg.max() == seg.min() else seg.std()
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = np.where(mean > 0, std / mean, np.where(std == 0, 0.0, np.inf))
    return cv


def _nearest(items, key_time, t):
    if not items:
        return None
    return min(items, key=lambda it: (abs(key_time(it) - t), key_time(it)))


@dataclass
class EvidenceIndex:
    """Per-AV performance evidence and per-pair hesitation intervals."""

    exit_headways: dict[str, list[HeadwayEvent]] = field(default_factory=dict)
    gains: dict[str, list[GainResult]] = field(default_factory=dict)
    hesitations: dict[tuple[str, str], list[HesitationEvent]] = field(default_factory=dict)

    @classmethod
    def build(cls, headways: Iterable[HeadwayEvent], gains: Iterable[GainResult],
              hesitations: Iterable[HesitationEvent]) -> "EvidenceIndex":
        idx = cls()
        for ev in headways:
            if ev.boundary == "exit":
                idx.exit_headways.setdefault(ev.follower_id, []).append(ev)
        for g in gains:
            if g.follower_position == 1:
                idx.gains.setdefault(g.platoon_leader_id, []).append(g)
        for h in hesitations:
            idx.hesitations.setdefault((h.vehicle_id, h.vru_id), []).append(h)
        return idx

    def exit_headway(self, av_id: str, t: float) -> float | None:
        ev = _nearest(self.exit_headways.get(av_id, []), lambda e: e.crossing_times[1], t)
        return None if ev is None else ev.headway

    def gain(self, av_id: str, t: float) -> float | None:
        g = _nearest(self.gains.get(av_id, []), lambda r: 0.5 * (r.window[0] + r.window[1]), t)
        return None if g is None else g.gain


def build_contexts(
    records: Sequence[InteractionRecord],
    conflicts: Mapping[str, ConflictMetrics],
    tracks: Mapping[str, AgentTrack],
    evidence: EvidenceIndex,
    thresholds: ConsensusThresholds = ConsensusThresholds(),
    subject_kind: AgentClass = AgentClass.AV,
) -> list[FrameContext]:
    """Frame contexts for every frame of every AV->VRU record.

    Performance evidence is per passage: the AV's exit headway and first
    follower gain nearest in time to the encounter are broadcast to all of
    its frames.
    """
    cv_cache: dict[str, np.ndarray] = {}
    out = []
    for rec in records:
        if rec.subject_kind is not subject_kind or not rec.other_kind.vru_flag:
            continue
        cm = conflicts[rec.record_id]
        vru = tracks[rec.other_id]
        if vru.agent_id not in cv_cache:
            cv_cache[vru.agent_id] = rolling_cv(vru, thresholds.hesitation_window)
        cv = cv_cache[vru.agent_id]
        vidx = np.clip(np.searchsorted(vru.t, rec.times - 1e-6), 0, len(vru) - 1)
        mid = 0.5 * (rec.start_time + rec.end_time)
        headway = evidence.exit_headway(rec.subject_id, mid)
        gain = evidence.gain(rec.subject_id, mid)
        hes = evidence.hesitations.get((rec.subject_id, rec.other_id), [])
        enc_min = float(cm.ttc.min())
        for t, ttc, k in zip(rec.times.tolist(), cm.ttc.tolist(), vidx.tolist()):
            c = float(cv[k])
            out.append(FrameContext(
                rec.subject_id, rec.other_id, t, ttc, cm.pet,
                any(h.covers(t) for h in hes),
                c,
                headway, gain, enc_min,
            ))
    return out


def classify_all(contexts: Iterable[FrameContext], thresholds: ConsensusThresholds,
                 policy: ConsensusPolicy) -> list[ConsensusFrame | None]:
    return [classify_frame(c, thresholds, policy) for c in contexts]


@dataclass(frozen=True)
class PolicyTrial:
    policy: ConsensusPolicy
    summary: ConsensusSummary
    max_deviation: float


def policy_search(
    contexts: Sequence[FrameContext],
    thresholds: ConsensusThresholds = ConsensusThresholds(),
    target: tuple[float, float, float] = PAPER_TARGET,
) -> list[PolicyTrial]:
    """Every policy combination ranked by its worst deviation (percentage
    points) from ``target`` = (all three, exactly two, at most one)."""
    trials = []
    for pet, perf, mode in itertools.product(POLICIES, POLICIES, TTC_MODES):
        policy = ConsensusPolicy(pet, perf, mode)
        try:
            s = summarize(classify_all(contexts, thresholds, policy))
        except EmptySummaryError:
            continue
        got = (s.pct_all_three, s.pct_exactly_two, s.pct_at_most_one)
        dev = max(abs(a - b) for a, b in zip(got, target))
        trials.append(PolicyTrial(policy, s, dev))
    trials.sort(key=lambda tr: (tr.max_deviation, POLICIES.index(tr.policy.pet_missing),
                                POLICIES.index(tr.policy.performance_missing),
                                TTC_MODES.index(tr.policy.ttc_mode)))
    return trials


def relaxed(thresholds: ConsensusThresholds, factor: float) -> ConsensusThresholds:
    """Thresholds moved in the permissive direction by ``factor >= 1``."""
    return replace(
        thresholds,
        ttc_min=thresholds.ttc_min / factor,
        pet_min=thresholds.pet_min / factor,
        exit_headway_max=thresholds.exit_headway_max * factor,
        gain_max=thresholds.gain_max * factor,
        speed_cv_max=thresholds.speed_cv_max * factor,
    )
