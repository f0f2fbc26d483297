"""Synthetic benchmark construction and experiment sweeps.

Needle episodes plant one or more glyph markers in a procedurally generated
timeline; the scripted oracle policy then has to navigate to them.  The
sweep helpers drive those episodes across durations, worker counts, and
depth caps, and are shared by the CLI commands and the acceptance tests.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from .media import (
    GLYPH_NAMES,
    ConcatFrameSource,
    ExternalDecoderSource,
    SubtitleCue,
    SyntheticEvent,
    SyntheticSource,
    SyntheticVideoSpec,
    merge_subtitles,
    parse_srt,
)
from .metrics import ScalingPoint, fit_scaling
from .orchestrator import Episode, EpisodeConfig, EpisodeResult
from .policy import OracleKnowledge, OraclePolicy
from .timeline import cell_interval, CellAddress

NEEDLE_QUERY = "Which planted marker glyph appears in this video?"
N_CANDIDATES = 4


@dataclass
class NeedleEpisode:
    """A fully-specified synthetic search task with its ground truth."""

    spec: SyntheticVideoSpec
    query: str
    candidates: list[str]
    answer_index: int
    knowledge: OracleKnowledge
    cues: list[SubtitleCue] = field(default_factory=list)

    @property
    def source(self) -> SyntheticSource:
        return SyntheticSource(self.spec)

    @property
    def events(self) -> tuple[SyntheticEvent, ...]:
        return self.spec.events


def build_needle(
    duration_s: float,
    seed: int = 0,
    n_events: int = 1,
    event_width_s: float = 1.0,
    fps: float = 25.0,
    k: int = 8,
    query: str = NEEDLE_QUERY,
) -> NeedleEpisode:
    """Plant n events in distinct root cells and phrase the matching QA task."""
    rng = random.Random(f"{seed}:{duration_s:.3f}:{n_events}")
    glyph = rng.choice(GLYPH_NAMES)
    others = [g for g in GLYPH_NAMES if g != glyph]
    candidates = [glyph] + rng.sample(others, N_CANDIDATES - 1)
    rng.shuffle(candidates)
    cell_ids = rng.sample(range(k * k), n_events)
    events = []
    for cid in sorted(cell_ids):
        cell = cell_interval(duration_s, CellAddress((cid,), k))
        u = 0.25 + 0.5 * rng.random()
        events.append(SyntheticEvent(
            t_s=cell.start_s + u * cell.width, glyph=glyph,
            width_s=event_width_s))
    spec = SyntheticVideoSpec(duration_s=duration_s, seed=seed, fps=fps,
                              events=tuple(events))
    return NeedleEpisode(
        spec=spec,
        query=query,
        candidates=candidates,
        answer_index=candidates.index(glyph),
        knowledge=OracleKnowledge(events=tuple(events),
                                  answer_index=candidates.index(glyph)),
    )


def run_needle(
    needle: NeedleEpisode,
    config: EpisodeConfig | None = None,
    trace_path=None,
) -> EpisodeResult:
    config = config or EpisodeConfig()
    episode = Episode(needle.source, needle.query, needle.candidates, config,
                      OraclePolicy(needle.knowledge), cues=needle.cues,
                      answer_index=needle.answer_index, trace_path=trace_path)
    return episode.run()


# ---------------------------------------------------------------------------
# Sweeps

def sweep_duration(
    durations: list[float],
    trials: int,
    config: EpisodeConfig | None = None,
    seed: int = 0,
) -> tuple[list[ScalingPoint], object]:
    """Oracle episodes per duration; returns per-episode points plus the fits."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if len(set(durations)) < 2:
        raise ValueError("need at least two distinct durations to sweep")
    config = config or EpisodeConfig()
    points = []
    for duration in durations:
        for trial in range(trials):
            needle = build_needle(duration, seed=seed * 1000 + trial)
            result = run_needle(needle, config)
            points.append(ScalingPoint(
                duration_s=duration,
                total_tokens=result.total_tokens,
                effective_tokens=result.effective_tokens,
                hit_rate=result.cache_hit_rate,
            ))
    fit = fit_scaling(points) if len(set(durations)) >= 4 else None
    return points, fit


@dataclass
class WorkerSweepRow:
    workers: int
    rounds: int
    total_steps: int
    critical_path_steps: int
    answer: int | None
    correct: bool | None
    evidence: set


def sweep_workers(
    worker_counts: list[int],
    duration_s: float = 3600.0,
    n_events: int = 3,
    config: EpisodeConfig | None = None,
    seed: int = 0,
) -> list[WorkerSweepRow]:
    """Same episode under different worker counts; evidence must not change."""
    base = config or EpisodeConfig()
    rows = []
    seen = set()
    for w in worker_counts:
        if w in seen or w <= 0:
            continue
        seen.add(w)
        needle = build_needle(duration_s, seed=seed, n_events=n_events)
        result = run_needle(needle, replace(base, workers=w))
        rows.append(WorkerSweepRow(
            workers=w,
            rounds=result.rounds,
            total_steps=result.total_steps,
            critical_path_steps=result.critical_path_steps,
            answer=result.answer,
            correct=result.correct,
            evidence={(round(t, 2), d) for t, d in result.evidence},
        ))
    return rows


@dataclass
class DepthSweepRow:
    max_depth: int
    episodes: int
    accuracy: float
    mean_total_tokens: float
    mean_evidence: float


def sweep_depth(
    depth_caps: list[int],
    duration_s: float = 36000.0,
    event_width_s: float = 0.2,
    trials: int = 5,
    config: EpisodeConfig | None = None,
    seed: int = 0,
) -> list[DepthSweepRow]:
    """Accuracy and token cost as the exploration depth cap varies."""
    base = config or EpisodeConfig()
    rows = []
    for cap in depth_caps:
        correct = 0
        tokens = 0.0
        evidence = 0.0
        for trial in range(trials):
            needle = build_needle(duration_s, seed=seed * 1000 + trial,
                                  event_width_s=event_width_s)
            result = run_needle(needle, replace(base, max_depth=cap))
            correct += 1 if result.correct else 0
            tokens += result.total_tokens
            evidence += result.evidence_count
        rows.append(DepthSweepRow(
            max_depth=cap,
            episodes=trials,
            accuracy=correct / trials,
            mean_total_tokens=tokens / trials,
            mean_evidence=evidence / trials,
        ))
    return rows


# ---------------------------------------------------------------------------
# Multi-video concatenation ("10-hour variant" builder)

def source_from_spec(spec: dict):
    """Build (frame source, cues) from a video-spec mapping.

    Forms: {"type": "synthetic", ...}, {"type": "file", ...},
    {"type": "concat", "parts": [...]}.
    """
    kind = spec.get("type")
    if kind == "synthetic":
        events = tuple(
            SyntheticEvent(
                t_s=float(e["t"]), glyph=e["glyph"],
                color=tuple(e.get("color", (255, 216, 0))),
                width_s=float(e.get("width_s", 1.0)))
            for e in spec.get("events", []))
        video = SyntheticVideoSpec(
            duration_s=float(spec["duration_s"]), seed=int(spec.get("seed", 0)),
            fps=float(spec.get("fps", 25.0)), events=events)
        cues = list(spec.get("cues", []))
        cues = [SubtitleCue(i + 1, float(c["start"]), float(c["end"]), str(c["text"]))
                for i, c in enumerate(cues)]
        return SyntheticSource(video), cues
    if kind == "file":
        source = ExternalDecoderSource(
            path=spec["path"], duration_s=float(spec["duration_s"]),
            fps=float(spec.get("fps", 25.0)),
            decoder=tuple(spec.get("decoder", ("vidatlas-decode",))))
        cues: list[SubtitleCue] = []
        if spec.get("srt"):
            with open(spec["srt"], "rb") as f:
                cues, _ = parse_srt(f.read())
        return source, cues
    if kind == "concat":
        parts = []
        tracks = []
        for part in spec["parts"]:
            src, cues = source_from_spec(part)
            parts.append((src, cues))
        concat = ConcatFrameSource([p[0] for p in parts])
        for (src, cues), seg in zip(parts, concat.concat.segments):
            tracks.append((cues, seg.offset_s))
        return concat, merge_subtitles(tracks)
    raise ValueError(f"unknown video spec type {kind!r}")


def make_concat(
    inputs: list[dict],
    target_index: int,
    seed: int = 0,
) -> tuple[dict, list[SubtitleCue], dict]:
    """Concatenate inputs in a seeded random order; the target lands anywhere.

    Returns (concat video spec, merged cues, answer key).  The answer key
    records the target's offset so that global event time == offset + local
    event time.
    """
    if not 0 <= target_index < len(inputs):
        raise ValueError(f"target index {target_index} out of range")
    order = list(range(len(inputs)))
    random.Random(seed).shuffle(order)
    parts = [inputs[i] for i in order]
    concat_spec = {"type": "concat", "parts": parts}
    source, cues = source_from_spec(concat_spec)
    slot = order.index(target_index)
    segment = source.concat.segments[slot]
    target = inputs[target_index]
    local_events = [float(e["t"]) for e in target.get("events", [])]
    key = {
        "target_input_index": target_index,
        "target_slot": slot,
        "offset_s": segment.offset_s,
        "duration_s": segment.duration_s,
        "total_s": source.concat.total_s,
        "order": order,
        "local_event_times": local_events,
        "global_event_times": [segment.offset_s + t for t in local_events],
    }
    return concat_spec, cues, key
