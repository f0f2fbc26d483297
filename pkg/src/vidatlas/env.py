"""The exploration environment: state, action sets, transitions, observations.

State is a position in the time hierarchy plus two memories: the evidence
scratchpad (append-only, labels never reused) and the dead-zone set (merged,
disjoint intervals whose covered cells render black).  Observations are pure
functions of state given fixed media, so an episode can be replayed from its
action log.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum

from .media import Frame, SubtitleCue, cues_in_window
from .render import CellMeta, GridImage, LabelStyle, compose_grid, label_for
from .timeline import (
    CellAddress,
    Interval,
    VideoSpan,
    cell_interval,
    split_interval,
    sub_second_depth,
)


class EnvError(Exception):
    pass


class InvalidActionError(EnvError):
    """Action kind not in the current available set."""


class DeadCellError(EnvError):
    """Action targeted a blacked-out cell."""


class UnknownLabelError(EnvError):
    """Prune referenced a label that is not in the scratchpad."""


class ActionKind(str, Enum):
    EXPAND = "EXPAND"
    BACKTRACK = "BACKTRACK"
    MARK_PROMISING = "MARK_PROMISING"
    ZOOM = "ZOOM"
    INVESTIGATE = "INVESTIGATE"
    ADD_TO_SCRATCHPAD = "ADD_TO_SCRATCHPAD"
    FINISHED = "FINISHED"


@dataclass(frozen=True)
class CommitItem:
    """One evidence commit requested by a policy."""

    t_s: float
    description: str
    confidence: float


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    cell: int | None = None
    cells: tuple[int, ...] = ()
    direction: str | None = None  # "before" | "after" for INVESTIGATE
    items: tuple[CommitItem, ...] = ()


@dataclass
class EvidenceItem:
    """Scratchpad tuple: image, subtitle, timestamp, confidence, description."""

    image: Frame
    subtitle: str
    timestamp_s: float
    confidence: float
    description: str
    label: str


@dataclass(frozen=True)
class DeadZone:
    interval: Interval
    round_added: int = 0


@dataclass(frozen=True)
class NavFrame:
    """One level of the navigation stack; addr is None for free intervals."""

    addr: CellAddress | None
    interval: Interval


@dataclass(frozen=True)
class EnvConfig:
    k: int = 8
    tile_px: int = 320
    expand_floor_s: float = 1.0
    blackout_theta: float = 0.95
    max_depth: int | None = None  # None = first sub-second layer
    evidence_pad_s: float = 0.5
    label_style: LabelStyle = field(default_factory=LabelStyle)

    def resolved_max_depth(self, span: VideoSpan) -> int:
        if self.max_depth is not None:
            return self.max_depth
        return sub_second_depth(span, self.k)


@dataclass
class Observation:
    grid: GridImage
    cell_descriptors: list[CellMeta]
    subtitles: list[SubtitleCue]
    available_actions: set[ActionKind]
    depth: int
    position: Interval
    cell_span_s: float


@dataclass
class StepResult:
    kind: ActionKind
    observation: Observation | None = None
    frames: tuple[Frame, ...] = ()
    committed_labels: tuple[str, ...] = ()
    dead_zones: tuple[Interval, ...] = ()
    terminal: bool = False
    summary: str = ""


class EnvState:
    """Mutable environment state owned by exactly one actor at a time."""

    def __init__(
        self,
        source,
        span: VideoSpan,
        config: EnvConfig,
        cues: list[SubtitleCue] | None = None,
        mode: str = "dfs",
    ):
        self.source = source
        self.span = span
        self.config = config
        self.cues = list(cues or [])
        self.mode = mode
        self.nav_stack: list[NavFrame] = []
        self.scratchpad: list[EvidenceItem] = []
        self.dead_zones: list[DeadZone] = []
        self.promising_queue: list[CellAddress | Interval] = []
        self.assigned_interval: Interval = Interval(0.0, span.duration_s)
        self.round_index = 0
        self._label_counter = 0
        self._last_zoom: Frame | None = None

    # -- derived geometry ---------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.nav_stack)

    @property
    def position(self) -> Interval:
        if self.nav_stack:
            return self.nav_stack[-1].interval
        return Interval(0.0, self.span.duration_s)

    @property
    def center_s(self) -> float:
        return self.position.midpoint_s

    @property
    def span_s(self) -> float:
        return self.position.width

    @property
    def address(self) -> CellAddress | None:
        if not self.nav_stack:
            return CellAddress((), self.config.k)
        return self.nav_stack[-1].addr

    def fork(self, mode: str | None = None) -> "EnvState":
        """Independent copy for a worker; media and frames stay shared."""
        child = EnvState(self.source, self.span, self.config, self.cues,
                         mode or self.mode)
        child.nav_stack = list(self.nav_stack)
        child.scratchpad = list(self.scratchpad)
        child.dead_zones = list(self.dead_zones)
        child.assigned_interval = self.assigned_interval
        child.round_index = self.round_index
        child._label_counter = self._label_counter
        return child

    def root_at(self, target: CellAddress | Interval) -> None:
        """Re-root this state at a cell address or a free interval."""
        self.nav_stack = []
        if isinstance(target, CellAddress):
            for d in range(1, target.depth + 1):
                sub = CellAddress(target.path[:d], target.grid_k)
                self.nav_stack.append(NavFrame(sub, cell_interval(self.span, sub)))
            self.assigned_interval = cell_interval(self.span, target)
        else:
            self.nav_stack = [NavFrame(None, target)]
            self.assigned_interval = target

    # -- memories -----------------------------------------------------------

    def dead_coverage(self, interval: Interval) -> float:
        covered = sum(z.interval.overlap_width(interval) for z in self.dead_zones)
        return covered / interval.width if interval.width > 0 else 0.0

    def dead_measure(self) -> float:
        return sum(z.interval.width for z in self.dead_zones)


def init_env(
    source,
    span: VideoSpan | None = None,
    config: EnvConfig | None = None,
    cues: list[SubtitleCue] | None = None,
    mode: str = "dfs",
) -> tuple[EnvState, Observation]:
    """Fresh state at the root grid with empty memories, plus its observation."""
    if span is None:
        span = VideoSpan(source.duration_s, source.fps)
    state = EnvState(source, span, config or EnvConfig(), cues, mode)
    return state, observe(state)


def available_actions(state: EnvState) -> set[ActionKind]:
    """State-dependent action set; the policy cannot pick what it cannot see."""
    acts = {ActionKind.ZOOM, ActionKind.INVESTIGATE,
            ActionKind.ADD_TO_SCRATCHPAD, ActionKind.FINISHED}
    cell_span = state.position.width / (state.config.k ** 2)
    if (cell_span >= state.config.expand_floor_s
            and state.depth < state.config.resolved_max_depth(state.span)):
        acts.add(ActionKind.EXPAND)
    if state.depth > 0:
        acts.add(ActionKind.BACKTRACK)
    if state.mode == "bfs":
        acts.add(ActionKind.MARK_PROMISING)
    return acts


def _cells(state: EnvState) -> list[CellMeta]:
    theta = state.config.blackout_theta
    addr = state.address
    metas = []
    for i, (ivl, mid) in enumerate(split_interval(state.position, state.config.k)):
        blacked = state.dead_coverage(ivl) >= theta
        metas.append(CellMeta(i, ivl, mid, blacked))
    return metas


def observe(state: EnvState, grid_cache: dict | None = None) -> Observation:
    """Grid of midpoint frames for the current position, dead cells masked.

    ``grid_cache`` optionally memoizes the composited raster by (position,
    dead mask); the observation itself is a pure function of state either way.
    """
    cfg = state.config
    metas = _cells(state)
    key = (round(state.position.start_s, 9), round(state.position.end_s, 9),
           cfg.k, cfg.tile_px, tuple(m.blacked for m in metas))
    grid = grid_cache.get(key) if grid_cache is not None else None
    if grid is None:
        frames: list[Frame | None] = []
        labels: list[str] = []
        dead: list[bool] = []
        for m in metas:
            dead.append(m.blacked)
            labels.append("" if m.blacked else f"{m.index} @{m.midpoint_s:.1f}s")
            frames.append(None if m.blacked else state.source.frame(m.midpoint_s, cfg.tile_px))
        grid = compose_grid(frames, labels, dead, k=cfg.k, tile_px=cfg.tile_px,
                            cell_meta=metas, style=cfg.label_style)
        if grid_cache is not None:
            grid_cache[key] = grid
    return Observation(
        grid=grid,
        cell_descriptors=metas,
        subtitles=cues_in_window(state.cues, state.position),
        available_actions=available_actions(state),
        depth=state.depth,
        position=state.position,
        cell_span_s=state.position.width / (cfg.k ** 2),
    )


def _check_cell(state: EnvState, metas: list[CellMeta], index: int | None) -> CellMeta:
    if index is None or not 0 <= index < state.config.k ** 2:
        raise InvalidActionError(f"cell index {index} out of range")
    meta = metas[index]
    if meta.blacked:
        raise DeadCellError(f"cell {index} is inside a dead zone")
    return meta


def _normalize_zones(zones: list[DeadZone]) -> list[DeadZone]:
    if not zones:
        return []
    zones = sorted(zones, key=lambda z: z.interval.start_s)
    out = [zones[0]]
    for z in zones[1:]:
        last = out[-1]
        if z.interval.start_s <= last.interval.end_s + 1e-12:
            if z.interval.end_s > last.interval.end_s:
                out[-1] = DeadZone(
                    Interval(last.interval.start_s, z.interval.end_s),
                    min(last.round_added, z.round_added),
                )
        else:
            out.append(z)
    return out


def add_dead_zone(state: EnvState, interval: Interval, round_added: int | None = None) -> None:
    """Record an explored-empty interval; the zone set stays disjoint and sorted."""
    rnd = state.round_index if round_added is None else round_added
    clipped = Interval(max(0.0, interval.start_s),
                       min(state.span.duration_s, interval.end_s))
    state.dead_zones = _normalize_zones(state.dead_zones + [DeadZone(clipped, rnd)])


def prune_evidence(state: EnvState, labels: list[str]) -> None:
    """Remove items by label; remaining labels are untouched (never reassigned)."""
    have = {item.label for item in state.scratchpad}
    for lab in labels:
        if lab not in have:
            raise UnknownLabelError(f"no evidence labeled {lab!r}")
    drop = set(labels)
    state.scratchpad = [it for it in state.scratchpad if it.label not in drop]


def _subtract_evidence(state: EnvState, interval: Interval) -> list[Interval]:
    """Interval minus the protection windows around committed evidence."""
    pad = state.config.evidence_pad_s
    cuts = sorted(
        (max(interval.start_s, it.timestamp_s - pad),
         min(interval.end_s, it.timestamp_s + pad))
        for it in state.scratchpad
        if it.timestamp_s - pad < interval.end_s and it.timestamp_s + pad > interval.start_s
    )
    pieces = []
    cursor = interval.start_s
    for lo, hi in cuts:
        if lo > cursor:
            pieces.append(Interval(cursor, lo))
        cursor = max(cursor, hi)
    if cursor < interval.end_s:
        pieces.append(Interval(cursor, interval.end_s))
    return pieces


def step(state: EnvState, action: Action) -> StepResult:
    """Apply one action; mutates state and returns the result payload."""
    acts = available_actions(state)
    if action.kind not in acts:
        raise InvalidActionError(f"{action.kind.value} not available at depth {state.depth}")
    cfg = state.config
    metas = _cells(state)

    if action.kind is ActionKind.EXPAND:
        meta = _check_cell(state, metas, action.cell)
        addr = state.address
        child_addr = addr.child(meta.index) if addr is not None else None
        state.nav_stack.append(NavFrame(child_addr, meta.interval))
        state._last_zoom = None
        obs = observe(state)
        return StepResult(
            action.kind, observation=obs,
            summary=f"Expanded into cell {meta.index} "
                    f"[{meta.interval.start_s:.1f}-{meta.interval.end_s:.1f}s]",
        )

    if action.kind is ActionKind.BACKTRACK:
        state.nav_stack.pop()
        state._last_zoom = None
        obs = observe(state)
        return StepResult(
            action.kind, observation=obs,
            summary=f"Backtracked to [{state.position.start_s:.1f}-{state.position.end_s:.1f}s]",
        )

    if action.kind is ActionKind.MARK_PROMISING:
        if not action.cells:
            raise InvalidActionError("MARK_PROMISING needs at least one cell")
        marked = []
        for idx in action.cells:
            meta = _check_cell(state, metas, idx)
            addr = state.address
            target = addr.child(meta.index) if addr is not None else meta.interval
            state.promising_queue.append(target)
            marked.append(meta.index)
        return StepResult(
            action.kind,
            summary=f"Marked cells {marked} as promising",
        )

    if action.kind is ActionKind.ZOOM:
        meta = _check_cell(state, metas, action.cell)
        frame = state.source.frame(meta.midpoint_s, cfg.tile_px)
        state._last_zoom = frame
        return StepResult(
            action.kind, frames=(frame,),
            summary=f"Zoomed cell {meta.index} at t={frame.timestamp_s:.1f}s",
        )

    if action.kind is ActionKind.INVESTIGATE:
        meta = _check_cell(state, metas, action.cell)
        direction = (action.direction or "").lower()
        if direction not in ("before", "after"):
            raise InvalidActionError(f"bad INVESTIGATE direction {action.direction!r}")
        width = meta.interval.width
        if direction == "before":
            lo = max(0.0, meta.interval.start_s - width)
            hi = max(lo + 1e-9, meta.interval.start_s)
        else:
            lo = min(meta.interval.end_s, state.span.duration_s - 1e-9)
            hi = min(state.span.duration_s, meta.interval.end_s + width)
            hi = max(hi, lo + 1e-9)
        window = Interval(lo, hi)
        k = cfg.k
        frames = []
        for i in range(k):
            t = window.start_s + (i + 0.5) * window.width / k
            frames.append(state.source.frame(min(t, state.span.duration_s - 1e-9), cfg.tile_px))
        state._last_zoom = None
        return StepResult(
            action.kind, frames=tuple(frames),
            summary=f"Scanned {direction} cell {meta.index} over "
                    f"[{window.start_s:.1f}-{window.end_s:.1f}s]",
        )

    if action.kind is ActionKind.ADD_TO_SCRATCHPAD:
        if not action.items:
            raise InvalidActionError("ADD_TO_SCRATCHPAD needs at least one item")
        labels = []
        for item in action.items:
            if not 0 <= item.t_s < state.span.duration_s:
                raise InvalidActionError(f"evidence timestamp {item.t_s} outside video")
            frame = state.source.frame(item.t_s, cfg.tile_px)
            window = cues_in_window(
                state.cues, Interval(max(0.0, item.t_s - 1e-9), item.t_s + 1e-9))
            label = label_for(state._label_counter)
            state._label_counter += 1
            state.scratchpad.append(EvidenceItem(
                image=frame,
                subtitle=window[0].text if window else "",
                timestamp_s=frame.timestamp_s,
                confidence=min(1.0, max(0.0, item.confidence)),
                description=item.description,
                label=label,
            ))
            labels.append(label)
        return StepResult(
            action.kind, committed_labels=tuple(labels),
            summary=f"Committed {len(labels)} item(s) labeled {','.join(labels)}",
        )

    # FINISHED: assigned region becomes dead, minus evidence protection windows.
    pieces = _subtract_evidence(state, state.assigned_interval)
    for piece in pieces:
        add_dead_zone(state, piece)
    return StepResult(
        ActionKind.FINISHED, dead_zones=tuple(pieces), terminal=True,
        summary=f"Finished region [{state.assigned_interval.start_s:.1f}-"
                f"{state.assigned_interval.end_s:.1f}s]",
    )


def state_hash(state: EnvState) -> str:
    """Stable digest of the navigation/memory state (pixel data excluded)."""
    payload = {
        "pos": [round(state.position.start_s, 6), round(state.position.end_s, 6)],
        "depth": state.depth,
        "stack": [list(f.addr.path) if f.addr else [round(f.interval.start_s, 6),
                                                    round(f.interval.end_s, 6)]
                  for f in state.nav_stack],
        "mode": state.mode,
        "evidence": [[it.label, round(it.timestamp_s, 4), it.description,
                      round(it.confidence, 4)] for it in state.scratchpad],
        "dead": [[round(z.interval.start_s, 6), round(z.interval.end_s, 6)]
                 for z in state.dead_zones],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
