"""Round-based search loop: probing, virtual-loss assignment, workers, stopping.

Each round the coordinator ("master") ranks root cells from the masked root
grid, assigns up to W distinct targets through a priority queue with virtual
loss, runs the workers concurrently on disjoint forks of the environment,
then merges evidence and dead zones at a single synchronization point before
the per-round uncertainty analysis.  Episodes stop at one of three levels:
worker budgets exhausting every round (WorkerBudget), the analysis declaring
the evidence sufficient (Sufficiency), or the modeled token budget running
out (GlobalBudget).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .env import (
    Action,
    ActionKind,
    EnvConfig,
    EnvError,
    EnvState,
    EvidenceItem,
    Observation,
    add_dead_zone,
    observe,
    prune_evidence,
    state_hash,
    step,
)
from .media import SubtitleCue
from .metrics import CacheSim, TokenModel, count_tokens
from .policy import (
    ParseError,
    PolicyRequest,
    PolicyResponse,
    UncertaintyContinue,
    fill_template,
    parse_final,
    parse_probe,
    parse_uncertainty,
    parse_worker_action,
)
from .render import GridImage, compose_row, label_for, render_scratchpad
from .timeline import CellAddress, Interval, VideoSpan, cell_interval

STOP_SUFFICIENCY = "Sufficiency"
STOP_WORKER_BUDGET = "WorkerBudget"
STOP_GLOBAL_BUDGET = "GlobalBudget"

# Queries about ordering or narrative flow favor breadth-first scanning;
# anything else defaults to depth-first detail localization.
BFS_KEYWORDS = ("sequence", "flow", "order of", "ordering", "summar",
                "chronolog", "timeline", "overall structure", "storyline")

FIFO_PRIORITY = 0.25
EXPLORE_PRIORITY = 1.0


@dataclass(frozen=True)
class EpisodeConfig:
    k: int = 8
    tile_px: int = 320
    max_depth: int | None = None  # None = auto (first sub-second layer)
    workers: int = 3
    top_n: int = 3
    dfs_budget: int = 8
    bfs_budget: int = 1
    max_rounds: int = 8
    token_budget: int = 500_000
    blackout_theta: float = 0.95
    traversal: str = "auto"  # auto | dfs | bfs
    expand_floor_s: float = 1.0
    evidence_pad_s: float = 0.5
    virtual_loss: float = 1.0
    block_tokens: int = 16

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            k=self.k, tile_px=self.tile_px, expand_floor_s=self.expand_floor_s,
            blackout_theta=self.blackout_theta, max_depth=self.max_depth,
            evidence_pad_s=self.evidence_pad_s,
        )


def select_traversal(query: str, setting: str = "auto") -> str:
    """Pick DFS vs BFS from the query's linguistic traits (or the override)."""
    if setting in ("dfs", "bfs"):
        return setting
    try:
        lowered = query.lower()
    except AttributeError:
        return "dfs"
    return "bfs" if any(kw in lowered for kw in BFS_KEYWORDS) else "dfs"


def _target_key(target) -> tuple:
    if isinstance(target, CellAddress):
        return ("cell",) + target.path
    return ("ivl", round(target.start_s, 6), round(target.end_s, 6))


def _target_sort_key(target) -> tuple:
    if isinstance(target, CellAddress):
        return (0,) + target.path
    return (1, target.start_s, target.end_s)


def target_interval(span: VideoSpan, target) -> Interval:
    if isinstance(target, CellAddress):
        return cell_interval(span, target)
    return target


@dataclass
class FrontierEntry:
    target: object  # CellAddress | Interval
    priority: float
    virtual_loss: float = 0.0
    order: int = 0


class FrontierQueue:
    """Priority frontier with virtual loss to keep concurrent workers apart."""

    def __init__(self, loss: float = 1.0):
        self.loss = loss
        self.entries: dict[tuple, FrontierEntry] = {}
        self.retired: set[tuple] = set()
        self._order = 0
        self._assigned_this_round: set[tuple] = set()

    def _add(self, target, priority: float) -> FrontierEntry | None:
        key = _target_key(target)
        if key in self.retired:
            return None
        entry = self.entries.get(key)
        if entry is None:
            entry = FrontierEntry(target, priority, order=self._order)
            self._order += 1
            self.entries[key] = entry
        else:
            entry.priority = priority
        return entry

    def retire(self, target) -> None:
        """Drop a scanned target for good; its marked children now stand for it."""
        key = _target_key(target)
        self.retired.add(key)
        self.entries.pop(key, None)

    def set_priority(self, target, priority: float) -> None:
        self._add(target, priority)

    def add_fifo(self, target) -> None:
        if _target_key(target) not in self.entries:
            self._add(target, FIFO_PRIORITY)

    def effective(self, entry: FrontierEntry) -> float:
        return entry.priority - self.loss * entry.virtual_loss

    def begin_round(self) -> None:
        self._assigned_this_round = set()

    def pop_assignments(self, count: int, exclude=None) -> list:
        """Up to ``count`` distinct targets by penalized priority."""
        candidates = [
            (key, e) for key, e in self.entries.items()
            if key not in self._assigned_this_round
            and (exclude is None or not exclude(e.target))
        ]
        candidates.sort(key=lambda item: (-self.effective(item[1]), item[1].order))
        out = []
        for key, entry in candidates[:count]:
            entry.virtual_loss += 1.0
            self._assigned_this_round.add(key)
            out.append(entry.target)
        return out

    def clear_virtual(self, target) -> None:
        entry = self.entries.get(_target_key(target))
        if entry is not None:
            entry.virtual_loss = 0.0


@dataclass
class WorkerOutcome:
    slot: int
    target: object
    mode: str
    evidence: list = field(default_factory=list)
    dead_zones: list = field(default_factory=list)
    promising: list = field(default_factory=list)
    steps: int = 0
    expands: int = 0
    max_depth_seen: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    requests: int = 0
    trace: list = field(default_factory=list)
    error: str | None = None


@dataclass
class RoundSummary:
    round_index: int
    assigned: list
    evidence_added: int
    dead_zone_total_s: float
    worker_steps: list
    decision: str  # "continue" | "final"


@dataclass
class EpisodeResult:
    answer: int | None
    correct: bool | None
    rounds: int
    stop_reason: str
    evidence_count: int
    master_tokens: int
    worker_tokens: int
    total_tokens: int
    effective_tokens: int
    cache_hit_rate: float
    total_steps: int
    critical_path_steps: int
    requests: int
    search_task: str
    traversal: str
    evidence: list[tuple[float, str]] = field(default_factory=list)
    round_summaries: list[RoundSummary] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "answer": self.answer,
            "correct": self.correct,
            "rounds": self.rounds,
            "stop_reason": self.stop_reason,
            "master_tokens": self.master_tokens,
            "worker_tokens": self.worker_tokens,
            "total_tokens": self.total_tokens,
            "cache_hit_rate": round(self.cache_hit_rate, 6),
            "evidence_count": self.evidence_count,
        }


def _result_hash(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8", errors="replace")).hexdigest()[:16]


class Episode:
    """One query against one video under one policy."""

    def __init__(
        self,
        source,
        query: str,
        candidates: list[str],
        config: EpisodeConfig,
        policy,
        cues: list[SubtitleCue] | None = None,
        answer_index: int | None = None,
        trace_path=None,
    ):
        self.source = source
        self.query = query
        self.candidates = list(candidates)
        self.config = config
        self.policy = policy
        self.answer_index = answer_index
        self.span = VideoSpan(source.duration_s, source.fps)
        self.trunk = EnvState(source, self.span, config.env_config(), cues or [])
        self.token_model = TokenModel()
        self.cache = CacheSim(config.block_tokens, self.token_model)
        self.traversal = select_traversal(query, config.traversal)
        self.search_task = query
        self.master_tokens = 0
        self.worker_tokens = 0
        self.round_summaries: list[RoundSummary] = []
        self.total_steps = 0
        self.critical_path_steps = 0
        self._queue = FrontierQueue(config.virtual_loss)
        self._grid_cache: dict = {}
        self._scratch_cache: tuple | None = None
        self._trace_rows: list[dict] = []
        self._trace_file = open(trace_path, "w") if trace_path else None
        self._step_counter = 0
        self._stop_reason: str | None = None
        self._final_grid: GridImage | None = None

    # ------------------------------------------------------------------ io

    def _trace(self, actor: str, action: str, args: dict, tokens_in: int,
               tokens_out: int, shash: str, rhash: str, round_index: int | None = None,
               sink: list | None = None) -> None:
        row = {
            "step": None,
            "round": self._round if round_index is None else round_index,
            "actor": actor,
            "action": action,
            "args": args,
            "tokens_in": tokens_in,
            "tokens_out": tokens_out,
            "state_hash": shash,
            "result_hash": rhash,
        }
        if sink is not None:
            sink.append(row)
        else:
            self._flush_row(row)

    def _flush_row(self, row: dict) -> None:
        row["step"] = self._step_counter
        self._step_counter += 1
        self._trace_rows.append(row)
        if self._trace_file:
            self._trace_file.write(json.dumps(row) + "\n")

    @property
    def trace_rows(self) -> list[dict]:
        return self._trace_rows

    # -------------------------------------------------------------- helpers

    def _observe(self, env: EnvState) -> Observation:
        """Observation with the grid render memoized by (position, mask)."""
        return observe(env, self._grid_cache)

    def _scratch_grid(self) -> GridImage | None:
        items = self.trunk.scratchpad
        if not items:
            return None
        key = tuple((it.label, round(it.timestamp_s, 4)) for it in items)
        if self._scratch_cache is None or self._scratch_cache[0] != key:
            grid = render_scratchpad(items, tile_px=self.config.tile_px)
            self._scratch_cache = (key, grid)
        return self._scratch_cache[1]

    def _context_str(self, obs: Observation) -> str:
        lines = []
        for m in obs.cell_descriptors:
            if m.blacked:
                lines.append(f"[{m.index}] {m.interval.start_s:.1f}-{m.interval.end_s:.1f}s EXPLORED")
            else:
                lines.append(f"[{m.index}] {m.interval.start_s:.1f}-{m.interval.end_s:.1f}s"
                             f" mid={m.midpoint_s:.1f}s")
        if obs.subtitles:
            lines.append("SUBTITLES:")
            for cue in obs.subtitles[:40]:
                first = cue.text.split("\n")[0]
                lines.append(f"  [{cue.start_s:.1f}-{cue.end_s:.1f}s] {first}")
        return "\n".join(lines)

    def _candidates_str(self) -> str:
        if not self.candidates:
            return "(none)"
        return "\n".join(f"{i}. {c}" for i, c in enumerate(self.candidates))

    def _evidence_text(self) -> str:
        if not self.trunk.scratchpad:
            return "(none yet)"
        return "\n".join(
            f"[{it.label}] @{it.timestamp_s:.1f}s (conf {it.confidence:.2f}): {it.description}"
            for it in self.trunk.scratchpad)

    def _progress_text(self) -> str:
        explored = self.trunk.dead_measure() / self.span.duration_s * 100.0
        return (f"round {self._round}/{self.config.max_rounds}; "
                f"{explored:.1f}% of timeline explored; "
                f"{len(self.trunk.dead_zones)} dead zones; "
                f"{len(self.trunk.scratchpad)} evidence items")

    def _cells_ctx(self, obs: Observation) -> list[dict]:
        return [{"index": m.index, "start": m.interval.start_s, "end": m.interval.end_s,
                 "blacked": m.blacked} for m in obs.cell_descriptors]

    def _evidence_ts(self, env: EnvState | None = None) -> list[float]:
        return [it.timestamp_s for it in (env or self.trunk).scratchpad]

    def _call_policy(self, request: PolicyRequest, actor: str) -> PolicyResponse:
        request.token_estimate = count_tokens(request, self.token_model)
        self.cache.cache_step(request)
        response = self.policy.decide(request)
        if response.tokens_in == 0:
            response.tokens_in = request.token_estimate
        if response.tokens_out == 0:
            response.tokens_out = self.token_model.text_tokens(response.raw_text)
        if actor == "master":
            self.master_tokens += response.tokens_in + response.tokens_out
        return response

    def _tokens_used(self) -> int:
        return self.master_tokens + self.worker_tokens

    # ------------------------------------------------------- master phases

    def _extract_search_task(self) -> None:
        text = fill_template("search_task", {
            "query": self.query, "candidates": self._candidates_str()})
        request = PolicyRequest("search_task", text, context={
            "query": self.query, "candidates": list(self.candidates)})
        try:
            response = self._call_policy(request, "master")
            task = response.raw_text.strip()
            self.search_task = task if task else self.query
            rhash = _result_hash(response.raw_text)
            tin, tout = response.tokens_in, response.tokens_out
        except Exception as exc:  # fall back to the raw query, episode goes on
            self.search_task = self.query
            rhash = _result_hash(f"error:{exc}")
            tin = tout = 0
        self._trace("master", "search_task", {"query": self.query},
                    tin, tout, state_hash(self.trunk), rhash)

    def _probe(self) -> list[int]:
        obs = self._observe(self.trunk)
        valid = {m.index for m in obs.cell_descriptors if not m.blacked}
        text = fill_template("probe", {
            "query": self.query,
            "context_str": self._context_str(obs),
            "top_n": self.config.top_n,
        })
        images = [obs.grid]
        scratch = self._scratch_grid()
        if scratch is not None:
            images.append(scratch)
        request = PolicyRequest("probe", text, images=images, context={
            "cells": self._cells_ctx(obs), "top_n": self.config.top_n,
            "evidence_ts": self._evidence_ts()})
        ranked: list[int] | None = None
        raw = ""
        for _ in range(2):  # one retry on malformed output
            response = self._call_policy(request, "master")
            raw = response.raw_text
            try:
                ranked = parse_probe(raw, self.config.top_n, valid)
                break
            except ParseError:
                ranked = None
        if ranked is None:  # fall back to lowest-index live cells
            ranked = sorted(valid)[: self.config.top_n]
        self._trace("master", "probe", {"ranked": ranked}, request.token_estimate,
                    self.token_model.text_tokens(raw), state_hash(self.trunk),
                    _result_hash(raw))
        return ranked

    def _uncertainty(self):
        obs = self._observe(self.trunk)
        text = fill_template("uncertainty", {
            "query": self.query,
            "candidates": self._candidates_str(),
            "evidence_text": self._evidence_text(),
            "progress_text": self._progress_text(),
            "context_str": self._context_str(obs),
            "N": self.config.top_n,
        })
        images = []
        scratch = self._scratch_grid()
        if scratch is not None:
            images.append(scratch)
        images.append(obs.grid)
        request = PolicyRequest("uncertainty", text, images=images, context={
            "evidence_ts": self._evidence_ts(),
            "root_cells": self._cells_ctx(obs),
            "explore_n": self.config.top_n})
        response = self._call_policy(request, "master")
        try:
            verdict = parse_uncertainty(response.raw_text)
        except ParseError:
            verdict = UncertaintyContinue()  # fail-safe: keep exploring
        self._trace("master", "uncertainty",
                    {"decision": type(verdict).__name__},
                    response.tokens_in, response.tokens_out,
                    state_hash(self.trunk), _result_hash(response.raw_text))
        return verdict

    def _apply_continue(self, verdict: UncertaintyContinue) -> None:
        have = {it.label for it in self.trunk.scratchpad}
        erasable = [lab for lab in verdict.erase if lab in have]
        if erasable:
            prune_evidence(self.trunk, erasable)
        for cid in verdict.explore_cells:
            if 0 <= cid < self.config.k ** 2:
                self._queue.set_priority(CellAddress((cid,), self.config.k),
                                         EXPLORE_PRIORITY)
        for rng in verdict.explore_ranges:
            lo = max(0.0, rng.start_s)
            hi = min(self.span.duration_s, rng.end_s)
            if lo < hi:
                self._queue.set_priority(Interval(lo, hi), EXPLORE_PRIORITY)

    def _final_decision(self) -> tuple[int | None, str]:
        descriptions = self._evidence_text()
        if not self.trunk.scratchpad:
            descriptions = "(no evidence collected)"
        text = fill_template("final_decision", {
            "query": self.query,
            "candidates": self._candidates_str(),
            "evidence_descriptions": descriptions,
        })
        images = []
        scratch = self._scratch_grid()
        if scratch is not None:
            images.append(scratch)
            self._final_grid = scratch
        context = {"evidence_ts": self._evidence_ts(),
                   "n_candidates": len(self.candidates)}
        answer: int | None = None
        reasoning = ""
        raw = ""
        tokens_in = 0
        for _ in range(2):  # re-ask once on an invalid index
            request = PolicyRequest("final_decision", text, images=list(images),
                                    context=context)
            response = self._call_policy(request, "master")
            raw = response.raw_text
            tokens_in = response.tokens_in
            try:
                answer, reasoning = parse_final(raw)
            except ParseError:
                answer, reasoning = None, ""
                continue
            if answer is None or 0 <= answer < max(len(self.candidates), 1):
                break
            answer = None
        if answer is None and reasoning:
            # Last resort: support counts for each candidate named in the text.
            counts = [reasoning.lower().count(c.lower()) for c in self.candidates]
            if counts and max(counts) > 0:
                answer = counts.index(max(counts))
        self._trace("master", "final_decision", {"answer": answer},
                    tokens_in, self.token_model.text_tokens(raw),
                    state_hash(self.trunk), _result_hash(raw))
        return answer, reasoning

    # ------------------------------------------------------------- workers

    def _worker_request(self, env: EnvState, obs: Observation, prev_summary: str,
                        last_frames) -> PolicyRequest:
        pos = obs.position
        text = fill_template("worker_step", {
            "search_task": self.search_task,
            "query": self.query,
            "start": f"{pos.start_s:.1f}",
            "end": f"{pos.end_s:.1f}",
            "pct": f"{100.0 * pos.width / self.span.duration_s:.2f}%",
            "K": self.config.k,
            "context_str": self._context_str(obs),
            "prev_summary": prev_summary,
        })
        images = [obs.grid]
        if last_frames:
            if len(last_frames) == 1:
                images.append(last_frames[0])
            else:
                labels = [f"{f.timestamp_s:.1f}s" for f in last_frames]
                images.append(compose_row(list(last_frames), labels,
                                          tile_px=self.config.tile_px))
        return PolicyRequest("worker_step", text, images=images, context={
            "cells": self._cells_ctx(obs),
            "available": sorted(a.value for a in obs.available_actions),
            "assigned": (env.assigned_interval.start_s, env.assigned_interval.end_s),
            "evidence_ts": self._evidence_ts(env),
            "last_zoom_t": env._last_zoom.timestamp_s if env._last_zoom else None,
            "mode": env.mode,
        })

    def _run_worker(self, slot: int, target, mode: str, budget: int) -> WorkerOutcome:
        outcome = WorkerOutcome(slot=slot, target=target, mode=mode)
        env = self.trunk.fork(mode=mode)
        if mode == "dfs" and isinstance(target, CellAddress) and target.depth == 1:
            # Enter from the root view and navigate in; keeps worker cost
            # proportional to hierarchy depth and reuses the probed root grid.
            env.assigned_interval = cell_interval(self.span, target)
        else:
            env.root_at(target)
        base_evidence = len(env.scratchpad)
        actor = f"worker:{slot}"
        prev_summary = "(first step)"
        last_frames: tuple = ()
        parse_strikes = 0
        try:
            for _ in range(budget):
                obs = self._observe(env)
                request = self._worker_request(env, obs, prev_summary, last_frames)
                response = self._call_policy(request, actor)
                outcome.tokens_in += response.tokens_in
                outcome.tokens_out += response.tokens_out
                outcome.requests += 1
                action: Action | None = None
                try:
                    action = parse_worker_action(response.raw_text)
                except ParseError:
                    parse_strikes += 1
                    action = None
                if action is not None and action.kind not in obs.available_actions:
                    parse_strikes += 1
                    action = None
                if action is None:
                    if parse_strikes >= 2:
                        action = Action(ActionKind.FINISHED)
                    else:
                        outcome.steps += 1
                        prev_summary = "previous reply was not a valid action"
                        self._trace(actor, "invalid_reply", {},
                                    response.tokens_in, response.tokens_out,
                                    state_hash(env), _result_hash(response.raw_text),
                                    sink=outcome.trace)
                        continue
                try:
                    result = step(env, action)
                except EnvError as exc:
                    parse_strikes += 1
                    outcome.steps += 1
                    prev_summary = f"rejected: {exc}"
                    self._trace(actor, "rejected_action",
                                {"kind": action.kind.value, "error": str(exc)},
                                response.tokens_in, response.tokens_out,
                                state_hash(env), _result_hash(str(exc)),
                                sink=outcome.trace)
                    if parse_strikes >= 2:
                        result = step(env, Action(ActionKind.FINISHED))
                    else:
                        continue
                outcome.steps += 1
                if result.kind is ActionKind.EXPAND:
                    outcome.expands += 1
                outcome.max_depth_seen = max(outcome.max_depth_seen, env.depth)
                args = {"kind": result.kind.value}
                if action.cell is not None:
                    args["cell"] = action.cell
                if action.cells:
                    args["cells"] = list(action.cells)
                if action.direction:
                    args["direction"] = action.direction
                if action.items:
                    args["items"] = [[it.t_s, it.description, it.confidence]
                                     for it in action.items]
                self._trace(actor, result.kind.value, args,
                            response.tokens_in, response.tokens_out,
                            state_hash(env), _result_hash(result.summary),
                            sink=outcome.trace)
                prev_summary = result.summary
                last_frames = result.frames
                if result.terminal:
                    outcome.dead_zones.extend(result.dead_zones)
                    break
        except Exception as exc:  # worker failure isolates to its cell
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcome.evidence = env.scratchpad[base_evidence:]
        outcome.promising = list(env.promising_queue)
        return outcome

    # -------------------------------------------------------------- rounds

    def _run_round(self) -> RoundSummary:
        config = self.config
        self.trunk.round_index = self._round
        self._queue.begin_round()
        ranked = self._probe()
        for rank, cid in enumerate(ranked):
            priority = (config.top_n - rank) / config.top_n
            self._queue.set_priority(CellAddress((cid,), config.k), priority)
        def is_dead(target) -> bool:
            coverage = self.trunk.dead_coverage(target_interval(self.span, target))
            return coverage >= config.blackout_theta

        assignments = self._queue.pop_assignments(config.workers, exclude=is_dead)
        mode = self.traversal
        budget = config.dfs_budget if mode == "dfs" else config.bfs_budget
        if len(assignments) <= 1:
            outcomes = [self._run_worker(i, t, mode, budget)
                        for i, t in enumerate(assignments)]
        else:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = [pool.submit(self._run_worker, i, t, mode, budget)
                           for i, t in enumerate(assignments)]
                outcomes = [f.result() for f in futures]
        # Single deterministic merge point: order by target, then commit order.
        outcomes.sort(key=lambda o: _target_sort_key(o.target))
        evidence_added = 0
        for outcome in outcomes:
            for row in outcome.trace:
                self._flush_row(row)
            if outcome.error:
                self._trace(f"worker:{outcome.slot}", "worker_error",
                            {"error": outcome.error}, 0, 0,
                            state_hash(self.trunk), _result_hash(outcome.error))
            self.worker_tokens += outcome.tokens_in + outcome.tokens_out
            self.total_steps += outcome.steps
            for item in outcome.evidence:
                label = self._next_label()
                self.trunk.scratchpad.append(EvidenceItem(
                    image=item.image, subtitle=item.subtitle,
                    timestamp_s=item.timestamp_s, confidence=item.confidence,
                    description=item.description, label=label))
                evidence_added += 1
            for zone in outcome.dead_zones:
                add_dead_zone(self.trunk, zone, self._round)
            for target in outcome.promising:
                self._queue.add_fifo(target)
            self._queue.clear_virtual(outcome.target)
            if outcome.promising:
                self._queue.retire(outcome.target)
        self.critical_path_steps += max((o.steps for o in outcomes), default=0)
        verdict = self._uncertainty()
        if isinstance(verdict, UncertaintyContinue):
            self._apply_continue(verdict)
            decision = "continue"
        else:
            decision = "final"
            self._stop_reason = STOP_SUFFICIENCY
        summary = RoundSummary(
            round_index=self._round,
            assigned=[_target_key(o.target) for o in outcomes],
            evidence_added=evidence_added,
            dead_zone_total_s=self.trunk.dead_measure(),
            worker_steps=[o.steps for o in outcomes],
            decision=decision,
        )
        self.round_summaries.append(summary)
        return summary

    def _next_label(self) -> str:
        label = label_for(self.trunk._label_counter)
        self.trunk._label_counter += 1
        return label

    # ----------------------------------------------------------------- run

    def run(self) -> EpisodeResult:
        self._round = 0
        try:
            if self._tokens_used() >= self.config.token_budget:
                self._stop_reason = STOP_GLOBAL_BUDGET
            else:
                self._extract_search_task()
            while (self._stop_reason is None
                   and self._round < self.config.max_rounds):
                if self._tokens_used() >= self.config.token_budget:
                    self._stop_reason = STOP_GLOBAL_BUDGET
                    break
                self._round += 1
                self._run_round()
            if self._stop_reason is None:
                self._stop_reason = STOP_WORKER_BUDGET
            answer, _ = self._final_decision()
        finally:
            if self._trace_file:
                self._trace_file.close()
        correct = None
        if self.answer_index is not None:
            correct = answer == self.answer_index
        total = self.master_tokens + self.worker_tokens
        hit_rate = self.cache.hits / self.cache.total if self.cache.total else 0.0
        return EpisodeResult(
            answer=answer,
            correct=correct,
            rounds=self._round,
            stop_reason=self._stop_reason,
            evidence_count=len(self.trunk.scratchpad),
            master_tokens=self.master_tokens,
            worker_tokens=self.worker_tokens,
            total_tokens=total,
            effective_tokens=total - self.cache.hits,
            cache_hit_rate=hit_rate,
            total_steps=self.total_steps,
            critical_path_steps=self.critical_path_steps,
            requests=self.cache.requests,
            search_task=self.search_task,
            traversal=self.traversal,
            evidence=[(it.timestamp_s, it.description) for it in self.trunk.scratchpad],
            round_summaries=self.round_summaries,
        )

    # ------------------------------------------------------------ artifacts

    def masked_root_grid(self) -> GridImage:
        return self._observe(self.trunk).grid

    def scratchpad_grid(self) -> GridImage | None:
        return self._scratch_grid()


def run_episode(
    source,
    query: str,
    candidates: list[str],
    config: EpisodeConfig,
    policy,
    cues: list[SubtitleCue] | None = None,
    answer_index: int | None = None,
    trace_path=None,
) -> EpisodeResult:
    return Episode(source, query, candidates, config, policy, cues=cues,
                   answer_index=answer_index, trace_path=trace_path).run()
