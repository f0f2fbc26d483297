"""Decision backends and their wire formats.

Two policies implement the same interface: a deterministic scripted oracle
for tests (it knows where the synthetic events are planted) and a remote
multimodal chat client.  Both return raw text that flows through the same
parsers, so parsing, token accounting, and cache simulation are identical
for scripted and real runs.
"""

from __future__ import annotations

import base64
import json
import re
import time
from dataclasses import dataclass, field
from importlib import resources

from .env import Action, ActionKind, CommitItem
from .media import SyntheticEvent
from .metrics import TokenModel, count_tokens
from .render import png_bytes
from .timeline import Interval


class TemplateError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class TransportError(RuntimeError):
    pass


ROLES = ("search_task", "probe", "uncertainty", "worker_step", "final_decision")

PLACEHOLDER_NAMES = (
    "query", "candidates", "context_str", "top_n", "N", "search_task",
    "prev_summary", "start", "end", "pct", "K", "evidence_text",
    "progress_text", "evidence_descriptions",
)
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDER_NAMES) + r")\}")


def _load_templates() -> dict[str, str]:
    out = {}
    base = resources.files("vidatlas") / "templates"
    for role in ROLES:
        out[role] = (base / f"{role}.txt").read_text()
    return out


TEMPLATES = _load_templates()


def fill_template(role: str, bindings: dict) -> str:
    """Substitute placeholders byte-exactly; literal JSON braces are untouched."""
    if role not in TEMPLATES:
        raise TemplateError(f"unknown template role {role!r}")
    template = TEMPLATES[role]
    needed = set(_PLACEHOLDER_RE.findall(template))
    missing = needed - set(bindings)
    if missing:
        raise TemplateError(f"missing bindings for {sorted(missing)} in {role!r}")
    return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template)


@dataclass
class PolicyRequest:
    role: str
    text: str
    images: list = field(default_factory=list)
    context: dict = field(default_factory=dict)
    token_estimate: int = 0


@dataclass
class PolicyResponse:
    raw_text: str
    parsed: object = None
    tokens_in: int = 0
    tokens_out: int = 0


# ---------------------------------------------------------------------------
# Parsers: total functions from arbitrary bytes to value-or-ParseError.

def iter_json_objects(text: str, limit: int = 32):
    """Yield JSON objects decoded from balanced '{'-spans, left to right."""
    decoder = json.JSONDecoder()
    pos = 0
    found = 0
    while found < limit:
        start = text.find("{", pos)
        if start < 0:
            return
        try:
            obj, end = decoder.raw_decode(text, start)
        except ValueError:
            pos = start + 1
            continue
        if isinstance(obj, dict):
            found += 1
            yield obj
            pos = start + max(end - start, 1)
        else:
            pos = start + 1


def _as_int(value) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value.strip())
        except ValueError:
            return None
    return None


def _as_float(value) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            return None
    return None


def parse_probe(text: str, top_n: int, valid_ids: set[int] | None = None) -> list[int]:
    """Extract the ranked cell ids from a probe reply.

    Validates the entry count and, when ``valid_ids`` is given, that every id
    is a selectable (in-range, non-blacked) cell.
    """
    if not isinstance(text, str):
        raise ParseError("probe reply is not text", repr(text)[:200])
    for obj in iter_json_objects(text):
        top = obj.get("top")
        if not isinstance(top, list):
            continue
        ids = []
        for entry in top:
            if isinstance(entry, dict):
                cid = _as_int(entry.get("id", entry.get("cell")))
            else:
                cid = _as_int(entry)
            if cid is None:
                raise ParseError(f"non-integer cell id in {entry!r}", text)
            ids.append(cid)
        if len(ids) != top_n:
            raise ParseError(f"expected exactly {top_n} cells, got {len(ids)}", text)
        if len(set(ids)) != len(ids):
            raise ParseError(f"duplicate cell ids {ids}", text)
        if valid_ids is not None:
            bad = [i for i in ids if i not in valid_ids]
            if bad:
                raise ParseError(f"cells {bad} are blacked out or out of range", text)
        return ids
    raise ParseError("no probe JSON object found", text)


_ACTION_ALIASES = {
    "expand": ActionKind.EXPAND,
    "backtrack": ActionKind.BACKTRACK,
    "markpromising": ActionKind.MARK_PROMISING,
    "zoom": ActionKind.ZOOM,
    "investigate": ActionKind.INVESTIGATE,
    "addtoscratchpad": ActionKind.ADD_TO_SCRATCHPAD,
    "finished": ActionKind.FINISHED,
    "finish": ActionKind.FINISHED,
    "finaldecision": ActionKind.FINISHED,
}


def _action_kind(name) -> ActionKind | None:
    if not isinstance(name, str):
        return None
    return _ACTION_ALIASES.get(re.sub(r"[^a-z]", "", name.lower()))


def _parse_items(raw) -> tuple[CommitItem, ...]:
    if not isinstance(raw, list) or not raw:
        raise ParseError("ADD_TO_SCRATCHPAD needs a non-empty items list", repr(raw)[:200])
    items = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ParseError(f"bad scratchpad item {entry!r}")
        t = _as_float(entry.get("t", entry.get("timestamp", entry.get("time"))))
        if t is None:
            raise ParseError(f"scratchpad item missing timestamp: {entry!r}")
        desc = entry.get("desc", entry.get("description", ""))
        conf = _as_float(entry.get("conf", entry.get("confidence", 0.5)))
        items.append(CommitItem(t, str(desc), conf if conf is not None else 0.5))
    return tuple(items)


def parse_worker_action(text: str) -> Action:
    """Map a worker reply to an Action; spelling is case/underscore-insensitive."""
    if not isinstance(text, str):
        raise ParseError("worker reply is not text", repr(text)[:200])
    for obj in iter_json_objects(text):
        if "action" not in obj:
            continue
        kind = _action_kind(obj["action"])
        if kind is None:
            raise ParseError(f"unknown action {obj['action']!r}", text)
        if kind in (ActionKind.EXPAND, ActionKind.ZOOM, ActionKind.INVESTIGATE):
            cell = _as_int(obj.get("cell", obj.get("cell_id", obj.get("id"))))
            if cell is None:
                raise ParseError(f"{kind.value} needs a cell index", text)
            if kind is ActionKind.INVESTIGATE:
                direction = str(obj.get("direction", obj.get("dir", ""))).lower()
                if direction not in ("before", "after"):
                    raise ParseError(f"INVESTIGATE direction must be before/after, "
                                     f"got {direction!r}", text)
                return Action(kind, cell=cell, direction=direction)
            return Action(kind, cell=cell)
        if kind is ActionKind.MARK_PROMISING:
            raw_cells = obj.get("cells", obj.get("cell_ids"))
            if raw_cells is None and "cell" in obj:
                raw_cells = [obj["cell"]]
            if not isinstance(raw_cells, list) or not raw_cells:
                raise ParseError("MARK_PROMISING needs a cells list", text)
            cells = tuple(c for c in (_as_int(v) for v in raw_cells) if c is not None)
            if len(cells) != len(raw_cells):
                raise ParseError(f"non-integer cell in {raw_cells!r}", text)
            return Action(kind, cells=cells)
        if kind is ActionKind.ADD_TO_SCRATCHPAD:
            return Action(kind, items=_parse_items(obj.get("items")))
        return Action(kind)
    raise ParseError("no action JSON object found", text)


@dataclass(frozen=True)
class UncertaintyContinue:
    explore_cells: tuple[int, ...] = ()
    explore_ranges: tuple[Interval, ...] = ()
    erase: tuple[str, ...] = ()
    reasoning: str = ""


@dataclass(frozen=True)
class UncertaintyFinal:
    answer: int | None = None


def parse_uncertainty(text: str, max_range_s: float = 60.0):
    """Parse the per-round analysis: CONTINUE with targets, or FINAL_DECISION."""
    if not isinstance(text, str):
        raise ParseError("uncertainty reply is not text", repr(text)[:200])
    cont = None
    final = None
    for obj in iter_json_objects(text):
        act = obj.get("action")
        if not isinstance(act, str):
            continue
        norm = re.sub(r"[^a-z]", "", act.lower())
        if norm == "continue" and cont is None:
            cont = obj
        elif norm == "finaldecision" and final is None:
            final = obj
    if cont is not None and final is not None:
        raise ParseError("reply contains both CONTINUE and FINAL_DECISION", text)
    if final is not None:
        return UncertaintyFinal(answer=_as_int(final.get("answer")))
    if cont is None:
        raise ParseError("no CONTINUE/FINAL_DECISION object found", text)

    cells: list[int] = []
    ranges: list[Interval] = []
    for entry in cont.get("explore", []) or []:
        cid = _as_int(entry) if not isinstance(entry, dict) else None
        if cid is not None:
            cells.append(cid)
            continue
        if isinstance(entry, dict):
            if "start" in entry or "end" in entry:
                lo = _as_float(entry.get("start"))
                hi = _as_float(entry.get("end"))
                if lo is None or hi is None or not lo < hi:
                    raise ParseError(f"bad explore range {entry!r}", text)
                if hi - lo >= max_range_s:
                    raise ParseError(
                        f"explore range {hi - lo:.1f}s wide, must be < {max_range_s:.0f}s",
                        text)
                ranges.append(Interval(lo, hi))
                continue
            cid = _as_int(entry.get("id", entry.get("cell")))
            if cid is not None:
                cells.append(cid)
                continue
        raise ParseError(f"bad explore entry {entry!r}", text)
    erase = cont.get("erase", []) or []
    if not isinstance(erase, list) or any(not isinstance(e, str) for e in erase):
        raise ParseError(f"bad erase list {erase!r}", text)
    return UncertaintyContinue(
        explore_cells=tuple(cells),
        explore_ranges=tuple(ranges),
        erase=tuple(erase),
        reasoning=str(cont.get("reasoning", "")),
    )


def parse_final(text: str) -> tuple[int | None, str]:
    """Extract (answer index or None for abstention, reasoning)."""
    if not isinstance(text, str):
        raise ParseError("final reply is not text", repr(text)[:200])
    for obj in iter_json_objects(text):
        if "answer" not in obj:
            continue
        raw = obj.get("answer")
        reasoning = str(obj.get("reasoning", ""))
        if raw is None:
            return None, reasoning
        ans = _as_int(raw)
        if ans is None:
            raise ParseError(f"non-integer answer {raw!r}", text)
        return ans, reasoning
    raise ParseError("no answer JSON object found", text)


# ---------------------------------------------------------------------------
# Scripted oracle

@dataclass(frozen=True)
class OracleKnowledge:
    """Ground truth for a synthetic episode: planted events and the right answer."""

    events: tuple[SyntheticEvent, ...]
    answer_index: int
    match_pad_s: float = 0.5

    def covered(self, event: SyntheticEvent, evidence_ts) -> bool:
        window = max(self.match_pad_s, event.width_s / 2.0)
        return any(abs(t - event.t_s) <= window + 1e-9 for t in evidence_ts)


class OraclePolicy:
    """Deterministic stand-in for a multimodal model on synthetic episodes.

    Decisions are pure functions of the request context, so identical
    (spec, seed, config) always produce the identical episode trace.
    """

    def __init__(self, knowledge: OracleKnowledge):
        self.knowledge = knowledge

    def decide(self, request: PolicyRequest) -> PolicyResponse:
        handler = getattr(self, f"_{request.role}", None)
        if handler is None:
            raise ValueError(f"oracle has no handler for role {request.role!r}")
        return PolicyResponse(raw_text=handler(request.context))

    # -- helpers ------------------------------------------------------------

    def _uncovered(self, evidence_ts):
        return [e for e in sorted(self.knowledge.events, key=lambda e: e.t_s)
                if not self.knowledge.covered(e, evidence_ts)]

    @staticmethod
    def _cell_containing(cells, t):
        for cell in cells:
            if cell["start"] <= t < cell["end"]:
                return cell
        return None

    # -- per-role scripts ---------------------------------------------------

    def _search_task(self, ctx) -> str:
        marks = ", ".join(f"a '{e.glyph}' marker near t={e.t_s:.1f}s"
                          for e in self.knowledge.events)
        return (f"Scan the timeline for planted marker glyphs: {marks}. "
                f"Zoom until the glyph shape is unambiguous, then record the "
                f"timestamp and shape name.")

    def _probe(self, ctx) -> str:
        cells = ctx["cells"]
        top_n = ctx["top_n"]
        evidence_ts = ctx.get("evidence_ts", ())
        ranked: list[int] = []
        for e in self._uncovered(evidence_ts):
            cell = self._cell_containing(cells, e.t_s)
            if cell and not cell["blacked"] and cell["index"] not in ranked:
                ranked.append(cell["index"])
        for cell in cells:
            if len(ranked) >= top_n:
                break
            if not cell["blacked"] and cell["index"] not in ranked:
                ranked.append(cell["index"])
        entries = ", ".join('{"id": %d}' % i for i in ranked[:top_n])
        return '{"top": [%s]}' % entries

    def _worker_step(self, ctx) -> str:
        cells = ctx["cells"]
        avail = set(ctx["available"])
        assigned = ctx["assigned"]
        evidence_ts = ctx.get("evidence_ts", ())
        last_zoom_t = ctx.get("last_zoom_t")
        targets = [e for e in self._uncovered(evidence_ts)
                   if assigned[0] <= e.t_s < assigned[1]]
        if not targets:
            return '{"action": "FINISHED"}'
        event = targets[0]
        cell = self._cell_containing(cells, event.t_s)
        if cell is None or cell["blacked"]:
            return '{"action": "FINISHED"}'
        if ctx.get("mode") == "bfs":
            mid = (cell["start"] + cell["end"]) / 2.0
            if abs(mid - event.t_s) <= event.width_s / 2.0:
                return json.dumps({"action": "ADD_TO_SCRATCHPAD", "items": [
                    {"t": round(mid, 3), "desc": f"{event.glyph} marker",
                     "conf": 0.9}]})
            return json.dumps({"action": "MARK_PROMISING", "cells": [cell["index"]]})
        if "EXPAND" in avail:
            return json.dumps({"action": "EXPAND", "cell": cell["index"]})
        if last_zoom_t is not None:
            if abs(last_zoom_t - event.t_s) <= event.width_s / 2.0 + 1e-9:
                return json.dumps({"action": "ADD_TO_SCRATCHPAD", "items": [
                    {"t": round(last_zoom_t, 3), "desc": f"{event.glyph} marker",
                     "conf": 0.9}]})
            return '{"action": "FINISHED"}'
        if "ZOOM" in avail:
            return json.dumps({"action": "ZOOM", "cell": cell["index"]})
        return '{"action": "FINISHED"}'

    def _uncertainty(self, ctx) -> str:
        evidence_ts = ctx.get("evidence_ts", ())
        uncovered = self._uncovered(evidence_ts)
        if not uncovered:
            return '{"action": "FINAL_DECISION"}'
        root_cells = ctx.get("root_cells", ())
        explore = []
        for e in uncovered:
            cell = self._cell_containing(root_cells, e.t_s)
            if cell and not cell["blacked"] and cell["index"] not in explore:
                explore.append(cell["index"])
        if not explore:
            # Remaining events sit inside dead zones; more rounds cannot help.
            return '{"action": "FINAL_DECISION"}'
        return json.dumps({"action": "CONTINUE",
                           "reasoning": "markers still unaccounted for",
                           "explore": explore, "erase": []})

    def _final_decision(self, ctx) -> str:
        evidence_ts = ctx.get("evidence_ts", ())
        if self._uncovered(evidence_ts):
            return json.dumps({"answer": None,
                               "reasoning": "collected evidence does not pin a glyph"})
        times = ", ".join(f"{e.t_s:.1f}s" for e in self.knowledge.events)
        return json.dumps({"answer": self.knowledge.answer_index,
                           "reasoning": f"markers confirmed at {times}"})


# ---------------------------------------------------------------------------
# Remote chat endpoint

class RemotePolicy:
    """Client for a chat-style endpoint with base64 PNG image parts.

    Request body: {"model", "messages": [{"role", "content": [
    {"type": "text", "text"} | {"type": "image", "data_base64_png"}]}],
    "max_tokens"}; response body: {"text", "usage": {"input_tokens",
    "output_tokens"}}.  Transient failures are retried up to ``max_retries``
    times with exponential backoff.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str = "",
        model: str = "default",
        max_tokens: int = 1024,
        timeout_s: float = 120.0,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        token_model: TokenModel | None = None,
        session=None,
    ):
        import requests

        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.max_tokens = max_tokens
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.token_model = token_model or TokenModel()
        self._session = session or requests.Session()

    def _body(self, request: PolicyRequest) -> dict:
        content = []
        for image in request.images:
            data = base64.b64encode(png_bytes(image.pixels)).decode("ascii")
            content.append({"type": "image", "data_base64_png": data})
        content.append({"type": "text", "text": request.text})
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": self.max_tokens,
        }

    def decide(self, request: PolicyRequest) -> PolicyResponse:
        import requests

        headers = {"content-type": "application/json"}
        if self.api_key:
            headers["authorization"] = f"Bearer {self.api_key}"
        body = self._body(request)
        last_error = None
        for attempt in range(self.max_retries):
            if attempt:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(self.endpoint, json=body,
                                          headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = f"transport: {exc}"
                continue
            if resp.status_code >= 500:
                last_error = f"server returned {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(f"endpoint returned {resp.status_code}: "
                                     f"{resp.text[:200]}")
            payload = resp.json()
            text = payload.get("text", "")
            usage = payload.get("usage") or {}
            tokens_in = _as_int(usage.get("input_tokens"))
            tokens_out = _as_int(usage.get("output_tokens"))
            if tokens_in is None:
                tokens_in = count_tokens(request, self.token_model)
            if tokens_out is None:
                tokens_out = self.token_model.text_tokens(text)
            return PolicyResponse(raw_text=text, tokens_in=tokens_in,
                                  tokens_out=tokens_out)
        raise TransportError(f"request failed after {self.max_retries} attempts "
                             f"({last_error})")
