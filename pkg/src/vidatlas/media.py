"""Frame sources, SRT subtitle handling, and multi-video concatenation.

Frames are square RGB8 rasters at the configured tile edge.  Synthetic
sources are fully deterministic test media with planted glyph events and a
machine-decodable timestamp strip; external media goes through a decoder
subprocess with a fixed CLI contract (input, timestamp, output PNG, edge).
"""

from __future__ import annotations

import math
import os
import re
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field

import numpy as np

from .timeline import Interval

MIN_TILE_PX = 32  # the 32-bit timestamp strip needs one pixel per bit


class MediaError(Exception):
    """Seek/decode failure or malformed media input."""


class DecoderUnavailableError(MediaError):
    """The external decoder executable could not be run at all."""


@dataclass
class Frame:
    """Square RGB8 raster sampled at one timestamp."""

    pixels: np.ndarray
    timestamp_s: float
    sig: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class SubtitleCue:
    index: int
    start_s: float
    end_s: float
    text: str


# ---------------------------------------------------------------------------
# SRT parsing / serialization

_TIME_RE = re.compile(r"^(\d{1,2}):(\d{2}):(\d{2})[,.](\d{1,3})$")


def _parse_srt_time(token: str) -> float | None:
    m = _TIME_RE.match(token.strip())
    if not m:
        return None
    h, mnt, s, ms = m.groups()
    return int(h) * 3600 + int(mnt) * 60 + int(s) + int(ms.ljust(3, "0")) / 1000.0


def parse_srt(data: bytes | str) -> tuple[list[SubtitleCue], int]:
    """Parse SRT blocks; malformed blocks are skipped and counted as warnings.

    Returns (cues sorted by start time, warning count).
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8-sig", errors="replace")
    else:
        text = data.lstrip("﻿")
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    cues: list[SubtitleCue] = []
    warnings = 0
    for block in re.split(r"\n\s*\n", text):
        lines = [ln for ln in block.split("\n") if ln.strip() != ""]
        if not lines:
            continue
        # Index line is optional in the wild; the timing line is what matters.
        timing_at = 0
        if "-->" not in lines[0]:
            timing_at = 1
        if timing_at >= len(lines) or "-->" not in lines[timing_at]:
            warnings += 1
            continue
        left, _, right = lines[timing_at].partition("-->")
        start = _parse_srt_time(left)
        end = _parse_srt_time(right)
        if start is None or end is None or not start < end:
            warnings += 1
            continue
        body = "\n".join(lines[timing_at + 1 :])
        cues.append(SubtitleCue(len(cues) + 1, start, end, body))
    cues.sort(key=lambda c: (c.start_s, c.end_s))
    cues = [SubtitleCue(i + 1, c.start_s, c.end_s, c.text) for i, c in enumerate(cues)]
    return cues, warnings


def _fmt_srt_time(t: float) -> str:
    ms = int(round(t * 1000))
    h, rem = divmod(ms, 3_600_000)
    m, rem = divmod(rem, 60_000)
    s, ms = divmod(rem, 1000)
    return f"{h:02d}:{m:02d}:{s:02d},{ms:03d}"


def serialize_srt(cues: list[SubtitleCue]) -> str:
    blocks = []
    for i, cue in enumerate(cues, start=1):
        blocks.append(f"{i}\n{_fmt_srt_time(cue.start_s)} --> {_fmt_srt_time(cue.end_s)}\n{cue.text}")
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def merge_subtitles(tracks: list[tuple[list[SubtitleCue], float]]) -> list[SubtitleCue]:
    """Shift each track by its offset, merge, sort, and renumber from 1."""
    merged = []
    for cues, offset in tracks:
        for c in cues:
            merged.append((c.start_s + offset, c.end_s + offset, c.text))
    merged.sort(key=lambda item: (item[0], item[1]))
    return [SubtitleCue(i + 1, s, e, txt) for i, (s, e, txt) in enumerate(merged)]


def cues_in_window(cues: list[SubtitleCue], interval: Interval) -> list[SubtitleCue]:
    """Cues whose [start, end) overlaps the window, in order."""
    return [
        c
        for c in cues
        if c.start_s < interval.end_s and interval.start_s < c.end_s
    ]


# ---------------------------------------------------------------------------
# Synthetic media

GLYPHS: dict[str, tuple[int, ...]] = {
    # 8x8 bit patterns, one int per row, MSB = leftmost pixel.
    "cross": (0x18, 0x18, 0x18, 0xFF, 0xFF, 0x18, 0x18, 0x18),
    "box": (0xFF, 0x81, 0x81, 0x81, 0x81, 0x81, 0x81, 0xFF),
    "diamond": (0x18, 0x3C, 0x7E, 0xFF, 0xFF, 0x7E, 0x3C, 0x18),
    "bars": (0xDB, 0xDB, 0xDB, 0xDB, 0xDB, 0xDB, 0xDB, 0xDB),
    "rings": (0x3C, 0x42, 0x99, 0xA5, 0xA5, 0x99, 0x42, 0x3C),
    "wedge": (0x01, 0x03, 0x07, 0x0F, 0x1F, 0x3F, 0x7F, 0xFF),
}

GLYPH_NAMES = tuple(GLYPHS)

_DEFAULT_EVENT_COLOR = (255, 216, 0)


@dataclass(frozen=True)
class SyntheticEvent:
    """A planted glyph, visible within +/- width_s/2 of its center time."""

    t_s: float
    glyph: str
    color: tuple[int, int, int] = _DEFAULT_EVENT_COLOR
    width_s: float = 1.0

    def visible_at(self, t: float) -> bool:
        return abs(t - self.t_s) <= self.width_s / 2.0


@dataclass(frozen=True)
class SyntheticVideoSpec:
    duration_s: float
    seed: int = 0
    fps: float = 25.0
    events: tuple[SyntheticEvent, ...] = ()

    def __post_init__(self):
        for ev in self.events:
            if not 0 <= ev.t_s < self.duration_s:
                raise ValueError(f"event at {ev.t_s}s outside [0, {self.duration_s})")
            if ev.glyph not in GLYPHS:
                raise ValueError(f"unknown glyph {ev.glyph!r}")


def _mix32(x: int) -> int:
    x = (x ^ (x >> 16)) * 0x45D9F3B & 0xFFFFFFFF
    x = (x ^ (x >> 16)) * 0x45D9F3B & 0xFFFFFFFF
    return x ^ (x >> 16)


def _background_color(seed: int, second: int) -> tuple[int, int, int]:
    h = _mix32((seed & 0xFFFFFFFF) * 2654435761 + second * 40503 + 1)
    # Keep channels away from black so blackout scans stay unambiguous.
    return (40 + (h & 0x7F), 40 + ((h >> 8) & 0x7F), 40 + ((h >> 16) & 0x7F))


def snap_to_frame(t: float, fps: float, duration_s: float) -> float:
    """Quantize a timestamp to the nearest frame boundary inside the video."""
    idx = math.floor(t * fps + 0.5)
    idx = min(max(idx, 0), max(int(math.floor(duration_s * fps)) - 1, 0))
    return idx / fps


def _draw_timestamp_strip(pixels: np.ndarray, frame_index: int) -> None:
    tile = pixels.shape[1]
    bit_w = tile // 32
    y = pixels.shape[0] - 1
    for b in range(32):
        bit = (frame_index >> (31 - b)) & 1
        val = 255 if bit else 0
        pixels[y, b * bit_w : (b + 1) * bit_w] = val


def decode_timestamp_strip(frame: Frame, fps: float | None = None) -> int:
    """Recover the frame index burned into the bottom strip of a synthetic frame."""
    pixels = frame.pixels
    tile = pixels.shape[1]
    bit_w = tile // 32
    y = pixels.shape[0] - 1
    idx = 0
    for b in range(32):
        idx = (idx << 1) | (1 if pixels[y, b * bit_w, 0] > 127 else 0)
    return idx


def _draw_glyph(pixels: np.ndarray, glyph: str, color: tuple[int, int, int]) -> None:
    tile = pixels.shape[1]
    region = tile // 3
    cell = max(region // 8, 1)
    y0 = (tile - 8 * cell) // 2
    x0 = (tile - 8 * cell) // 2
    rows = GLYPHS[glyph]
    for r in range(8):
        for c in range(8):
            if rows[r] & (0x80 >> c):
                ys = y0 + r * cell
                xs = x0 + c * cell
                pixels[ys : ys + cell, xs : xs + cell] = color


def synth_frame(spec: SyntheticVideoSpec, t: float, tile_px: int = 320) -> Frame:
    """Deterministic synthetic frame at t (snapped to the nearest frame boundary)."""
    if not 0 <= t < spec.duration_s:
        raise MediaError(f"t={t} outside [0, {spec.duration_s})")
    if tile_px < MIN_TILE_PX:
        raise ValueError(f"tile_px must be >= {MIN_TILE_PX}")
    t = snap_to_frame(t, spec.fps, spec.duration_s)
    pixels = np.empty((tile_px, tile_px, 3), dtype=np.uint8)
    pixels[:] = _background_color(spec.seed, int(math.floor(t)))
    for ev in spec.events:
        if ev.visible_at(t):
            _draw_glyph(pixels, ev.glyph, ev.color)
    _draw_timestamp_strip(pixels, int(math.floor(t * spec.fps)))
    return Frame(pixels, t)


# ---------------------------------------------------------------------------
# Frame sources

class SyntheticSource:
    """Frame source over a SyntheticVideoSpec."""

    def __init__(self, spec: SyntheticVideoSpec):
        self.spec = spec

    @property
    def source_id(self) -> str:
        return f"synthetic:{self.spec.seed}:{self.spec.duration_s}"

    @property
    def duration_s(self) -> float:
        return self.spec.duration_s

    @property
    def fps(self) -> float:
        return self.spec.fps

    def frame(self, t: float, tile_px: int = 320) -> Frame:
        return synth_frame(self.spec, t, tile_px)


class ExternalDecoderSource:
    """Frame source backed by a decoder subprocess.

    Decoder contract: ``decoder <input> <timestamp_s> <output.png> <edge_px>``,
    exit 0 and write a PNG on success.  Results are cached per quantized
    timestamp; identical repeat requests never re-run the decoder.
    """

    def __init__(
        self,
        path: str,
        duration_s: float,
        fps: float = 25.0,
        decoder: tuple[str, ...] = ("vidatlas-decode",),
    ):
        if not os.path.exists(path):
            raise MediaError(f"media file not found: {path}")
        self.path = path
        self._duration = float(duration_s)
        self._fps = float(fps)
        self.decoder = tuple(decoder)
        self.decode_calls = 0
        self._cache: dict[tuple[int, int], Frame] = {}
        self._cache_lock = threading.Lock()
        self._key_locks: dict[tuple[int, int], threading.Lock] = {}

    @property
    def source_id(self) -> str:
        return f"file:{self.path}"

    @property
    def duration_s(self) -> float:
        return self._duration

    @property
    def fps(self) -> float:
        return self._fps

    def _decode(self, t: float, tile_px: int) -> Frame:
        from PIL import Image

        with tempfile.TemporaryDirectory(prefix="vidatlas_dec_") as tmp:
            out_path = os.path.join(tmp, "frame.png")
            cmd = list(self.decoder) + [self.path, f"{t:.6f}", out_path, str(tile_px)]
            try:
                proc = subprocess.run(cmd, capture_output=True, timeout=60)
            except FileNotFoundError as exc:
                raise DecoderUnavailableError(f"decoder not found: {self.decoder[0]}") from exc
            if proc.returncode != 0:
                raise MediaError(
                    f"decoder failed (exit {proc.returncode}) at t={t}: "
                    f"{proc.stderr.decode(errors='replace')[:200]}"
                )
            with Image.open(out_path) as img:
                pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if pixels.shape[:2] != (tile_px, tile_px):
            raise MediaError(f"decoder produced {pixels.shape[:2]}, wanted {(tile_px, tile_px)}")
        return Frame(pixels, t)

    def frame(self, t: float, tile_px: int = 320) -> Frame:
        if not 0 <= t < self._duration:
            raise MediaError(f"t={t} outside [0, {self._duration})")
        t = snap_to_frame(t, self._fps, self._duration)
        key = (int(round(t * self._fps)), tile_px)
        with self._cache_lock:
            cached = self._cache.get(key)
            if cached is not None:
                return cached
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            with self._cache_lock:
                cached = self._cache.get(key)
            if cached is not None:
                return cached
            self.decode_calls += 1
            frame = self._decode(t, tile_px)
            with self._cache_lock:
                self._cache[key] = frame
            return frame


@dataclass(frozen=True)
class ConcatSegment:
    source_id: str
    offset_s: float
    duration_s: float


@dataclass(frozen=True)
class ConcatSource:
    """Segment layout of a concatenated timeline."""

    segments: tuple[ConcatSegment, ...]
    total_s: float

    def __post_init__(self):
        expect = 0.0
        for seg in self.segments:
            if abs(seg.offset_s - expect) > 1e-9:
                raise ValueError(f"segment {seg.source_id} offset {seg.offset_s} != {expect}")
            expect += seg.duration_s
        if abs(expect - self.total_s) > 1e-9:
            raise ValueError(f"segments sum to {expect}, total_s is {self.total_s}")

    def locate(self, t: float) -> tuple[int, float]:
        """Map a global timestamp to (segment index, local timestamp)."""
        if not 0 <= t < self.total_s:
            raise MediaError(f"t={t} outside [0, {self.total_s})")
        for i, seg in enumerate(self.segments):
            if t < seg.offset_s + seg.duration_s:
                return i, t - seg.offset_s
        return len(self.segments) - 1, t - self.segments[-1].offset_s


class ConcatFrameSource:
    """Frame source over back-to-back parts with correct temporal offsets."""

    def __init__(self, parts: list):
        if not parts:
            raise ValueError("need at least one part")
        segs = []
        offset = 0.0
        for p in parts:
            segs.append(ConcatSegment(p.source_id, offset, p.duration_s))
            offset += p.duration_s
        self.parts = list(parts)
        self.concat = ConcatSource(tuple(segs), offset)

    @property
    def source_id(self) -> str:
        return "concat:" + "|".join(s.source_id for s in self.concat.segments)

    @property
    def duration_s(self) -> float:
        return self.concat.total_s

    @property
    def fps(self) -> float:
        return self.parts[0].fps

    def frame(self, t: float, tile_px: int = 320) -> Frame:
        idx, local_t = self.concat.locate(t)
        part = self.parts[idx]
        frame = part.frame(min(local_t, part.duration_s - 1e-9), tile_px)
        return Frame(frame.pixels, self.concat.segments[idx].offset_s + frame.timestamp_s)
