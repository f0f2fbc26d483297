"""Pure arithmetic of the hierarchical time grid: intervals, depths, resolutions.

Every grid splits its interval into k*k equal half-open cells in row-major
order; the final cell of the video closes at the full duration.  No I/O here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class AddressError(ValueError):
    """A cell index or path does not address a valid grid cell."""


@dataclass(frozen=True)
class VideoSpan:
    """Total duration and nominal frame rate of one timeline."""

    duration_s: float
    fps: float = 25.0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    @property
    def frame_count(self) -> int:
        return int(math.floor(self.duration_s * self.fps))

    @property
    def frame_period(self) -> float:
        return 1.0 / self.fps


@dataclass(frozen=True)
class Interval:
    """Half-open time interval [start_s, end_s)."""

    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"empty interval [{self.start_s}, {self.end_s})")

    @property
    def width(self) -> float:
        return self.end_s - self.start_s

    @property
    def midpoint_s(self) -> float:
        return self.start_s + self.width / 2.0

    def contains(self, t: float) -> bool:
        return self.start_s <= t < self.end_s

    def contains_interval(self, other: "Interval") -> bool:
        return self.start_s <= other.start_s and other.end_s <= self.end_s

    def overlaps(self, other: "Interval") -> bool:
        return self.start_s < other.end_s and other.start_s < self.end_s

    def overlap_width(self, other: "Interval") -> float:
        lo = max(self.start_s, other.start_s)
        hi = min(self.end_s, other.end_s)
        return max(0.0, hi - lo)


@dataclass(frozen=True)
class CellAddress:
    """Path of cell indices from the root grid down; empty path is the root."""

    path: tuple[int, ...] = ()
    grid_k: int = 8

    def __post_init__(self):
        if self.grid_k < 2:
            raise AddressError(f"grid_k must be >= 2, got {self.grid_k}")
        n = self.grid_k * self.grid_k
        for idx in self.path:
            if not 0 <= idx < n:
                raise AddressError(f"cell index {idx} out of range for k={self.grid_k}")

    @property
    def depth(self) -> int:
        return len(self.path)

    def child(self, index: int) -> "CellAddress":
        return CellAddress(self.path + (index,), self.grid_k)

    def parent(self) -> "CellAddress":
        if not self.path:
            raise AddressError("root address has no parent")
        return CellAddress(self.path[:-1], self.grid_k)


def _duration(span) -> float:
    return span.duration_s if isinstance(span, VideoSpan) else float(span)


def cell_interval(span: VideoSpan | float, addr: CellAddress) -> Interval:
    """Interval addressed by recursively splitting [0, T) into k*k parts per level."""
    total = _duration(span)
    cells = addr.grid_k * addr.grid_k
    start = 0.0
    width = total
    for idx in addr.path:
        width = width / cells
        start = start + idx * width
    return Interval(start, start + width)


def depth_resolution(span: VideoSpan | float, k: int, d: int) -> float:
    """Per-cell span (seconds) of a grid at depth d: T / k^(2*(d+1))."""
    if d < 0:
        raise ValueError(f"depth must be >= 0, got {d}")
    return _duration(span) / float((k * k) ** (d + 1))


def max_depth(span: VideoSpan, k: int) -> int:
    """Expansions needed to reach single-frame resolution: ceil(log_{k^2}(T*fps))."""
    frames = span.duration_s * span.fps
    if frames < 1:
        raise ValueError("span must contain at least one frame")
    # Guard against ceil() flipping on float noise at exact powers of k^2.
    return math.ceil(math.log(frames) / math.log(k * k) - 1e-12)


def sub_second_depth(span: VideoSpan | float, k: int) -> int:
    """Smallest depth whose per-cell span is at most one second."""
    d = 0
    while depth_resolution(span, k, d) > 1.0:
        d += 1
    return d


def split_interval(interval: Interval, k: int) -> list[tuple[Interval, float]]:
    """Uniform row-major split of an interval into k*k (sub-interval, midpoint) cells."""
    cells = k * k
    width = interval.width / cells
    out = []
    for i in range(cells):
        lo = interval.start_s + i * width
        hi = interval.start_s + (i + 1) * width
        out.append((Interval(lo, hi), lo + width / 2.0))
    return out


def expand_children(
    span: VideoSpan | float, addr: CellAddress
) -> list[tuple[CellAddress, Interval, float]]:
    """The k*k children of a cell: address, interval, and representative midpoint."""
    parent = cell_interval(span, addr)
    out = []
    for i, (ivl, mid) in enumerate(split_interval(parent, addr.grid_k)):
        out.append((addr.child(i), ivl, mid))
    return out


def cell_chain_containing(
    span: VideoSpan | float, k: int, t: float, depth: int
) -> list[CellAddress]:
    """Chain of addresses (depth 1..depth) whose cells contain timestamp t."""
    total = _duration(span)
    if not 0 <= t < total:
        raise AddressError(f"t={t} outside [0, {total})")
    cells = k * k
    chain = []
    addr = CellAddress((), k)
    lo, width = 0.0, total
    for _ in range(depth):
        width = width / cells
        idx = min(max(int((t - lo) / width), 0), cells - 1)
        # Guard the floor against float rounding at cell boundaries.
        while idx > 0 and t < lo + idx * width:
            idx -= 1
        while idx < cells - 1 and t >= lo + (idx + 1) * width:
            idx += 1
        lo = lo + idx * width
        addr = addr.child(idx)
        chain.append(addr)
    return chain
