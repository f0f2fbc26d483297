"""Grid-image composition: contact sheets, evidence sheets, burned-in labels.

All text uses a built-in 5x7 bitmap font so output is byte-identical across
platforms.  Each live tile also carries a 1-px binary strip (top row) that
encodes the label text for machine verification without OCR.  Dead tiles are
rendered all-zero; separators are mid-gray so an all-dead grid is still
distinguishable from a missing one.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .media import Frame
from .timeline import Interval

SEPARATOR_PX = 1
SEPARATOR_VALUE = 96
PLACEHOLDER_VALUE = 32

FONT_5X7: dict[str, tuple[int, ...]] = {
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    " ": (0, 0, 0, 0, 0, 0, 0),
    ".": (0, 0, 0, 0, 0, 0x0C, 0x0C),
    ",": (0, 0, 0, 0, 0x0C, 0x04, 0x08),
    ":": (0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0),
    "@": (0x0E, 0x11, 0x17, 0x15, 0x17, 0x10, 0x0E),
    "[": (0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E),
    "]": (0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E),
    "-": (0, 0, 0, 0x1F, 0, 0, 0),
    "+": (0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0),
    "%": (0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13),
    "/": (0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10),
    "?": (0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04),
}


@dataclass(frozen=True)
class LabelStyle:
    scale: int | None = None  # None = auto from tile size
    fg: tuple[int, int, int] = (255, 255, 255)
    bg: tuple[int, int, int] = (0, 0, 0)

    def resolved_scale(self, tile_px: int) -> int:
        scale = self.scale if self.scale is not None else max(1, tile_px // 160)
        # Label text never exceeds 20% of tile height; drop to strip-only if
        # even scale 1 would (tiny test tiles).
        while scale > 1 and 2 + 7 * scale > tile_px // 5:
            scale -= 1
        return scale

    def text_fits(self, tile_px: int) -> bool:
        return 2 + 7 * self.resolved_scale(tile_px) <= tile_px // 5


@dataclass
class CellMeta:
    index: int
    interval: Interval
    midpoint_s: float
    blacked: bool


@dataclass
class GridImage:
    """Composited grid raster plus per-cell metadata."""

    pixels: np.ndarray
    rows: int
    cols: int
    tile_px: int
    cell_meta: list[CellMeta] = field(default_factory=list)
    sig: tuple | None = field(default=None, repr=False, compare=False)
    _hash: str | None = field(default=None, repr=False, compare=False)

    @property
    def k(self) -> int:
        return self.cols

    def content_hash(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            h.update(str(self.pixels.shape).encode())
            h.update(np.ascontiguousarray(self.pixels).data)
            self._hash = h.hexdigest()
        return self._hash


def label_for(index: int) -> str:
    """Spreadsheet-style column name: 0 -> A, 25 -> Z, 26 -> AA, ..."""
    if index < 0:
        raise ValueError("index must be >= 0")
    name = ""
    n = index + 1
    while n > 0:
        n, rem = divmod(n - 1, 26)
        name = chr(ord("A") + rem) + name
    return name


def burn_text(
    pixels: np.ndarray, x: int, y: int, text: str, scale: int,
    fg: tuple[int, int, int], bg: tuple[int, int, int],
) -> None:
    """Draw 5x7 bitmap text onto a raster in place, clipped at the edges."""
    h, w = pixels.shape[:2]
    glyph_w = 6 * scale
    bg_w = min(len(text) * glyph_w + scale, w - x)
    bg_h = min(7 * scale + 2, h - y)
    if bg_w <= 0 or bg_h <= 0:
        return
    pixels[y : y + bg_h, x : x + bg_w] = bg
    for ci, ch in enumerate(text.upper()):
        rows = FONT_5X7.get(ch, FONT_5X7["?"])
        gx = x + ci * glyph_w + scale
        for r in range(7):
            for c in range(5):
                if rows[r] & (0x10 >> c):
                    ys = y + 1 + r * scale
                    xs = gx + c * scale
                    if ys + scale <= h and xs + scale <= w:
                        pixels[ys : ys + scale, xs : xs + scale] = fg


def _burn_label_strip(pixels: np.ndarray, text: str) -> None:
    # 8 bits per character along the top row; truncated if it would overflow.
    w = pixels.shape[1]
    capacity = w // 8
    data = text.encode("ascii", errors="replace")[:capacity]
    pixels[0, :] = 0
    for ci, byte in enumerate(data):
        for b in range(8):
            if byte & (0x80 >> b):
                pixels[0, ci * 8 + b] = 255


def decode_label_strip(grid: GridImage, cell_index: int) -> str:
    """Read back the label text encoded in a tile's binary strip."""
    tile, sep = grid.tile_px, SEPARATOR_PX
    r, c = divmod(cell_index, grid.cols)
    y = sep + r * (tile + sep)
    x = sep + c * (tile + sep)
    row = grid.pixels[y, x : x + tile, 0]
    out = bytearray()
    for ci in range(tile // 8):
        byte = 0
        for b in range(8):
            if row[ci * 8 + b] > 127:
                byte |= 0x80 >> b
        if byte == 0:
            break
        out.append(byte)
    return out.decode("ascii", errors="replace")


def _prepare_tile(
    frame: Frame | None, label: str, caption: str | None, dead: bool,
    tile_px: int, style: LabelStyle,
) -> np.ndarray:
    if dead:
        return np.zeros((tile_px, tile_px, 3), dtype=np.uint8)
    if frame is None:
        tile = np.full((tile_px, tile_px, 3), PLACEHOLDER_VALUE, dtype=np.uint8)
    else:
        if frame.pixels.shape != (tile_px, tile_px, 3):
            raise ValueError(f"frame is {frame.pixels.shape}, tile wants {tile_px}")
        tile = frame.pixels.copy()
    _burn_label_strip(tile, label)
    if style.text_fits(tile_px):
        scale = style.resolved_scale(tile_px)
        burn_text(tile, 2, 2, label, scale, style.fg, style.bg)
        if caption:
            burn_text(tile, 2, 2 + 7 * scale + 3, caption, scale, style.fg, style.bg)
    return tile


def compose_grid(
    frames: list[Frame | None],
    labels: list[str],
    dead_mask: list[bool],
    *,
    k: int,
    tile_px: int,
    cell_meta: list[CellMeta] | None = None,
    captions: list[str] | None = None,
    style: LabelStyle | None = None,
) -> GridImage:
    """Row-major k x k contact sheet with labels burned in and dead cells blacked."""
    n = k * k
    if not (len(frames) == len(labels) == len(dead_mask) == n):
        raise ValueError(f"expected {n} frames/labels/flags, got "
                         f"{len(frames)}/{len(labels)}/{len(dead_mask)}")
    if captions is not None and len(captions) != n:
        raise ValueError("captions length mismatch")
    style = style or LabelStyle()
    tiles = np.empty((n, tile_px, tile_px, 3), dtype=np.uint8)
    for i in range(n):
        cap = captions[i] if captions else None
        tiles[i] = _prepare_tile(frames[i], labels[i], cap, dead_mask[i], tile_px, style)
    canvas = _kernels.mosaic(tiles, k, SEPARATOR_PX, SEPARATOR_VALUE)
    meta = cell_meta if cell_meta is not None else []
    return GridImage(canvas, k, k, tile_px, meta)


def compose_row(
    frames: list[Frame],
    labels: list[str],
    *,
    tile_px: int,
    style: LabelStyle | None = None,
) -> GridImage:
    """1 x N strip of frames (temporal context scans)."""
    if not frames:
        raise ValueError("empty strip")
    style = style or LabelStyle()
    n = len(frames)
    sep = SEPARATOR_PX
    h = tile_px + 2 * sep
    w = n * tile_px + (n + 1) * sep
    canvas = np.full((h, w, 3), SEPARATOR_VALUE, dtype=np.uint8)
    for i, frame in enumerate(frames):
        tile = _prepare_tile(frame, labels[i], None, False, tile_px, style)
        x = sep + i * (tile_px + sep)
        canvas[sep : sep + tile_px, x : x + tile_px] = tile
    return GridImage(canvas, 1, n, tile_px, [])


def render_scratchpad(items: list, *, tile_px: int, style: LabelStyle | None = None) -> GridImage:
    """Evidence sheet: smallest square grid of all items, labels burned in.

    Items are duck-typed: .image (Frame), .label, .timestamp_s, .subtitle.
    """
    if not items:
        raise ValueError("cannot render an empty scratchpad")
    side = 1
    while side * side < len(items):
        side += 1
    frames: list[Frame | None] = []
    labels: list[str] = []
    captions: list[str] = []
    dead: list[bool] = []
    for i in range(side * side):
        if i < len(items):
            item = items[i]
            frames.append(item.image)
            labels.append(f"[{getattr(item, 'label', None) or label_for(i)}]")
            sub_line = (item.subtitle or "").split("\n")[0][:24]
            captions.append(f"@{item.timestamp_s:.1f}S {sub_line}".rstrip())
            dead.append(False)
        else:
            frames.append(None)
            labels.append("")
            captions.append("")
            dead.append(True)
    return compose_grid(frames, labels, dead, k=side, tile_px=tile_px,
                        captions=captions, style=style)


def tile_nonzero_fractions(grid: GridImage) -> np.ndarray:
    """Per-cell fraction of non-black pixels (separator lines excluded)."""
    return _kernels.tile_nonzero_fractions(grid.pixels, grid.cols, grid.tile_px, SEPARATOR_PX)


def png_bytes(pixels: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, "PNG")
    return buf.getvalue()


def save_png(obj: GridImage | Frame | np.ndarray, path) -> None:
    pixels = obj if isinstance(obj, np.ndarray) else obj.pixels
    with open(path, "wb") as f:
        f.write(png_bytes(pixels))
