"""Hot array kernels with numba-jitted and pure-numpy implementations.

The jitted path is used by default whenever numba imports cleanly; setting
the environment variable ``ATLAS_NO_NUMBA=1`` forces the numpy fallback.
Both paths compute bit-identical results (asserted in tests), so the flag
only affects speed.  ``benchmarks/bench_kernels.py`` compares the two;
``mosaic`` stays on numpy unconditionally because slice assignment beats
the jitted loop there.
"""

from __future__ import annotations

import os

import numpy as np

# FNV-ish polynomial hash constants; arithmetic is mod 2**64 everywhere.
_HASH_MUL = np.uint64(0x100000001B3)
_HASH_OFF = np.uint64(0xCBF29CE484222325)

_POW_CACHE: dict[int, np.ndarray] = {}


def _powers(n: int) -> np.ndarray:
    pows = _POW_CACHE.get(n)
    if pows is None:
        pows = np.empty(n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            p = np.uint64(1)
            for i in range(n):
                pows[i] = p
                p = p * _HASH_MUL
        _POW_CACHE[n] = pows
    return pows


def block_hashes_numpy(buf: np.ndarray, block_bytes: int) -> np.ndarray:
    """Polynomial content hash of each ``block_bytes`` chunk of a uint8 buffer."""
    buf = np.ascontiguousarray(buf, dtype=np.uint8).ravel()
    n = buf.size
    if n == 0:
        return np.empty(0, dtype=np.uint64)
    nblocks = (n + block_bytes - 1) // block_bytes
    out = np.empty(nblocks, dtype=np.uint64)
    pows = _powers(block_bytes)
    full = (n // block_bytes) * block_bytes
    with np.errstate(over="ignore"):
        if full:
            blocks = buf[:full].reshape(-1, block_bytes).astype(np.uint64)
            blocks *= pows[None, :]
            out[: full // block_bytes] = blocks.sum(axis=1, dtype=np.uint64) + _HASH_OFF
        if full < n:
            tail = buf[full:].astype(np.uint64)
            out[-1] = (tail * pows[: n - full]).sum(dtype=np.uint64) + _HASH_OFF
    return out


def mosaic_numpy(tiles: np.ndarray, k: int, sep_px: int, sep_value: int) -> np.ndarray:
    """Tile k*k RGB images row-major into one canvas with separator lines.

    numpy slice assignment is a straight memcpy here and beats the jitted
    loop 3-5x (see benchmarks/bench_kernels.py), so this is the only path.
    """
    n, tile, tile_w, _ = tiles.shape
    side = k * tile + (k + 1) * sep_px
    canvas = np.full((side, side, 3), sep_value, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, k)
        y = sep_px + r * (tile + sep_px)
        x = sep_px + c * (tile + sep_px)
        canvas[y : y + tile, x : x + tile] = tiles[i]
    return canvas


def tile_nonzero_fractions_numpy(canvas: np.ndarray, k: int, tile: int, sep_px: int) -> np.ndarray:
    """Fraction of non-black pixels inside each tile region (separators excluded)."""
    out = np.empty(k * k, dtype=np.float64)
    for i in range(k * k):
        r, c = divmod(i, k)
        y = sep_px + r * (tile + sep_px)
        x = sep_px + c * (tile + sep_px)
        region = canvas[y : y + tile, x : x + tile]
        out[i] = np.count_nonzero(region.any(axis=2)) / float(tile * tile)
    return out


def _build_njit():
    import numba

    @numba.njit(cache=True)
    def block_hashes_nb(buf, block_bytes):  # pragma: no cover - jitted
        n = buf.size
        nblocks = (n + block_bytes - 1) // block_bytes
        out = np.empty(nblocks, dtype=np.uint64)
        for b in range(nblocks):
            lo = b * block_bytes
            hi = min(lo + block_bytes, n)
            h = np.uint64(0)
            p = np.uint64(1)
            for i in range(lo, hi):
                h = h + np.uint64(buf[i]) * p
                p = p * _HASH_MUL
            out[b] = h + _HASH_OFF
        return out

    @numba.njit(cache=True)
    def mosaic_nb(tiles, k, sep_px, sep_value):  # pragma: no cover - jitted
        n, tile, tile_w, _ = tiles.shape
        side = k * tile + (k + 1) * sep_px
        canvas = np.full((side, side, 3), np.uint8(sep_value), dtype=np.uint8)
        for i in range(n):
            r = i // k
            c = i % k
            y0 = sep_px + r * (tile + sep_px)
            x0 = sep_px + c * (tile + sep_px)
            canvas[y0 : y0 + tile, x0 : x0 + tile_w] = tiles[i]
        return canvas

    @numba.njit(cache=True)
    def tile_nonzero_nb(canvas, k, tile, sep_px):  # pragma: no cover - jitted
        out = np.empty(k * k, dtype=np.float64)
        for i in range(k * k):
            r = i // k
            c = i % k
            y0 = sep_px + r * (tile + sep_px)
            x0 = sep_px + c * (tile + sep_px)
            count = 0
            for y in range(y0, y0 + tile):
                for x in range(x0, x0 + tile):
                    if canvas[y, x, 0] != 0 or canvas[y, x, 1] != 0 or canvas[y, x, 2] != 0:
                        count += 1
            out[i] = count / float(tile * tile)
        return out

    def block_hashes_jit(buf, block_bytes):
        return block_hashes_nb(np.ascontiguousarray(buf, dtype=np.uint8).ravel(), block_bytes)

    return block_hashes_jit, mosaic_nb, tile_nonzero_nb


def _flag_disabled() -> bool:
    return os.environ.get("ATLAS_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


USING_NUMBA = False
mosaic = mosaic_numpy  # numpy wins this one on every size; see module docstring
if not _flag_disabled():
    try:
        block_hashes, _, tile_nonzero_fractions = _build_njit()
        USING_NUMBA = True
    except ImportError:
        pass
if not USING_NUMBA:
    block_hashes = block_hashes_numpy
    tile_nonzero_fractions = tile_nonzero_fractions_numpy
