"""Timings for the hot kernels: numba-jitted vs pure-numpy fallback.

Run: python benchmarks/bench_kernels.py
The same comparison can be forced at package level with ATLAS_NO_NUMBA=1.
"""

import time

import numpy as np

from vidatlas import _kernels


def _best_of(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    try:
        jit_hash, jit_mosaic, jit_scan = _kernels._build_njit()
    except ImportError:
        print("numba not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    rows = []

    for label, nbytes in [("hash 300KB", 307_200), ("hash 20MB", 19_660_800)]:
        buf = rng.integers(0, 256, nbytes, dtype=np.uint8)
        jit_hash(buf, 37632)  # compile before timing
        t_np = _best_of(_kernels.block_hashes_numpy, buf, 37632)
        t_nb = _best_of(jit_hash, buf, 37632)
        assert np.array_equal(_kernels.block_hashes_numpy(buf, 37632),
                              jit_hash(buf, 37632))
        rows.append((label, t_np, t_nb))

    for label, k, tile in [("mosaic 8x8x64px", 8, 64), ("mosaic 8x8x320px", 8, 320)]:
        tiles = rng.integers(0, 256, (k * k, tile, tile, 3), dtype=np.uint8)
        jit_mosaic(tiles, k, 1, 96)
        t_np = _best_of(_kernels.mosaic_numpy, tiles, k, 1, 96)
        t_nb = _best_of(jit_mosaic, tiles, k, 1, 96)
        assert np.array_equal(_kernels.mosaic_numpy(tiles, k, 1, 96),
                              jit_mosaic(tiles, k, 1, 96))
        rows.append((label, t_np, t_nb))

    for label, k, tile in [("tile scan 8x8x320px", 8, 320)]:
        tiles = rng.integers(0, 256, (k * k, tile, tile, 3), dtype=np.uint8)
        canvas = _kernels.mosaic_numpy(tiles, k, 1, 96)
        jit_scan(canvas, k, tile, 1)
        t_np = _best_of(_kernels.tile_nonzero_fractions_numpy, canvas, k, tile, 1)
        t_nb = _best_of(jit_scan, canvas, k, tile, 1)
        assert np.array_equal(_kernels.tile_nonzero_fractions_numpy(canvas, k, tile, 1),
                              jit_scan(canvas, k, tile, 1))
        rows.append((label, t_np, t_nb))

    print(f"{'kernel':<22} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for label, t_np, t_nb in rows:
        print(f"{label:<22} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x")
    print("outputs identical across paths: yes (asserted)")


if __name__ == "__main__":
    main()
