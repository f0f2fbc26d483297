"""Token cost model, prefix-cache simulator, and scaling-law fits.

The cache simulator models block-level prefix reuse: every request is
serialized part by part (images first, then text, matching the wire order),
hashed in fixed token-sized blocks, and chained from the start of the
request.  A block counts as a hit when its whole prefix chain has been seen
before, which is exactly how shared leading image tokens get reused across
requests that differ only in trailing text.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

_M64 = (1 << 64) - 1
_CHAIN_SEED = 0x51ED270B


def _chain_mix(chain: int, content: int) -> int:
    return ((chain ^ content) * 0x9E3779B97F4A7C15 + 0x165667B19E3779F9) & _M64


@dataclass(frozen=True)
class TokenModel:
    """Deterministic stand-in for backbone tokenizers."""

    image_patch_px: int = 28
    text_bytes_per_token: int = 4

    def text_tokens(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / self.text_bytes_per_token)

    def image_tokens(self, height: int, width: int) -> int:
        p = self.image_patch_px
        return math.ceil(width / p) * math.ceil(height / p)


def count_tokens(request, model: TokenModel | None = None) -> int:
    """Modeled input size of a policy request: text plus attached images."""
    model = model or TokenModel()
    total = model.text_tokens(request.text) if request.text else 0
    for image in request.images:
        h, w = image.pixels.shape[:2]
        total += model.image_tokens(h, w)
    return total


def _split_tokens(tokens: int, nblocks: int) -> list[int]:
    base, rem = divmod(tokens, nblocks)
    return [base + (1 if i < rem else 0) for i in range(nblocks)]


def _part_blocks(buf: np.ndarray, tokens: int, block_tokens: int) -> list[tuple[int, int]]:
    """(content hash, token weight) pairs for one request part."""
    if tokens <= 0:
        return []
    nblocks = max(1, math.ceil(tokens / block_tokens))
    chunk_bytes = max(1, math.ceil(buf.size / nblocks)) if buf.size else 1
    if buf.size:
        hashes = _kernels.block_hashes(buf, chunk_bytes)
    else:
        hashes = np.zeros(1, dtype=np.uint64)
    weights = _split_tokens(tokens, len(hashes))
    return [(int(h), w) for h, w in zip(hashes, weights)]


class CacheSim:
    """Prefix-cache model over block hash chains; shared across workers."""

    def __init__(self, block_tokens: int = 16, token_model: TokenModel | None = None):
        if block_tokens <= 0:
            raise ValueError("block_tokens must be positive")
        self.block_tokens = block_tokens
        self.token_model = token_model or TokenModel()
        self.seen: set[int] = set()
        self.hits = 0
        self.total = 0
        self.requests = 0
        self._lock = threading.Lock()

    def _image_blocks(self, image) -> list[tuple[int, int]]:
        params = (self.block_tokens, self.token_model.image_patch_px)
        sig = getattr(image, "sig", None)
        if sig is not None and sig[0] == params:
            return sig[1]
        h, w = image.pixels.shape[:2]
        tokens = self.token_model.image_tokens(h, w)
        blocks = _part_blocks(np.ascontiguousarray(image.pixels, dtype=np.uint8).ravel(),
                              tokens, self.block_tokens)
        try:
            image.sig = (params, blocks)
        except AttributeError:
            pass
        return blocks

    def request_blocks(self, request) -> list[tuple[int, int]]:
        """Ordered (content hash, tokens) blocks for a request's parts."""
        blocks: list[tuple[int, int]] = []
        for image in request.images:
            blocks.extend(self._image_blocks(image))
        text = request.text or ""
        if text:
            buf = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
            blocks.extend(_part_blocks(buf, self.token_model.text_tokens(text),
                                       self.block_tokens))
        return blocks

    def cache_step(self, request) -> tuple[int, int]:
        """Account one request; returns (hit_tokens, miss_tokens)."""
        blocks = self.request_blocks(request)
        chain = _CHAIN_SEED
        hit_tokens = 0
        miss_tokens = 0
        with self._lock:
            for content, weight in blocks:
                chain = _chain_mix(chain, content)
                if chain in self.seen:
                    hit_tokens += weight
                else:
                    self.seen.add(chain)
                    miss_tokens += weight
            self.hits += hit_tokens
            self.total += hit_tokens + miss_tokens
            self.requests += 1
        return hit_tokens, miss_tokens

    def hit_rate(self) -> float:
        if self.total == 0:
            raise ValueError("no tokens accounted yet")
        return self.hits / self.total


@dataclass(frozen=True)
class ScalingPoint:
    duration_s: float
    total_tokens: float
    effective_tokens: float
    hit_rate: float = 0.0

    def __post_init__(self):
        if self.effective_tokens > self.total_tokens:
            raise ValueError("effective tokens cannot exceed total tokens")


@dataclass(frozen=True)
class ScalingFit:
    r2_log: float
    r2_linear: float
    log_coef: tuple[float, float]     # tokens = a + b * ln(T)
    linear_coef: tuple[float, float]  # tokens = a + b * T

    def tokens_at(self, duration_s: float) -> float:
        a, b = self.log_coef
        return a + b * math.log(duration_s)


def _r2(x: np.ndarray, y: np.ndarray) -> tuple[float, tuple[float, float]]:
    b, a = np.polyfit(x, y, 1)
    pred = a + b * x
    sse = float(np.sum((y - pred) ** 2))
    sst = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if sst == 0 and sse == 0 else 1.0 - sse / sst if sst > 0 else 0.0
    return r2, (float(a), float(b))


def fit_scaling(points: list[ScalingPoint]) -> ScalingFit:
    """Least-squares tokens-vs-duration fits on log and linear axes."""
    if len(points) < 4:
        raise ValueError(f"need at least 4 points, got {len(points)}")
    durations = np.array([p.duration_s for p in points], dtype=np.float64)
    if len(set(durations.tolist())) < 4:
        raise ValueError("need at least 4 distinct durations")
    tokens = np.array([p.total_tokens for p in points], dtype=np.float64)
    r2_log, log_coef = _r2(np.log(durations), tokens)
    r2_lin, lin_coef = _r2(durations, tokens)
    return ScalingFit(r2_log, r2_lin, log_coef, lin_coef)


def captioner_tokens(duration_s: float, rate_tokens_per_s: float = 39.0) -> float:
    """Cost model of a linear transcribe-everything baseline pipeline."""
    return rate_tokens_per_s * duration_s


def write_scaling_csv(points: list[ScalingPoint], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["duration_s", "total_tokens", "effective_tokens", "hit_rate"])
        for p in points:
            writer.writerow([p.duration_s, p.total_tokens, p.effective_tokens,
                             f"{p.hit_rate:.6f}"])
