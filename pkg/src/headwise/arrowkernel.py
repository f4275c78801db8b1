"""Arrow block masks and the block-sparse streaming-softmax kernel."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import AttentionDims, FullyMaskedRowError, ShapeError

DEFAULT_BLOCK = 128


@dataclass(frozen=True, eq=False)
class BlockMask:
    block_size: int
    seq_len: int
    active: np.ndarray  # bool [n_query_blocks, n_key_blocks]

    def __post_init__(self):
        n_blocks = n_blocks_for(self.seq_len, self.block_size)
        if self.active.shape != (n_blocks, n_blocks):
            raise ShapeError(
                f"active grid {self.active.shape} does not match "
                f"ceil({self.seq_len}/{self.block_size}) = {n_blocks}"
            )

    @property
    def n_query_blocks(self) -> int:
        return self.active.shape[0]

    @property
    def n_key_blocks(self) -> int:
        return self.active.shape[1]

    def block_lengths(self) -> np.ndarray:
        lengths = np.full(self.n_query_blocks, self.block_size, dtype=np.int64)
        lengths[-1] = self.seq_len - self.block_size * (self.n_query_blocks - 1)
        return lengths

    def active_positions(self) -> int:
        """Number of (query, key) token pairs covered by active blocks."""
        lengths = self.block_lengths()
        return int(lengths @ self.active.astype(np.int64) @ lengths)

    def __eq__(self, other):
        if not isinstance(other, BlockMask):
            return NotImplemented
        return (
            self.block_size == other.block_size
            and self.seq_len == other.seq_len
            and np.array_equal(self.active, other.active)
        )

    @classmethod
    def full(cls, seq_len: int, block_size: int) -> "BlockMask":
        n = n_blocks_for(seq_len, block_size)
        return cls(block_size, seq_len, np.ones((n, n), dtype=bool))


@dataclass(frozen=True)
class ArrowSpec:
    window_blocks: int
    dims: AttentionDims
    block_size: int = DEFAULT_BLOCK

    @property
    def n_visual_blocks(self) -> int:
        return math.ceil(self.dims.n_visual / self.block_size)

    @property
    def max_window(self) -> int:
        return max(self.n_visual_blocks - 1, 0)

    @property
    def effective_window(self) -> int:
        return min(self.window_blocks, self.max_window)


def n_blocks_for(seq_len: int, block_size: int) -> int:
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    return -(-seq_len // block_size)


def text_blocks(dims: AttentionDims, block_size: int) -> np.ndarray:
    """True for every block holding at least one text token."""
    flags = dims.is_text()
    n = n_blocks_for(dims.seq_len, block_size)
    padded = np.zeros(n * block_size, dtype=bool)
    padded[: flags.size] = flags
    return padded.reshape(n, block_size).any(axis=1)


def build_arrow_mask(spec: ArrowSpec) -> BlockMask:
    if spec.block_size <= 0:
        raise ValueError("block_size must be positive")
    if spec.window_blocks < 0:
        raise ValueError("window_blocks must be nonnegative")
    text = text_blocks(spec.dims, spec.block_size)
    n = text.size
    idx = np.arange(n)
    band = np.abs(idx[:, None] - idx[None, :]) <= spec.effective_window
    # mixed blocks count as text blocks and are computed dense
    active = text[:, None] | text[None, :] | band
    return BlockMask(spec.block_size, spec.dims.seq_len, active)


def flops_count(mask: BlockMask, head_dim: int) -> int:
    """QK^T plus PV multiply-adds over active positions, 2 flops each."""
    return 4 * head_dim * mask.active_positions()


def dense_flops(seq_len: int, head_dim: int) -> int:
    return 4 * head_dim * seq_len * seq_len


def sparsity_ratio(mask: BlockMask) -> float:
    return 1.0 - mask.active_positions() / float(mask.seq_len) ** 2


def aggregate_sparsity(flops: Iterable[int], dense: Iterable[int]) -> float:
    """FLOPs-weighted sparsity; a cached head contributes 0 flops."""
    total = sum(flops)
    base = sum(dense)
    if base == 0:
        raise ValueError("no dense work to compare against")
    return 1.0 - total / base


def active_runs(row: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal runs ``[start, stop)`` of consecutive active key blocks."""
    runs = []
    start = None
    for j, on in enumerate(row):
        if on and start is None:
            start = j
        elif not on and start is not None:
            runs.append((start, j))
            start = None
    if start is not None:
        runs.append((start, len(row)))
    return runs


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("DFA2_THREADS", "1")))
    except ValueError:
        return 1


def _scores_exp(q_blk, k_run, scale, row_max=None):
    """exp(scale * q k^T - max) in place; returns (p, max used)."""
    s = q_blk @ k_run.T
    s *= scale
    m = s.max(axis=1, keepdims=True)
    if row_max is not None:
        np.maximum(m, row_max, out=m)
    s -= m
    np.exp(s, out=s)
    return s, m


def _query_block(q_blk, k, v, row, block_size, seq_len, scale, merge_runs):
    runs = active_runs(row) if merge_runs else [
        (j, j + 1) for j in np.flatnonzero(row)
    ]
    if not runs:
        raise FullyMaskedRowError("query block has no active key block")
    # running state starts from the first run, so no -inf rescale is needed
    m = l = acc = None
    # ascending key-block order keeps accumulation deterministic
    for start, stop in runs:
        lo, hi = start * block_size, min(stop * block_size, seq_len)
        p, m_new = _scores_exp(q_blk, k[lo:hi], scale, m)
        if m is None:
            l = p.sum(axis=1, keepdims=True)
            acc = p @ v[lo:hi]
        else:
            alpha = np.exp(m - m_new)
            l = l * alpha + p.sum(axis=1, keepdims=True)
            acc *= alpha
            acc += p @ v[lo:hi]
        m = m_new
    acc /= l
    return acc


def sparse_attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: BlockMask,
    *,
    threads: Optional[int] = None,
    merge_runs: bool = True,
) -> np.ndarray:
    """Single-head block-sparse attention, ``[N x d]`` in and out.

    Only active tiles are touched; softmax is accumulated online with a
    running max and normalizer per query row, so no ``N x N`` score matrix
    is ever built. ``v`` may have a different width than ``q``/``k``.
    With ``merge_runs`` adjacent active key blocks are fetched as one slab.
    """
    if q.ndim != 2 or q.shape != k.shape or v.shape[0] != q.shape[0]:
        raise ShapeError(f"inconsistent q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    n = q.shape[0]
    if mask.seq_len != n:
        raise ShapeError(f"mask covers {mask.seq_len} tokens, inputs have {n}")
    if not np.all(mask.active.any(axis=1)):
        raise FullyMaskedRowError("mask leaves a query block with no keys")
    b = mask.block_size
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[1]))
    out = np.empty((n, v.shape[1]), dtype=np.result_type(q, v))

    def work(i):
        lo, hi = i * b, min((i + 1) * b, n)
        out[lo:hi] = _query_block(
            q[lo:hi], k, v, mask.active[i], b, n, scale, merge_runs
        )

    n_threads = _env_threads() if threads is None else threads
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(work, range(mask.n_query_blocks)))
    else:
        for i in range(mask.n_query_blocks):
            work(i)
    return out


def dense_tiled_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, block_size: int = DEFAULT_BLOCK
) -> np.ndarray:
    """Unmasked baseline: query tiles against the whole key range."""
    n = q.shape[0]
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[1]))
    out = np.empty((n, v.shape[1]), dtype=np.result_type(q, v))
    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        p, _ = _scores_exp(q[lo:hi], k, scale)
        out[lo:hi] = (p @ v) / p.sum(axis=1, keepdims=True)
    return out


def window_for_sparsity(
    dims: AttentionDims, block_size: int, target: float
) -> Tuple[int, float]:
    """Window whose arrow mask sparsity is closest to ``target``.

    Ties go to the smaller window (higher sparsity).
    """
    best = None
    max_w = ArrowSpec(0, dims, block_size).max_window
    for w in range(max_w + 1):
        s = sparsity_ratio(build_arrow_mask(ArrowSpec(w, dims, block_size)))
        gap = abs(s - target)
        if best is None or gap < best[2] - 1e-15:
            best = (w, s, gap)
    return best[0], best[1]


def masks_for_windows(
    dims: AttentionDims, block_size: int, windows: Sequence[int]
) -> dict:
    return {
        w: build_arrow_mask(ArrowSpec(w, dims, block_size)) for w in sorted(set(windows))
    }
