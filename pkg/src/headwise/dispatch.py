"""Multi-strategy attention: every head runs Full, Arrow(w) or Cached."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .arrowkernel import (
    ArrowSpec,
    BlockMask,
    build_arrow_mask,
    dense_flops,
    flops_count,
    sparse_attention_forward,
)
from .cache import HeadCache
from .tensor import AttentionDims, ShapeError, _attention_head

FULL = "full"
ARROW = "arrow"
CACHED = "cached"


class PlanError(ValueError):
    """A plan is malformed or cannot run against the given cache."""


@dataclass(frozen=True, order=True)
class HeadStrategy:
    kind: str
    window_blocks: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (FULL, ARROW, CACHED):
            raise PlanError(f"unknown strategy kind {self.kind!r}")
        if (self.kind == ARROW) != (self.window_blocks is not None):
            raise PlanError("window_blocks is required for arrow and only for arrow")
        if self.kind == ARROW and self.window_blocks < 0:
            raise PlanError("window_blocks must be nonnegative")

    @property
    def label(self) -> str:
        return f"arrow:{self.window_blocks}" if self.kind == ARROW else self.kind

    @classmethod
    def parse(cls, label: str) -> "HeadStrategy":
        if label.startswith("arrow:"):
            return cls(ARROW, int(label.split(":", 1)[1]))
        return cls(label)

    def __str__(self):
        return self.label


Full = HeadStrategy(FULL)
Cached = HeadStrategy(CACHED)


def Arrow(window_blocks: int) -> HeadStrategy:
    return HeadStrategy(ARROW, int(window_blocks))


LayerPlan = Tuple[HeadStrategy, ...]


@dataclass
class CompressionPlan:
    """Per-(timestep, layer) head strategies for a whole run."""

    dims: AttentionDims
    n_timesteps: int
    n_layers: int
    block_size: int
    layers: Dict[Tuple[int, int], LayerPlan] = field(default_factory=dict)

    def __getitem__(self, key: Tuple[int, int]) -> LayerPlan:
        return self.layers[key]

    def __setitem__(self, key: Tuple[int, int], plan: Sequence[HeadStrategy]):
        self.layers[key] = tuple(plan)

    def items(self) -> Iterator[Tuple[Tuple[int, int], LayerPlan]]:
        for t in range(self.n_timesteps):
            for layer in range(self.n_layers):
                yield (t, layer), self.layers[(t, layer)]

    @classmethod
    def uniform(cls, dims, n_timesteps, n_layers, block_size, strategy=Full):
        plan = cls(dims, n_timesteps, n_layers, block_size)
        for t in range(n_timesteps):
            for layer in range(n_layers):
                plan[t, layer] = (strategy,) * dims.n_heads
        return plan

    def validate(self) -> None:
        expected = {(t, l) for t in range(self.n_timesteps) for l in range(self.n_layers)}
        if set(self.layers) != expected:
            raise PlanError("plan must cover every (timestep, layer) exactly once")
        max_w = ArrowSpec(0, self.dims, self.block_size).max_window
        computed = set()
        for (t, layer), heads in self.items():
            validate_layer_plan(heads, self.dims.n_heads, max_w)
            for h, s in enumerate(heads):
                if s.kind == CACHED:
                    if t == 0:
                        raise PlanError(f"head {h} of layer {layer} is cached at t=0")
                    if (layer, h) not in computed:
                        raise PlanError(
                            f"head {h} of layer {layer} is cached at t={t} "
                            "before it ever computed"
                        )
                else:
                    computed.add((layer, h))

    def strategy_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for _, heads in self.items():
            for s in heads:
                counts[s.label] = counts.get(s.label, 0) + 1
        return counts


def validate_layer_plan(plan: Sequence[HeadStrategy], n_heads: int, max_window=None):
    if len(plan) != n_heads:
        raise PlanError(f"layer plan has {len(plan)} heads, expected {n_heads}")
    for s in plan:
        if not isinstance(s, HeadStrategy):
            raise PlanError(f"not a HeadStrategy: {s!r}")
        if max_window is not None and s.kind == ARROW and s.window_blocks > max_window:
            raise PlanError(f"window {s.window_blocks} exceeds maximum {max_window}")


class MaskSet:
    """Arrow masks built once per distinct window size."""

    def __init__(self, dims: AttentionDims, block_size: int):
        self.dims = dims
        self.block_size = block_size
        self._masks: Dict[int, BlockMask] = {}

    def __getitem__(self, window: int) -> BlockMask:
        mask = self._masks.get(window)
        if mask is None:
            mask = build_arrow_mask(ArrowSpec(window, self.dims, self.block_size))
            self._masks[window] = mask
        return mask


def head_output(q, k, v, strategy: HeadStrategy, masks: MaskSet, cache, layer, h):
    """Output of one head ``[N x d]`` under ``strategy``."""
    if strategy.kind == FULL:
        return _attention_head(q, k, v)
    if strategy.kind == ARROW:
        return sparse_attention_forward(q, k, v, masks[strategy.window_blocks])
    return cache.fetch(layer, h)


def multi_strategy_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    plan: Sequence[HeadStrategy],
    cache: HeadCache,
    layer: int,
    t: int,
    *,
    block_size: int,
    dims: Optional[AttentionDims] = None,
    masks: Optional[MaskSet] = None,
) -> np.ndarray:
    """Run one attention layer with a per-head strategy; ``[H x N x d]``.

    Computed heads are committed to ``cache`` only after every head has
    run, so a Cached head always reads the previous step's entry.
    """
    if q.ndim != 3 or q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"inconsistent q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    n_heads = q.shape[0]
    validate_layer_plan(plan, n_heads)
    for h, s in enumerate(plan):
        if s.kind == CACHED and not cache.has(layer, h):
            raise PlanError(f"head {h} of layer {layer} is cached but has no entry")
    if masks is None:
        if dims is None:
            raise ValueError("either dims or masks is required")
        masks = MaskSet(dims, block_size)

    out = np.empty(v.shape, dtype=np.result_type(q, k, v))
    for h, s in enumerate(plan):
        out[h] = head_output(q[h], k[h], v[h], s, masks, cache, layer, h)
    for h, s in enumerate(plan):
        if s.kind != CACHED:
            cache.store(layer, h, out[h], t)
    return out


def strategy_flops(strategy: HeadStrategy, dims: AttentionDims, masks: MaskSet) -> int:
    if strategy.kind == FULL:
        return dense_flops(dims.seq_len, dims.head_dim)
    if strategy.kind == ARROW:
        return flops_count(masks[strategy.window_blocks], dims.head_dim)
    return 0


def plan_flops(
    plan: Sequence[HeadStrategy],
    dims: AttentionDims,
    block_size: int,
    masks: Optional[MaskSet] = None,
) -> int:
    masks = masks or MaskSet(dims, block_size)
    return sum(strategy_flops(s, dims, masks) for s in plan)
