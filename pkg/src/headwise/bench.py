"""Dense vs arrow block-sparse attention latency at controlled sparsity."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .arrowkernel import (
    DEFAULT_BLOCK,
    ArrowSpec,
    build_arrow_mask,
    dense_tiled_attention,
    sparse_attention_forward,
    sparsity_ratio,
    window_for_sparsity,
)
from .tensor import AttentionDims, attention_reference, relative_error

CSV_COLUMNS = [
    "n_visual",
    "n_text",
    "head_dim",
    "block",
    "target_sparsity",
    "achieved_sparsity",
    "dense_ms",
    "sparse_ms",
    "speedup",
    "ideal",
]
SPARSITY_TOLERANCE = 0.02
ORACLE_TOLERANCE = 1e-5


class UnachievableSparsity(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    n_visual: int = 4096
    n_text: int = 512
    head_dim: int = 64
    block: int = DEFAULT_BLOCK
    sparsity_target: float = 0.5


@dataclass
class BenchResult:
    config: BenchConfig
    window_blocks: int
    achieved_sparsity: float
    dense_ms: float
    sparse_ms: float
    oracle_error: Optional[float] = None

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.sparse_ms

    @property
    def ideal(self) -> float:
        return 1.0 / (1.0 - self.achieved_sparsity)

    def row(self) -> dict:
        c = self.config
        return {
            "n_visual": c.n_visual,
            "n_text": c.n_text,
            "head_dim": c.head_dim,
            "block": c.block,
            "target_sparsity": c.sparsity_target,
            "achieved_sparsity": round(self.achieved_sparsity, 6),
            "dense_ms": round(self.dense_ms, 4),
            "sparse_ms": round(self.sparse_ms, 4),
            "speedup": round(self.speedup, 4),
            "ideal": round(self.ideal, 4),
        }


def standard_configs(n_visual=4096, n_text=512, head_dim=64, block=DEFAULT_BLOCK,
                  targets=(0.0, 0.25, 0.5, 0.75)) -> List[BenchConfig]:
    return [BenchConfig(n_visual, n_text, head_dim, block, s) for s in targets]


def _median_ms(fn: Callable[[], object], iterations: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def run_bench(
    configs: Sequence[BenchConfig],
    iterations: int = 20,
    warmup: int = 3,
    threads: int = 1,
    check: bool = True,
    seed: int = 0,
) -> List[BenchResult]:
    if iterations < 1 or warmup < 0:
        raise ValueError("need at least one timed iteration")
    results = []
    for cfg in configs:
        dims = AttentionDims(1, cfg.head_dim, cfg.n_visual, cfg.n_text)
        window, achieved = window_for_sparsity(dims, cfg.block, cfg.sparsity_target)
        if abs(achieved - cfg.sparsity_target) > SPARSITY_TOLERANCE:
            raise UnachievableSparsity(
                f"closest arrow window {window} gives sparsity {achieved:.4f}, "
                f"target {cfg.sparsity_target} +/- {SPARSITY_TOLERANCE}"
            )
        mask = build_arrow_mask(ArrowSpec(window, dims, cfg.block))
        rng = np.random.default_rng([seed, cfg.n_visual, cfg.n_text, cfg.head_dim])
        n = dims.seq_len
        q, k, v = (rng.standard_normal((n, cfg.head_dim)).astype(np.float32) for _ in range(3))

        dense_ms = _median_ms(
            lambda: dense_tiled_attention(q, k, v, cfg.block), iterations, warmup
        )
        sparse_ms = _median_ms(
            lambda: sparse_attention_forward(q, k, v, mask, threads=threads),
            iterations,
            warmup,
        )
        err = None
        if check:
            out = sparse_attention_forward(q, k, v, mask, threads=threads)
            ref = attention_reference(
                *(x.astype(np.float64)[None] for x in (q, k, v)), mask
            )[0]
            err = relative_error(out, ref)
            if err > ORACLE_TOLERANCE:
                raise AssertionError(
                    f"sparse path disagrees with oracle: rel err {err:.3g} "
                    f"at target sparsity {cfg.sparsity_target}"
                )
        results.append(
            BenchResult(cfg, window, sparsity_ratio(mask), dense_ms, sparse_ms, err)
        )
    return results


def results_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
