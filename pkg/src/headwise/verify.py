"""Self-check suite behind ``headwise verify``.

Each check returns a :class:`CheckResult`; a fault can be injected to
confirm that the checks actually catch broken kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .arrowkernel import ArrowSpec, BlockMask, build_arrow_mask, sparse_attention_forward
from .cache import CacheMiss, HeadCache
from .dispatch import Arrow
from .plansolver import CostModel, PlanProblem, brute_force, solve
from .tensor import AttentionDims, attention_reference, relative_error, softmax_rows, token_mask

FAULTS = ("mask-off-by-one",)
KERNEL_TOLERANCE = 1e-5
SOFTMAX_TOLERANCE = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""


def split_tokens(n: int) -> tuple:
    """Visual/text split used for a total sequence length ``n``."""
    n_text = max(1, n // 9)
    return n - n_text, n_text


def _kernel_mask(spec: ArrowSpec, fault: Optional[str]) -> BlockMask:
    if fault == "mask-off-by-one":
        spec = ArrowSpec(spec.window_blocks + 1, spec.dims, spec.block_size)
    return build_arrow_mask(spec)


def check_masked_oracle(sizes, blocks=(16, 32, 128), seeds=2, fault=None) -> CheckResult:
    worst = 0.0
    cases = 0
    failures = []
    for n in sizes:
        n_v, n_t = split_tokens(n)
        for b in blocks:
            dims = AttentionDims(1, 16, n_v, n_t)
            max_w = ArrowSpec(0, dims, b).max_window
            for w in sorted({0, 1, 2, max_w}):
                spec = ArrowSpec(w, dims, b)
                mask = build_arrow_mask(spec)
                kmask = _kernel_mask(spec, fault)
                for seed in range(seeds):
                    rng = np.random.default_rng([seed, n, b, w])
                    q, k, v = (rng.standard_normal((n, 16)) for _ in range(3))
                    out = sparse_attention_forward(
                        *(x.astype(np.float32) for x in (q, k, v)), kmask
                    )
                    ref = attention_reference(q[None], k[None], v[None], mask)[0]
                    err = relative_error(out, ref)
                    worst = max(worst, err)
                    cases += 1
                    if err > KERNEL_TOLERANCE:
                        failures.append(f"N={n} B={b} w={w} seed={seed}: {err:.2e}")
    detail = f"max rel err {worst:.2e}"
    if failures:
        detail += f"; {len(failures)} failing, first {failures[0]}"
    return CheckResult("masked-dense oracle", not failures, cases, detail)


def random_problem(rng, max_heads=8, max_methods=3) -> PlanProblem:
    H = int(rng.integers(1, max_heads + 1))
    M = int(rng.integers(1, max_methods + 1))
    costs = sorted(rng.uniform(0, 1, M).tolist())
    if rng.random() < 0.5:
        costs[0] = 0.0
    methods = [Arrow(i) for i in range(M)]
    delta = float(rng.choice([0.0, 0.2, 0.6, 1.0]))
    coeff = float(rng.choice([1.0, 1.5, 2.0]))
    infl = rng.uniform(0, 1, (H, M))
    return PlanProblem(infl, CostModel(methods, costs, 1.0), delta, coeff)


def check_solver(instances=200, seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(instances):
        p = random_problem(rng)
        a, b = solve(p), brute_force(p)
        if a.choices != b.choices or a.objective != b.objective:
            failures += 1
    return CheckResult(
        "brute-force solver oracle", failures == 0, instances, f"{failures} mismatches"
    )


def check_streaming_softmax(sizes, block=16, fault=None) -> CheckResult:
    """Kernel output with V = I is the probability matrix itself."""
    worst = 0.0
    cases = 0
    for n in sizes:
        n_v, n_t = split_tokens(n)
        dims = AttentionDims(1, 8, n_v, n_t)
        for w in (0, 1):
            spec = ArrowSpec(w, dims, block)
            mask = build_arrow_mask(spec)
            rng = np.random.default_rng([n, w])
            q, k = (rng.standard_normal((n, 8)) for _ in range(2))
            eye = np.eye(n)
            probs = sparse_attention_forward(
                q, k, eye, _kernel_mask(spec, fault), merge_runs=False
            )
            scores = (q @ k.T) / np.sqrt(8)
            scores = np.where(token_mask(mask, n), scores, -np.inf)
            two_pass = softmax_rows(scores)
            worst = max(worst, float(np.max(np.abs(probs - two_pass))))
            cases += 1
    return CheckResult(
        "streaming-softmax parity", worst <= SOFTMAX_TOLERANCE, cases, f"max abs err {worst:.2e}"
    )


def check_cache_semantics() -> CheckResult:
    problems = []
    cache = HeadCache()
    x = np.arange(12.0).reshape(3, 4)
    try:
        cache.fetch(0, 0)
        problems.append("fetch on empty cache did not raise")
    except CacheMiss:
        pass
    cache.store(0, 0, x, 3)
    if not np.array_equal(cache.fetch(0, 0), x):
        problems.append("round trip changed the tensor")
    if cache.staleness(0, 0, 5) != 2:
        problems.append("staleness is not t - produced_at")
    cache.store(0, 0, x + 1, 6)
    if not np.array_equal(cache.fetch(0, 0), x + 1) or cache.staleness(0, 0, 7) != 1:
        problems.append("second store did not win")
    cache.store(0, 1, x * 2, 6)
    if not np.array_equal(cache.fetch(0, 0), x + 1):
        problems.append("store to another head disturbed this one")
    return CheckResult("cache semantics", not problems, 5, "; ".join(problems) or "ok")


def run_all(sizes: Sequence[int] = (17, 64, 130), fault: Optional[str] = None,
            solver_instances: int = 200) -> List[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    checks: List[Callable[[], CheckResult]] = [
        lambda: check_masked_oracle(sizes, fault=fault),
        lambda: check_solver(solver_instances),
        lambda: check_streaming_softmax(sizes, fault=fault),
        check_cache_semantics,
    ]
    return [c() for c in checks]
