"""Exact per-layer plan selection as a multiple-choice knapsack.

Each head takes at most one compression method (or stays Full). Total
cost is minimized subject to a layer-wide influence budget ``delta``; a
method whose influence on a head exceeds ``coeff / n_heads * delta`` is
not eligible for that head at all.

Ties in cost are broken by lower total influence, then by the assignment
vector compared head by head, where a method (in candidate order) ranks
before Full. :func:`solve` and :func:`brute_force` accumulate cost and
influence with the same head-ordered sums, so they agree bit for bit.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .arrowkernel import ArrowSpec, build_arrow_mask, dense_flops, flops_count
from .dispatch import Arrow, Cached, Full, HeadStrategy
from .tensor import AttentionDims

BRUTE_FORCE_LIMIT = 10**7
# slack for pruning so float round-off never discards a tying assignment
_PRUNE_TOL = 1e-9


class InstanceTooLarge(ValueError):
    pass


@dataclass
class CostModel:
    methods: List[HeadStrategy]
    costs: List[float]
    full_cost: float = 1.0

    def __post_init__(self):
        if len(self.methods) != len(self.costs):
            raise ValueError("one cost per method required")
        for m, c in zip(self.methods, self.costs):
            if c < 0 or c > self.full_cost:
                raise ValueError(f"cost of {m} must lie in [0, full_cost], got {c}")

    def cost_of(self, method: HeadStrategy) -> float:
        return self.costs[self.methods.index(method)]


@dataclass
class PlanProblem:
    influences: np.ndarray  # [H x M], may hold +inf for unavailable methods
    costs: CostModel
    delta: float
    coeff: float = 1.5

    def __post_init__(self):
        self.influences = np.asarray(self.influences, dtype=np.float64)
        if self.influences.ndim != 2 or self.influences.shape[1] != len(self.costs.methods):
            raise ValueError(
                f"influence grid {self.influences.shape} does not match "
                f"{len(self.costs.methods)} methods"
            )
        if np.any(np.isnan(self.influences)) or np.any(self.influences < 0):
            raise ValueError("influences must be nonnegative")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.coeff < 1:
            raise ValueError("coeff must be >= 1")

    @property
    def n_heads(self) -> int:
        return self.influences.shape[0]

    @property
    def n_methods(self) -> int:
        return self.influences.shape[1]

    @property
    def cap(self) -> float:
        return self.coeff / self.n_heads * self.delta

    def eligible(self) -> np.ndarray:
        # +inf marks an unavailable method, even under an infinite budget
        i = self.influences
        return np.isfinite(i) & (i <= self.cap) & (i <= self.delta)

    def to_json(self) -> str:
        return json.dumps(
            {
                "influences": self.influences.tolist(),
                "methods": [m.label for m in self.costs.methods],
                "costs": self.costs.costs,
                "full_cost": self.costs.full_cost,
                "delta": self.delta,
                "coeff": self.coeff,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PlanProblem":
        d = json.loads(text)
        costs = CostModel(
            [HeadStrategy.parse(m) for m in d["methods"]], d["costs"], d["full_cost"]
        )
        return cls(np.array(d["influences"]), costs, d["delta"], d["coeff"])


@dataclass
class Solution:
    choices: Tuple[Optional[int], ...]  # method index per head, None = Full
    objective: float
    total_influence: float
    plan: Tuple[HeadStrategy, ...] = field(repr=False)
    nodes: int = 0


def assignment_key(problem: PlanProblem, choices: Sequence[Optional[int]]):
    """Sort key of a complete assignment, or None if it is infeasible."""
    full = problem.costs.full_cost
    n_m = problem.n_methods
    elig = problem.eligible()
    cost = 0.0
    infl = 0.0
    for h, m in enumerate(choices):
        if m is None:
            cost += full
            continue
        if not elig[h, m]:
            return None
        cost += problem.costs.costs[m]
        infl += problem.influences[h, m]
    if infl > problem.delta:
        return None
    codes = tuple(n_m if m is None else m for m in choices)
    return (cost, infl, codes)


def _solution(problem, choices, key, nodes=0) -> Solution:
    plan = tuple(Full if m is None else problem.costs.methods[m] for m in choices)
    return Solution(tuple(choices), key[0], key[1], plan, nodes)


def brute_force(problem: PlanProblem) -> Solution:
    """Enumerate every assignment; test oracle for :func:`solve`.

    Vectorized over assignments, but sums run head by head in index order
    exactly like :func:`assignment_key`, so the scores are bit-identical.
    """
    H, M = problem.n_heads, problem.n_methods
    size = (M + 1) ** H
    if size > BRUTE_FORCE_LIMIT:
        raise InstanceTooLarge(f"{size} assignments exceed {BRUTE_FORCE_LIMIT}")
    # codes[:, h] in 0..M, M meaning Full; rows in lexicographic order
    codes = np.array(list(itertools.product(range(M + 1), repeat=H)), dtype=np.int64)
    codes = codes.reshape(size, H)
    elig = problem.eligible()
    cost_table = np.array(list(problem.costs.costs) + [problem.costs.full_cost])
    cost = np.zeros(size)
    infl = np.zeros(size)
    ok = np.ones(size, dtype=bool)
    finite = np.where(np.isfinite(problem.influences), problem.influences, 0.0)
    for h in range(H):
        c = codes[:, h]
        cost += cost_table[c]
        infl += np.append(finite[h], 0.0)[c]
        ok &= np.append(elig[h], True)[c]
    ok &= infl <= problem.delta
    idx = np.flatnonzero(ok)
    # lexsort: last key is primary; rows are already lexicographic by codes
    order = np.lexsort((idx, infl[idx], cost[idx]))
    best = int(idx[order[0]])
    choices = tuple(None if m == M else int(m) for m in codes[best])
    return _solution(problem, choices, assignment_key(problem, choices))


def _head_segments(savings, weights):
    """Upper concave hull of (weight, saving) points for one head.

    Returns the saving available at zero weight and the incremental
    (d_weight, d_saving) segments with decreasing slope.
    """
    pts = [(0.0, 0.0)] + [(w, s) for w, s in zip(weights, savings) if s > 0]
    free = max(s for w, s in pts if w == 0)
    pts = sorted((w, s) for w, s in pts if w > 0 and s > free)
    hull = [(0.0, free)]
    for w, s in pts:
        if s <= hull[-1][1]:
            continue
        while len(hull) >= 2:
            (w1, s1), (w2, s2) = hull[-2], hull[-1]
            # drop hull[-1] if it lies on or below the chord hull[-2] -> (w, s)
            if (s2 - s1) * (w - w1) <= (s - s1) * (w2 - w1):
                hull.pop()
            else:
                break
        hull.append((w, s))
    segs = [(b[0] - a[0], b[1] - a[1]) for a, b in zip(hull, hull[1:])]
    return free, segs


def solve(problem: PlanProblem) -> Solution:
    """Exact branch and bound over heads in index order.

    The bound is the LP relaxation of the remaining multiple-choice
    knapsack (greedy over per-head concave hulls), which never
    overestimates the achievable saving.
    """
    H, M = problem.n_heads, problem.n_methods
    full = problem.costs.full_cost
    costs = problem.costs.costs
    elig = problem.eligible()
    infl = problem.influences

    opts: List[List[int]] = []
    for h in range(H):
        ms = [m for m in range(M) if elig[h, m]]
        # cheaper first so good incumbents show up early
        ms.sort(key=lambda m: (costs[m], infl[h, m], m))
        opts.append(ms)

    hulls = []
    for h in range(H):
        hulls.append(
            _head_segments([full - costs[m] for m in opts[h]], [infl[h, m] for m in opts[h]])
        )

    def lp_saving(start: int, budget: float) -> float:
        total = 0.0
        segs = []
        for h in range(start, H):
            free, hs = hulls[h]
            total += free
            segs.extend(hs)
        segs.sort(key=lambda ws: ws[1] / ws[0], reverse=True)
        for w, s in segs:
            if budget <= 0:
                break
            if w <= budget:
                total += s
                budget -= w
            else:
                total += s * budget / w
                budget = 0.0
        return total

    best_key = None
    best_choices = None
    nodes = 0
    choices: List[Optional[int]] = [None] * H

    def recurse(h: int, cost: float, used: float):
        nonlocal best_key, best_choices, nodes
        nodes += 1
        if h == H:
            key = assignment_key(problem, choices)
            if key is not None and (best_key is None or key < best_key):
                best_key, best_choices = key, tuple(choices)
            return
        if best_key is not None:
            remaining = (H - h) * full
            bound = cost + remaining - lp_saving(h, problem.delta - used)
            if bound > best_key[0] + _PRUNE_TOL * max(1.0, abs(best_key[0])):
                return
        for m in opts[h]:
            new_used = used + infl[h, m]
            if new_used > problem.delta:
                continue
            choices[h] = m
            recurse(h + 1, cost + costs[m], new_used)
        choices[h] = None
        recurse(h + 1, cost + full, used)

    recurse(0, 0.0, 0.0)
    # all-Full is always feasible, so an incumbent exists
    return _solution(problem, best_choices, best_key, nodes)


def analytic_costs(
    dims: AttentionDims, block_size: int, window_set: Sequence[int], include_cached=True
) -> CostModel:
    """FLOPs-ratio latency model: Full 1, Arrow(w) its mask's ratio, Cached 0."""
    dense = dense_flops(dims.seq_len, dims.head_dim)
    methods: List[HeadStrategy] = []
    costs: List[float] = []
    for w in window_set:
        mask = build_arrow_mask(ArrowSpec(w, dims, block_size))
        methods.append(Arrow(w))
        costs.append(flops_count(mask, dims.head_dim) / dense)
    if include_cached:
        methods.append(Cached)
        costs.append(0.0)
    return CostModel(methods, costs, 1.0)
