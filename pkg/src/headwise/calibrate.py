"""Single-layer RSE influence and progressive plan calibration.

Calibration walks timesteps and layers in forward order. At each stop it
computes the uncompressed output once, each candidate method once, scores
every (head, method) pair by relative squared error, picks the layer plan
with :func:`plansolver.solve`, and commits that plan's outputs to the live
head cache before moving on.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arrowkernel import ArrowSpec
from .cache import HeadCache
from .dispatch import (
    CACHED,
    Arrow,
    Cached,
    CompressionPlan,
    HeadStrategy,
    MaskSet,
    head_output,
)
from .plansolver import CostModel, PlanProblem, analytic_costs, solve
from .tensor import _attention_head

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.4
DEFAULT_COEFF = 1.5
DEFAULT_WINDOWS = (0, 2)


class DegenerateReference(ValueError):
    """The reference output is constant, so RSE is undefined."""


def rse(y_m: np.ndarray, y_o: np.ndarray, literal: bool = False) -> float:
    """Relative squared error of ``y_m`` against reference ``y_o``.

    ``sum((y_m - y_o)^2) / sum((y_o - mean(y_o))^2)``, accumulated in
    float64 over all elements. ``literal=True`` swaps the numerator for
    ``sum((y_m - mean(y_o))^2)``, which is nonzero even when the outputs
    agree; it is kept only for comparison.
    """
    if y_m.shape != y_o.shape:
        raise ValueError(f"shape mismatch {y_m.shape} vs {y_o.shape}")
    a = np.asarray(y_m, dtype=np.float64)
    b = np.asarray(y_o, dtype=np.float64)
    mean = b.mean()
    denom = float(np.sum((b - mean) ** 2))
    if denom == 0.0:
        raise DegenerateReference("reference output has zero variance")
    num = float(np.sum((a - mean) ** 2)) if literal else float(np.sum((a - b) ** 2))
    return num / denom


@dataclass
class InfluenceTable:
    values: Dict[Tuple[int, int, int, str], float] = field(default_factory=dict)

    def set(self, t, layer, head, method: HeadStrategy, value: float):
        self.values[(t, layer, head, method.label)] = value

    def get(self, t, layer, head, method) -> float:
        label = method.label if isinstance(method, HeadStrategy) else method
        return self.values[(t, layer, head, label)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "layer", "head", "method", "influence"])
        for (t, layer, h, m), val in sorted(self.values.items()):
            w.writerow([t, layer, h, m, repr(float(val))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "InfluenceTable":
        table = cls()
        for row in csv.DictReader(io.StringIO(text)):
            key = (int(row["t"]), int(row["layer"]), int(row["head"]), row["method"])
            table.values[key] = float(row["influence"])
        return table


def candidate_set(windows: Sequence[int], include_cached: bool = True) -> List[HeadStrategy]:
    cands = [Arrow(w) for w in sorted(set(windows))]
    if include_cached:
        cands.append(Cached)
    if not cands:
        raise ValueError("candidate set must not be empty")
    return cands


@dataclass
class LayerMeasurement:
    original: np.ndarray  # [H x N x d]
    candidates: List[HeadStrategy]  # eligible candidates, in order
    outputs: List[np.ndarray]  # one [H x N x d] per eligible candidate
    influences: np.ndarray  # [H x M_eligible]
    evaluations: int


def influence_for_layer(
    q, k, v, candidates: Sequence[HeadStrategy], cache: HeadCache, layer: int, t: int,
    masks: MaskSet, literal: bool = False,
) -> LayerMeasurement:
    """Original output plus one evaluation per eligible candidate.

    A Cached candidate is eligible only if every head of the layer has a
    cache entry; otherwise it is dropped and not evaluated.
    """
    n_heads = q.shape[0]
    original = np.empty(v.shape, dtype=np.result_type(q, k, v))
    for h in range(n_heads):
        original[h] = _attention_head(q[h], k[h], v[h])
    evaluations = 1
    usable = []
    outputs = []
    for cand in candidates:
        if cand.kind == CACHED and not all(cache.has(layer, h) for h in range(n_heads)):
            continue
        out = np.empty_like(original)
        for h in range(n_heads):
            out[h] = head_output(q[h], k[h], v[h], cand, masks, cache, layer, h)
        evaluations += 1
        usable.append(cand)
        outputs.append(out)
    infl = np.empty((n_heads, len(usable)))
    for j, out in enumerate(outputs):
        for h in range(n_heads):
            infl[h, j] = rse(out[h], original[h], literal=literal)
    return LayerMeasurement(original, usable, outputs, infl, evaluations)


@dataclass
class CalibrationResult:
    plan: CompressionPlan
    influences: InfluenceTable
    delta: float
    coeff: float
    windows: Tuple[int, ...]
    candidates: List[HeadStrategy]
    attention_evaluations: int
    expected_evaluations: int
    wall_time: float
    objectives: Dict[Tuple[int, int], float] = field(default_factory=dict)
    spent: Dict[Tuple[int, int], float] = field(default_factory=dict)
    outputs: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)


def _clamped_windows(windows, dims, block_size):
    max_w = ArrowSpec(0, dims, block_size).max_window
    return tuple(sorted({min(int(w), max_w) for w in windows}))


def calibrate_model(
    workload,
    windows: Sequence[int] = DEFAULT_WINDOWS,
    delta: float = DEFAULT_DELTA,
    coeff: float = DEFAULT_COEFF,
    *,
    include_cached: bool = True,
    literal_rse: bool = False,
    costs: Optional[CostModel] = None,
    keep_outputs: bool = False,
) -> CalibrationResult:
    """Search a compression plan timestep by timestep, layer by layer."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if coeff < 1:
        raise ValueError("coeff must be >= 1")
    dims = workload.dims
    block = workload.block_size
    windows = _clamped_windows(windows, dims, block)
    candidates = candidate_set(windows, include_cached)
    if costs is None:
        costs = analytic_costs(dims, block, windows, include_cached)
    masks = MaskSet(dims, block)
    cache = HeadCache()
    plan = CompressionPlan(dims, workload.n_timesteps, workload.n_layers, block)
    table = InfluenceTable()
    result = CalibrationResult(
        plan, table, delta, coeff, windows, candidates, 0, 0, 0.0
    )

    start = time.perf_counter()
    for t in range(workload.n_timesteps):
        for layer in range(workload.n_layers):
            q, k, v = workload.qkv(t, layer)
            meas = influence_for_layer(
                q, k, v, candidates, cache, layer, t, masks, literal=literal_rse
            )
            result.attention_evaluations += meas.evaluations
            result.expected_evaluations += len(meas.candidates) + 1

            grid = np.full((dims.n_heads, len(costs.methods)), np.inf)
            for j, cand in enumerate(meas.candidates):
                col = costs.methods.index(cand)
                grid[:, col] = meas.influences[:, j]
                for h in range(dims.n_heads):
                    table.set(t, layer, h, cand, meas.influences[h, j])
            sol = solve(PlanProblem(grid, costs, delta, coeff))
            plan[t, layer] = sol.plan
            result.objectives[t, layer] = sol.objective
            result.spent[t, layer] = sol.total_influence

            # splice the chosen outputs; identical to running the plan
            live = meas.original.copy()
            for h, s in enumerate(sol.plan):
                if s.kind != "full":
                    live[h] = meas.outputs[meas.candidates.index(s)][h]
            for h, s in enumerate(sol.plan):
                if s.kind != CACHED:
                    cache.store(layer, h, live[h], t)
            if keep_outputs:
                result.outputs[t, layer] = live
            log.debug("t=%d layer=%d plan=%s", t, layer, [s.label for s in sol.plan])
    result.wall_time = time.perf_counter() - start
    return result


def audit_plan(plan: CompressionPlan, table: InfluenceTable, delta: float, coeff: float):
    """Budget and cap violations of ``plan`` against recorded influences."""
    cap = coeff / plan.dims.n_heads * delta
    violations = []
    for (t, layer), heads in plan.items():
        spent = 0.0
        for h, s in enumerate(heads):
            if s.kind == "full":
                continue
            i = table.get(t, layer, h, s)
            spent += i
            if i > cap:
                violations.append((t, layer, h, s.label, "cap", i, cap))
        if spent > delta:
            violations.append((t, layer, None, None, "budget", spent, delta))
    return violations
