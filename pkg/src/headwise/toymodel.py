"""Deterministic synthetic joint-attention workloads.

Q/K/V streams are generated for ``n_timesteps`` x ``n_layers`` and are
open-loop: the plan changes attention outputs, never the next step's
inputs. Each (layer, head) gets a locality length (how fast attention
mass decays with visual token distance) and a drift scale (how much
Q/K/V move between consecutive steps).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .arrowkernel import aggregate_sparsity, dense_flops
from .cache import HeadCache
from .dispatch import CompressionPlan, MaskSet, multi_strategy_attention, plan_flops
from .tensor import AttentionDims, load_dfa2, save_dfa2

INF = math.inf

# multiples of the block size; inf = no positional decay (global head)
_LOCALITY_TEMPLATE = (INF, 0.25, 2.0, 0.5, INF, 1.0, 4.0, 0.25)
_DRIFT_TEMPLATE = (0.02, 0.15, 0.04, 0.3, 0.08, 0.01, 0.2, 0.05)

# logit scale of the positional kernel at distance 0
LOCAL_STRENGTH = 8.0
# logit std contributed by content (non-positional) components
CONTENT_LOGIT_STD = 1.0
TEXT_LOGIT_STD = 1.5


@dataclass(frozen=True)
class HeadProfile:
    locality: float  # decay length in tokens; inf for a global head
    drift: float  # per-step perturbation scale relative to tensor std


@dataclass
class WorkloadConfig:
    n_timesteps: int = 8
    n_layers: int = 4
    n_heads: int = 8
    head_dim: int = 32
    n_visual: int = 256
    n_text: int = 32
    block_size: int = 32
    seed: int = 0
    text_first: bool = False
    profiles: Optional[List[List[HeadProfile]]] = None

    def __post_init__(self):
        for name in ("n_timesteps", "n_layers", "n_heads", "head_dim", "n_visual", "block_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_text < 0:
            raise ValueError("n_text must be >= 0")
        if self.profiles is None:
            self.profiles = default_profiles(self.n_layers, self.n_heads, self.block_size)
        else:
            self.profiles = [
                [p if isinstance(p, HeadProfile) else HeadProfile(**p) for p in row]
                for row in self.profiles
            ]
        if len(self.profiles) != self.n_layers or any(
            len(row) != self.n_heads for row in self.profiles
        ):
            raise ValueError("profiles must be n_layers x n_heads")

    @property
    def dims(self) -> AttentionDims:
        return AttentionDims(
            self.n_heads, self.head_dim, self.n_visual, self.n_text, self.text_first
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = [
            [{"locality": _enc(p.locality), "drift": p.drift} for p in row]
            for row in self.profiles
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadConfig":
        d = dict(d)
        if d.get("profiles") is not None:
            d["profiles"] = [
                [HeadProfile(_dec(p["locality"]), p["drift"]) for p in row]
                for row in d["profiles"]
            ]
        return cls(**d)


def _enc(x: float):
    return "inf" if math.isinf(x) else x


def _dec(x) -> float:
    return INF if x == "inf" else float(x)


def default_profiles(n_layers: int, n_heads: int, block_size: int) -> List[List[HeadProfile]]:
    """Heterogeneous heads; every layer gets a global and a local head."""
    rows = []
    for layer in range(n_layers):
        row = []
        for h in range(n_heads):
            loc = _LOCALITY_TEMPLATE[(h + layer) % len(_LOCALITY_TEMPLATE)]
            drift = _DRIFT_TEMPLATE[(h + 3 * layer) % len(_DRIFT_TEMPLATE)]
            row.append(HeadProfile(loc * block_size, drift))
        if n_heads >= 2:
            # guarantee the mix even when n_heads is shorter than the template
            if not any(math.isinf(p.locality) for p in row):
                row[0] = HeadProfile(INF, row[0].drift)
            if not any(p.locality <= block_size for p in row):
                row[-1] = HeadProfile(0.25 * block_size, row[-1].drift)
        rows.append(row)
    return rows


def with_frozen_heads(config: WorkloadConfig, head: int) -> WorkloadConfig:
    """Copy of ``config`` where ``head`` has zero drift in every layer."""
    profiles = [
        [HeadProfile(p.locality, 0.0) if h == head else p for h, p in enumerate(row)]
        for row in config.profiles
    ]
    d = asdict(config)
    d["profiles"] = profiles
    return WorkloadConfig(**d)


@dataclass
class Workload:
    config: WorkloadConfig
    q: np.ndarray  # [T, L, H, N, d] float32
    k: np.ndarray
    v: np.ndarray

    @property
    def dims(self) -> AttentionDims:
        return self.config.dims

    @property
    def n_timesteps(self) -> int:
        return self.config.n_timesteps

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def block_size(self) -> int:
        return self.config.block_size

    def qkv(self, t: int, layer: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.q[t, layer], self.k[t, layer], self.v[t, layer]

    def stacked(self) -> np.ndarray:
        return np.ascontiguousarray(np.stack([self.q, self.k, self.v], axis=2))

    def save(self, path) -> None:
        """Write ``<path>.dfa2`` plus a ``<path>.json`` config sidecar."""
        path = Path(path)
        save_dfa2(path.with_suffix(".dfa2"), self.stacked())
        path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Workload":
        path = Path(path)
        config = WorkloadConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
        arr = load_dfa2(path.with_suffix(".dfa2"))
        expected = (
            config.n_timesteps,
            config.n_layers,
            3,
            config.n_heads,
            config.n_visual + config.n_text,
            config.head_dim,
        )
        if arr.shape != expected:
            raise ValueError(f"dump shape {arr.shape} does not match config {expected}")
        return cls(config, arr[:, :, 0].copy(), arr[:, :, 1].copy(), arr[:, :, 2].copy())


def _positional_features(rng, n_tokens: int, n_pairs: int, locality: float) -> np.ndarray:
    # random Fourier features of the Laplace kernel exp(-|r| / locality)
    omega = rng.standard_cauchy(n_pairs) / locality
    pos = np.arange(n_tokens, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.cos(pos), np.sin(pos)], axis=1) / math.sqrt(n_pairs)


def _head_tensors(rng, dims: AttentionDims, profile: HeadProfile):
    n, d, n_v = dims.seq_len, dims.head_dim, dims.n_visual
    text = dims.is_text()
    visual_idx = np.flatnonzero(~text)
    text_idx = np.flatnonzero(text)

    # dot(q, k) / sqrt(d) of two N(0, s^2) vectors has std s^2
    content_scale = math.sqrt(CONTENT_LOGIT_STD)
    q = rng.standard_normal((n, d)) * content_scale
    k = rng.standard_normal((n, d)) * content_scale
    if not math.isinf(profile.locality):
        n_pairs = d // 2
        phi = _positional_features(rng, n_v, n_pairs, profile.locality)
        # phi_i . phi_j ~ exp(-|i-j|/locality); scaled so the logit at r=0 is LOCAL_STRENGTH
        gain = math.sqrt(LOCAL_STRENGTH * math.sqrt(d))
        pos = np.zeros((n_v, d))
        pos[:, : 2 * n_pairs] = phi * gain
        q[visual_idx] = 0.5 * q[visual_idx] + pos
        k[visual_idx] = 0.5 * k[visual_idx] + pos
    text_scale = math.sqrt(TEXT_LOGIT_STD)
    q[text_idx] = rng.standard_normal((text_idx.size, d)) * text_scale
    k[text_idx] = rng.standard_normal((text_idx.size, d)) * text_scale
    v = rng.standard_normal((n, d))
    return q, k, v


def generate(config: WorkloadConfig) -> Workload:
    dims = config.dims
    T, L, H = config.n_timesteps, config.n_layers, config.n_heads
    shape = (T, L, H, dims.seq_len, dims.head_dim)
    q = np.empty(shape, dtype=np.float32)
    k = np.empty(shape, dtype=np.float32)
    v = np.empty(shape, dtype=np.float32)
    for layer in range(L):
        for h in range(H):
            profile = config.profiles[layer][h]
            rng = np.random.default_rng([config.seed, layer, h, 0])
            drift_rng = np.random.default_rng([config.seed, layer, h, 1])
            cur = list(_head_tensors(rng, dims, profile))
            for t in range(T):
                if t > 0 and profile.drift > 0:
                    for x in cur:
                        x += profile.drift * x.std() * drift_rng.standard_normal(x.shape)
                q[t, layer, h] = cur[0]
                k[t, layer, h] = cur[1]
                v[t, layer, h] = cur[2]
    return Workload(config, q, k, v)


@dataclass
class PipelineResult:
    outputs: Dict[Tuple[int, int], np.ndarray]
    flops_total: int
    flops_dense: int
    sparsity: float
    wall_time: float
    layer_flops: Dict[Tuple[int, int], int] = field(default_factory=dict)


def check_plan_matches(workload: Workload, plan: CompressionPlan) -> None:
    cfg = workload.config
    if (
        plan.dims.n_heads != cfg.n_heads
        or plan.dims.head_dim != cfg.head_dim
        or plan.dims.n_visual != cfg.n_visual
        or plan.dims.n_text != cfg.n_text
        or plan.n_timesteps != cfg.n_timesteps
        or plan.n_layers != cfg.n_layers
        or plan.block_size != cfg.block_size
    ):
        raise ValueError("plan dimensions do not match the workload")


def run_pipeline(workload: Workload, plan: CompressionPlan) -> PipelineResult:
    check_plan_matches(workload, plan)
    plan.validate()
    dims = workload.dims
    masks = MaskSet(dims, workload.block_size)
    cache = HeadCache()
    dense_layer = dims.n_heads * dense_flops(dims.seq_len, dims.head_dim)
    outputs = {}
    layer_flops = {}
    start = time.perf_counter()
    for (t, layer), heads in plan.items():
        q, k, v = workload.qkv(t, layer)
        outputs[t, layer] = multi_strategy_attention(
            q, k, v, heads, cache, layer, t, block_size=workload.block_size, masks=masks
        )
        layer_flops[t, layer] = plan_flops(heads, dims, workload.block_size, masks)
    wall = time.perf_counter() - start
    total = sum(layer_flops.values())
    dense_total = dense_layer * len(layer_flops)
    return PipelineResult(
        outputs,
        total,
        dense_total,
        aggregate_sparsity([total], [dense_total]),
        wall,
        layer_flops,
    )


def baseline_plan(workload: Workload) -> CompressionPlan:
    cfg = workload.config
    return CompressionPlan.uniform(cfg.dims, cfg.n_timesteps, cfg.n_layers, cfg.block_size)
