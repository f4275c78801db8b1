"""Head-wise multi-strategy attention compression at desk scale."""

from .arrowkernel import (
    ArrowSpec,
    BlockMask,
    build_arrow_mask,
    flops_count,
    sparse_attention_forward,
    sparsity_ratio,
)
from .cache import CacheMiss, HeadCache
from .calibrate import calibrate_model, influence_for_layer, rse
from .dispatch import (
    Arrow,
    Cached,
    CompressionPlan,
    Full,
    HeadStrategy,
    multi_strategy_attention,
    plan_flops,
)
from .plansolver import CostModel, PlanProblem, analytic_costs, brute_force, solve
from .tensor import AttentionDims, attention_reference, matmul, softmax_rows
from .toymodel import Workload, WorkloadConfig, generate, run_pipeline

__all__ = [
    "Arrow",
    "ArrowSpec",
    "AttentionDims",
    "BlockMask",
    "CacheMiss",
    "Cached",
    "CompressionPlan",
    "CostModel",
    "Full",
    "HeadCache",
    "HeadStrategy",
    "PlanProblem",
    "Workload",
    "WorkloadConfig",
    "analytic_costs",
    "attention_reference",
    "brute_force",
    "build_arrow_mask",
    "calibrate_model",
    "flops_count",
    "generate",
    "influence_for_layer",
    "matmul",
    "multi_strategy_attention",
    "plan_flops",
    "rse",
    "run_pipeline",
    "softmax_rows",
    "solve",
    "sparse_attention_forward",
    "sparsity_ratio",
]
__version__ = "0.1.0"
