"""Command-line entry point: ``headwise {generate,calibrate,run,verify,bench}``.

Exit codes: 0 success, 2 validation error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, planio, verify
from .arrowkernel import DEFAULT_BLOCK, aggregate_sparsity, dense_flops
from .cache import CacheMiss
from .calibrate import DEFAULT_COEFF, DEFAULT_DELTA, calibrate_model, rse
from .dispatch import CompressionPlan, PlanError, plan_flops
from .toymodel import (
    Workload,
    WorkloadConfig,
    baseline_plan,
    generate,
    run_pipeline,
    with_frozen_heads,
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ORACLE = 3

log = logging.getLogger("headwise")


def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_workload_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("workload")
    g.add_argument("--workload", type=Path, help="load a saved workload instead of generating")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--timesteps", type=int, default=8)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--heads", type=int, default=8)
    g.add_argument("--head-dim", type=int, default=32)
    g.add_argument("--visual-tokens", type=int, default=256)
    g.add_argument("--text-tokens", type=int, default=32)
    g.add_argument("--block", type=int, default=32)
    g.add_argument("--text-first", action="store_true", help="put text tokens before visual")
    g.add_argument("--frozen-head", type=int, default=None,
                   help="give this head zero drift in every layer")


def _workload(args) -> Workload:
    if args.workload is not None:
        return Workload.load(args.workload)
    cfg = WorkloadConfig(
        n_timesteps=args.timesteps,
        n_layers=args.layers,
        n_heads=args.heads,
        head_dim=args.head_dim,
        n_visual=args.visual_tokens,
        n_text=args.text_tokens,
        block_size=args.block,
        seed=args.seed,
        text_first=args.text_first,
    )
    if args.frozen_head is not None:
        if not 0 <= args.frozen_head < cfg.n_heads:
            raise ValueError(f"--frozen-head must be in [0, {cfg.n_heads})")
        cfg = with_frozen_heads(cfg, args.frozen_head)
    return generate(cfg)


def plan_sparsity(plan: CompressionPlan) -> float:
    dims = plan.dims
    total = sum(plan_flops(heads, dims, plan.block_size) for _, heads in plan.items())
    dense = dims.n_heads * dense_flops(dims.seq_len, dims.head_dim) * len(plan.layers)
    return aggregate_sparsity([total], [dense])


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1))


def cmd_generate(args) -> int:
    wl = _workload(args)
    wl.save(args.out)
    _emit({"dfa2": str(Path(args.out).with_suffix(".dfa2")),
           "config": str(Path(args.out).with_suffix(".json")),
           "shape": list(wl.stacked().shape)})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if args.delta < 0:
        raise ValueError("--delta must be >= 0")
    if args.coeff < 1:
        raise ValueError("--coeff must be >= 1")
    wl = _workload(args)
    res = calibrate_model(
        wl, args.windows, args.delta, args.coeff,
        include_cached=not args.no_cached, literal_rse=args.literal_rse,
    )
    csv_text = res.influences.to_csv()
    out = Path(args.out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".influence.csv")
    csv_path.write_text(csv_text)
    pf = planio.PlanFile(res.plan, args.delta, args.coeff, res.windows, planio.csv_digest(csv_text))
    planio.save(pf, out)
    _emit({
        "plan": str(out),
        "influence_csv": str(csv_path),
        "sparsity": plan_sparsity(res.plan),
        "strategies": res.plan.strategy_counts(),
        "attention_evaluations": res.attention_evaluations,
        "wall_time": res.wall_time,
    })
    return EXIT_OK


def cmd_run(args) -> int:
    pf = planio.load(args.plan)
    wl = _workload(args)
    result = run_pipeline(wl, pf.plan)
    base = run_pipeline(wl, baseline_plan(wl))
    per_layer = {key: rse(result.outputs[key], base.outputs[key]) for key in base.outputs}
    last = wl.n_layers - 1
    final = [per_layer[t, last] for t in range(wl.n_timesteps)]
    identical = all(np.array_equal(result.outputs[k], base.outputs[k]) for k in base.outputs)
    report = {
        "sparsity": result.sparsity,
        "flops_reduction": 1.0 - result.flops_total / result.flops_dense,
        "flops_total": result.flops_total,
        "flops_dense": result.flops_dense,
        "rse_mean": float(np.mean(list(per_layer.values()))),
        "rse_max": float(np.max(list(per_layer.values()))),
        "final_layer_rse_mean": float(np.mean(final)),
        "bitwise_equal_baseline": identical,
        "wall_time": result.wall_time,
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=1))
    _emit(report)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(args.sizes, fault=args.fault, solver_instances=args.solver_instances)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  cases={r.cases:<4d} {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE


def cmd_bench(args) -> int:
    configs = bench.standard_configs(
        args.visual_tokens, args.text_tokens, args.head_dim, args.block, args.targets
    )
    try:
        results = bench.run_bench(
            configs, args.iterations, args.warmup, args.threads, check=not args.no_check
        )
    except AssertionError as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    text = bench.results_csv(results)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headwise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic workload (DFA2 + JSON)")
    _add_workload_flags(p)
    p.add_argument("--out", required=True, help="output path stem")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="search a compression plan")
    _add_workload_flags(p)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--coeff", type=float, default=DEFAULT_COEFF)
    p.add_argument("--windows", type=_int_list, default=[0, 2],
                   help="arrow window radii in blocks, comma separated")
    p.add_argument("--no-cached", action="store_true", help="drop head caching from the method set")
    p.add_argument("--literal-rse", action="store_true",
                   help="use sum((y_m - mean(y_o))^2) as the RSE numerator")
    p.add_argument("--out", default="plan.json")
    p.add_argument("--csv", default=None, help="influence CSV path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="execute a plan and report sparsity and error")
    _add_workload_flags(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--sizes", type=_int_list, default=[17, 64, 130])
    p.add_argument("--fault", choices=verify.FAULTS, default=None)
    p.add_argument("--solver-instances", type=int, default=200)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="dense vs arrow kernel latency")
    p.add_argument("--visual-tokens", type=int, default=4096)
    p.add_argument("--text-tokens", type=int, default=512)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--block", type=int, default=DEFAULT_BLOCK)
    p.add_argument("--targets", type=_float_list, default=[0.0, 0.25, 0.5, 0.75])
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-check", action="store_true", help="skip the oracle check")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (PlanError, CacheMiss, bench.UnachievableSparsity, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
