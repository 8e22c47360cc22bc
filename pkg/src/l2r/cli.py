"""Command-line surface: generate, train, solve, improve, evaluate, inspect.

Every run writes one manifest next to its outputs recording the command, the
resolved configuration, inputs, outputs, seed, build identifier, and timing.
Timing lives only in the manifest so that repeated runs with the same seed
produce byte-identical artifacts.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from typing import List, Optional, Sequence

import numpy as np

import l2r
from l2r.evaluation import (
    held_karp,
    nearest_neighbor,
    optimality_gap,
    optimality_ratio,
    parallel_map,
    pruned_oracle_experiment,
)
from l2r.instances import (
    CLUSTER_PATTERNS,
    Instance,
    KIND_CVRP,
    KIND_TSP,
    RoutePlan,
    Tour,
    generate_clustered,
    generate_uniform,
    load_instance,
    route_cost,
    tour_length,
)
from l2r.neural_core import ParameterSet
from l2r.prc import ImproveResult, PrcConfig, improve
from l2r.rollout import PolicyBundle, SolveResult, construct
from l2r.static_reduction import build_sparse_graph
from l2r.training import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit(2); remap
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _resolve_workers(value: Optional[int]) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("L2R_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"L2R_WORKERS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _build_id() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"l2r-{l2r.__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"l2r-{l2r.__version__}"


def _write_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(
    anchor: str,
    command: str,
    args: argparse.Namespace,
    inputs: List[str],
    outputs: List[str],
    started: float,
) -> str:
    """One manifest per run, beside the outputs (anchor: a file or directory)."""
    if os.path.isdir(anchor):
        path = os.path.join(anchor, "manifest.json")
    else:
        path = anchor + ".manifest.json"
    resolved = {
        k: v for k, v in vars(args).items() if k != "func" and not callable(v)
    }
    payload = {
        "command": command,
        "config": resolved,
        "inputs": inputs,
        "outputs": outputs,
        "seed": resolved.get("seed"),
        "build_id": _build_id(),
        "timing": {
            "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
            "wall_ms": (time.time() - started) * 1000.0,
        },
    }
    _write_json(path, payload)
    return path


# -----------------------------
# SVG rendering
# -----------------------------

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
)


def _svg_xy(coords: np.ndarray, size: int = 600, margin: int = 20):
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-12))
    scale = (size - 2 * margin) / span
    x = margin + (coords[:, 0] - lo[0]) * scale
    y = size - margin - (coords[:, 1] - lo[1]) * scale  # svg y grows downward
    return x, y


def render_svg(
    instance: Instance,
    order: Optional[Sequence[int]] = None,
    routes: Optional[Sequence[Sequence[int]]] = None,
    candidate_edges: Optional[Sequence[tuple]] = None,
    size: int = 600,
) -> str:
    """A static picture: the tour or routes, plus optional candidate edges."""
    x, y = _svg_xy(instance.coords, size)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if candidate_edges:
        for i, j in candidate_edges:
            parts.append(
                f'<line x1="{x[i]:.1f}" y1="{y[i]:.1f}" x2="{x[j]:.1f}" y2="{y[j]:.1f}" '
                'stroke="#f2a04d" stroke-width="0.8" opacity="0.85"/>'
            )
    if order is not None:
        pts = " ".join(f"{x[i]:.1f},{y[i]:.1f}" for i in order)
        first = order[0]
        parts.append(
            f'<polyline points="{pts} {x[first]:.1f},{y[first]:.1f}" '
            f'fill="none" stroke="{_PALETTE[0]}" stroke-width="1.2"/>'
        )
    if routes is not None:
        for r_i, route in enumerate(routes):
            color = _PALETTE[r_i % len(_PALETTE)]
            seq = [0] + list(route) + [0]
            pts = " ".join(f"{x[i]:.1f},{y[i]:.1f}" for i in seq)
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>'
            )
    radius = 3.0 if instance.n <= 2000 else 1.0
    start = 1 if instance.is_cvrp else 0
    for i in range(start, instance.n):
        parts.append(f'<circle cx="{x[i]:.1f}" cy="{y[i]:.1f}" r="{radius}" fill="#333"/>')
    if instance.is_cvrp:
        parts.append(
            f'<rect x="{x[0] - 5:.1f}" y="{y[0] - 5:.1f}" width="10" height="10" fill="#d62728"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


# -----------------------------
# Subcommands
# -----------------------------


def _cmd_generate(args: argparse.Namespace) -> int:
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    outputs = []
    for i in range(args.count):
        name = f"{args.kind}{args.n}-{args.pattern}-{args.seed}-{i:04d}"
        if args.pattern == "uniform":
            inst = generate_uniform(
                args.kind, args.n, capacity=args.capacity, seed=rng, name=name
            )
        else:
            inst = generate_clustered(
                args.kind, args.n, args.pattern, capacity=args.capacity, seed=rng, name=name
            )
        path = os.path.join(args.out, f"{name}.json")
        inst.save(path)
        outputs.append(path)
    _write_manifest(args.out, "generate", args, [], outputs, started)
    print(f"wrote {len(outputs)} instances to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    base = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    overrides = {
        "kind": args.kind, "n_train": args.n, "epochs": args.epochs,
        "batches_per_epoch": args.batches, "batch_size": args.batch_size,
        "d": args.d, "d_ff": args.d_ff, "layers": args.layers, "k": args.k,
        "gamma": args.gamma, "xi": args.xi, "lr": args.lr,
        "clip_norm": args.clip_norm, "eval_pool_size": args.eval_pool,
        "probe_size": args.probe, "capacity": args.capacity, "seed": args.seed,
        "dtype": args.dtype,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    if args.disable_red_bias:
        base["disable_red_bias"] = True
    if args.disable_loc_bias:
        base["disable_loc_bias"] = True
    config = TrainConfig.from_dict(base)
    os.makedirs(args.out, exist_ok=True)
    _, metrics = train(config, out_dir=args.out)
    outputs = [os.path.join(args.out, "checkpoint.l2r"), os.path.join(args.out, "metrics.jsonl")]
    _write_manifest(args.out, "train", args, [args.config] if args.config else [], outputs, started)
    last = metrics[-1]
    print(json.dumps({"epochs": config.epochs, "final": last}, indent=2))
    return 0


def _load_bundle(args: argparse.Namespace) -> PolicyBundle:
    pset, _ = ParameterSet.load(args.checkpoint)
    return PolicyBundle(
        pset,
        reduction=args.reduction,
        k=args.k,
        gamma=args.gamma,
        disable_red_bias=getattr(args, "disable_red_bias", False),
        disable_loc_bias=getattr(args, "disable_loc_bias", False),
    )


def _solution_payload(instance_path: str, instance: Instance, result: SolveResult) -> dict:
    payload = {
        "instance": instance_path,
        "instance_name": instance.name,
        "kind": result.kind,
        "objective": result.objective,
        "steps": result.steps,
        "fallback_events": result.fallback_events,
    }
    if result.kind == KIND_TSP:
        payload["order"] = [int(i) for i in result.sequence]
    else:
        payload["routes"] = [[int(c) for c in r] for r in result.routes]
    return payload


def _validate_result(instance: Instance, result: SolveResult) -> None:
    if result.kind == KIND_TSP:
        tour_length(instance, result.sequence)  # raises on a non-permutation
    else:
        _, report = route_cost(instance, result.routes)
        if not report.feasible:
            raise RuntimeError(f"internal-error: infeasible solution: {report.violations}")


def _cmd_solve(args: argparse.Namespace) -> int:
    started = time.time()
    instance = load_instance(args.instance)
    bundle = _load_bundle(args)
    graph = build_sparse_graph(instance, bundle.effective_gamma)
    rng = np.random.default_rng(args.seed) if args.mode == "sample" else None
    result = construct(instance, bundle, graph, mode=args.mode, rng=rng)
    _validate_result(instance, result)
    payload = _solution_payload(args.instance, instance, result)
    _write_json(args.out, payload)
    outputs = [args.out]
    if args.svg:
        candidate_edges = None
        if args.svg_candidates:
            first_cand = _first_step_candidates(instance, bundle, graph)
            candidate_edges = [(result.sequence[0], int(j)) for j in first_cand]
        svg = render_svg(
            instance,
            order=result.sequence if result.kind == KIND_TSP else None,
            routes=result.routes,
            candidate_edges=candidate_edges,
        )
        with open(args.svg, "w", encoding="utf-8") as fh:
            fh.write(svg)
        outputs.append(args.svg)
    _write_manifest(args.out, "solve", args, [args.instance, args.checkpoint], outputs, started)
    print(f"objective {result.objective:.6f} steps {result.steps} "
          f"fallbacks {result.fallback_events} -> {args.out}")
    return 0


def _first_step_candidates(instance, bundle, graph) -> np.ndarray:
    res = construct(instance, bundle, graph, mode="greedy", collect_trace=True)
    for rec in res.trace.steps:
        if not rec.forced:
            return rec.cand_idx
    return np.array([], dtype=np.int64)


def _load_solution(path: str, instance: Instance):
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("kind", instance.kind) != instance.kind:
        raise ValueError(f"solution kind {data.get('kind')!r} does not match the instance")
    if instance.kind == KIND_TSP:
        if "order" not in data:
            raise ValueError("invalid-solution: tsp solution file needs an 'order' list")
        order = [int(i) for i in data["order"]]
        return Tour(order=order, objective=tour_length(instance, order))
    if "routes" not in data:
        raise ValueError("invalid-solution: cvrp solution file needs a 'routes' list")
    routes = [[int(c) for c in r] for r in data["routes"]]
    cost, report = route_cost(instance, routes)
    if not report.feasible:
        raise ValueError(f"invalid-solution: {report.violations}")
    return RoutePlan(routes=routes, objective=cost)


def _cmd_improve(args: argparse.Namespace) -> int:
    started = time.time()
    instance = load_instance(args.instance)
    bundle = _load_bundle(args)
    solution = _load_solution(args.solution, instance)
    config = PrcConfig(
        iterations=args.prc_iters,
        max_destroy_len=args.prc_max_destroy,
        segments_per_iter=args.prc_segments,
        seed=args.seed,
    )
    result: ImproveResult = improve(instance, solution, bundle, config)
    payload = {
        "instance": args.instance,
        "instance_name": instance.name,
        "kind": instance.kind,
        "objective": result.objective,
        "initial_objective": result.objectives[0],
        "objectives": result.objectives,
        "accepted": result.accepted,
        "segments": result.segments,
    }
    if instance.kind == KIND_TSP:
        payload["order"] = [int(i) for i in result.solution.order]
    else:
        payload["routes"] = [[int(c) for c in r] for r in result.solution.routes]
    _write_json(args.out, payload)
    _write_manifest(
        args.out, "improve", args,
        [args.instance, args.checkpoint, args.solution], [args.out], started,
    )
    print(f"objective {result.objectives[0]:.6f} -> {result.objective:.6f} "
          f"({result.accepted}/{result.segments} segments accepted)")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.time()
    if args.oracle != "held-karp":
        raise UsageError(f"unknown oracle {args.oracle!r}")
    workers = _resolve_workers(args.workers)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    instances = [
        generate_uniform(KIND_TSP, args.n, seed=rng, name=f"eval-tsp{args.n}-{args.seed}-{i:03d}")
        for i in range(args.count)
    ]
    references = parallel_map(held_karp, instances, workers)

    rows: List[dict] = []
    for inst, ref in zip(instances, references):
        nn = nearest_neighbor(inst, start=0)
        rows.append(
            {
                "instance": inst.name, "method": "nearest-neighbor", "k": None,
                "objective": nn.objective, "reference": ref.objective,
                "gap_pct": optimality_gap(nn.objective, ref.objective),
                "optimality_ratio": None, "fallback_events": 0,
            }
        )
    bundle = None
    if args.checkpoint:
        bundle = _load_bundle(args)
        for inst, ref in zip(instances, references):
            graph = build_sparse_graph(inst, bundle.effective_gamma)
            res = construct(inst, bundle, graph, mode="greedy")
            ratio = (
                optimality_ratio(inst, ref.order, bundle, graph) if args.ratio else None
            )
            rows.append(
                {
                    "instance": inst.name,
                    "method": f"greedy-{bundle.reduction}",
                    "k": bundle.effective_k,
                    "objective": res.objective,
                    "reference": ref.objective,
                    "gap_pct": optimality_gap(res.objective, ref.objective),
                    "optimality_ratio": ratio,
                    "fallback_events": res.fallback_events,
                }
            )
    summary: dict = {}
    for method in sorted({r["method"] for r in rows}):
        gaps = [r["gap_pct"] for r in rows if r["method"] == method]
        summary[method] = {"mean_gap_pct": float(np.mean(gaps)), "count": len(gaps)}
    report: dict = {"rows": rows, "summary": summary}

    if args.pruning_k:
        ks = [int(tok) for tok in args.pruning_k.split(",") if tok.strip()]
        pruning = pruned_oracle_experiment(instances, ks)
        report["pruning"] = pruning
        rows = rows + pruning["rows"]

    json_path = os.path.join(args.out, "report.json")
    _write_json(json_path, report)
    csv_path = os.path.join(args.out, "report.csv")
    field_names = [
        "instance", "method", "k", "objective", "reference", "gap_pct",
        "optimality_ratio", "fallback_events", "feasible",
    ]
    tmp = csv_path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=field_names, restval="", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    os.replace(tmp, csv_path)
    _write_manifest(
        args.out, "evaluate", args,
        [args.checkpoint] if args.checkpoint else [], [json_path, csv_path], started,
    )
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    pset, meta = ParameterSet.load(args.checkpoint)
    count = sum(int(np.prod(p.value.shape)) for p in pset.params.values())
    payload = {
        "config": pset.config.to_dict(),
        "dtype": pset.dtype,
        "parameter_count": count,
        "tensors": {name: list(p.value.shape) for name, p in pset.params.items()},
        "meta": meta,
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


# -----------------------------
# Parser
# -----------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="l2r", description=__doc__)
    parser.add_argument("--version", action="version", version=f"l2r {l2r.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[], help="write random instance files")
    p.add_argument("--kind", choices=(KIND_TSP, KIND_CVRP), default=KIND_TSP)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--pattern", choices=("uniform",) + CLUSTER_PATTERNS, default="uniform")
    p.add_argument("--capacity", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train both models jointly")
    p.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    p.add_argument("--kind", choices=(KIND_TSP, KIND_CVRP), default=None)
    p.add_argument("--n", type=int, default=None, help="training instance size")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batches", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--eval-pool", type=int, default=None)
    p.add_argument("--probe", type=int, default=None)
    p.add_argument("--capacity", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--disable-red-bias", action="store_true")
    p.add_argument("--disable-loc-bias", action="store_true")
    p.add_argument("--workers", type=int, default=None,
                   help="accepted for symmetry; training itself is single-process")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("solve", help="construct a solution with a trained checkpoint")
    p.add_argument("--instance", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--reduction", choices=("learned", "dssr"), default="learned")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--svg", default=None)
    p.add_argument("--svg-candidates", action="store_true",
                   help="overlay the first decision's candidate edges")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("improve", help="refine a solution by destroy-and-repair")
    p.add_argument("--instance", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--solution", required=True)
    p.add_argument("--reduction", choices=("learned", "dssr"), default="learned")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--prc-iters", type=int, default=100)
    p.add_argument("--prc-max-destroy", type=int, default=1000)
    p.add_argument("--prc-segments", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_improve)

    p = sub.add_parser("evaluate", help="gap/ratio reports against exact oracles")
    p.add_argument("--oracle", default="held-karp")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--reduction", choices=("learned", "dssr"), default="learned")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--ratio", action="store_true",
                   help="also compute the candidate-coverage ratio per instance")
    p.add_argument("--pruning-k", default=None,
                   help="comma-separated k values for the edge-pruning experiment")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("inspect", help="dump checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
