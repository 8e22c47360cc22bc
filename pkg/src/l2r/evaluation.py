"""Exact oracles, classical baselines, and solution-quality metrics.

`held_karp` is the ground truth everything else is judged against: a bitmask
dynamic program, exact up to n=18 (the memory guard).  The restricted variant
powers the edge-pruning experiment: forbid every edge outside the union of
directed k-nearest lists and measure how much optimality the pruning costs.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from l2r.instances import Instance, KIND_TSP, RoutePlan, Tour, route_cost, tour_length
from l2r.reduction_policy import FastScorer, dssr_candidates, select_candidates, softmax_np
from l2r.rollout import DEMAND_EPS, PolicyBundle
from l2r.static_reduction import SparseGraph, build_sparse_graph

HELD_KARP_MAX_N = 18


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map, fanned out across processes when workers > 1.

    Results are merged in input order, so the output is identical for any
    worker count; fn must be a picklable top-level callable.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class SolveReport:
    """One method's result on one instance, with optional reference metrics."""

    method: str
    objective: float
    reference_objective: Optional[float] = None
    gap_pct: Optional[float] = None
    optimality_ratio: Optional[float] = None
    wall_ms: Optional[float] = None
    fallback_events: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "objective": float(self.objective),
            "reference_objective": None
            if self.reference_objective is None
            else float(self.reference_objective),
            "gap_pct": None if self.gap_pct is None else float(self.gap_pct),
            "optimality_ratio": None
            if self.optimality_ratio is None
            else float(self.optimality_ratio),
            "wall_ms": None if self.wall_ms is None else float(self.wall_ms),
            "fallback_events": int(self.fallback_events),
        }


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    d = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((d * d).sum(axis=2))


def _held_karp_matrix(dist: np.ndarray) -> Tuple[float, List[int]]:
    """Exact shortest closed tour over a (possibly inf-weighted) matrix.

    Returns (cost, order starting at node 0); cost is inf when forbidden
    edges disconnect every tour.
    """
    n = dist.shape[0]
    if n == 2:
        cost = float(dist[0, 1] + dist[1, 0])
        return cost, [0, 1]
    m = n - 1  # nodes 1..n-1 tracked in the bitmask
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    to_other = dist[1:, 1:]  # distance between tracked nodes
    for j in range(m):
        dp[1 << j, j] = dist[0, j + 1]
    with np.errstate(invalid="ignore"):
        for mask in range(3, full):
            if mask & (mask - 1) == 0:
                continue  # singletons initialized above
            bits = mask
            while bits:
                low = bits & -bits
                j = low.bit_length() - 1
                bits ^= low
                prev = dp[mask ^ (1 << j)] + to_other[:, j]
                i = int(np.argmin(prev))
                dp[mask, j] = prev[i]
                parent[mask, j] = i
    closing = dp[full - 1] + dist[1:, 0]
    jj = int(np.argmin(closing))
    cost = float(closing[jj])
    if not math.isfinite(cost):
        return cost, []
    order = [jj]
    mask = full - 1
    while parent[mask, order[-1]] >= 0:
        i = int(parent[mask, order[-1]])
        mask ^= 1 << order[-1]
        order.append(i)
    order.reverse()
    return cost, [0] + [j + 1 for j in order]


def held_karp(instance: Instance) -> Tour:
    """Provably optimal TSP tour by dynamic programming; n is capped at 18."""
    if instance.kind != KIND_TSP:
        raise ValueError("held_karp solves tsp instances only")
    if instance.n > HELD_KARP_MAX_N:
        raise ValueError(
            f"size-guard: held_karp handles n <= {HELD_KARP_MAX_N}, got {instance.n}"
        )
    dist = distance_matrix(instance.coords)
    _, order = _held_karp_matrix(dist)
    return Tour(order=order, objective=tour_length(instance, order))


def nearest_neighbor(instance: Instance, start: int = 0) -> Union[Tour, RoutePlan]:
    """Classical greedy baseline: always move to the nearest feasible node.

    Ties break toward the lower index.  CVRP starts at the depot and returns
    whenever no remaining customer fits the residual capacity.
    """
    coords = instance.coords
    n = instance.n
    if instance.kind == KIND_TSP:
        if not (0 <= start < n):
            raise ValueError(f"start index {start} out of range")
        visited = np.zeros(n, dtype=bool)
        visited[start] = True
        order = [start]
        last = start
        for _ in range(n - 1):
            remaining = np.flatnonzero(~visited)
            d = np.hypot(*(coords[remaining] - coords[last]).T)
            pick = int(remaining[np.lexsort((remaining, d))[0]])
            order.append(pick)
            visited[pick] = True
            last = pick
        return Tour(order=order, objective=tour_length(instance, order))

    demand = instance.normalized_demands()
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    routes: List[List[int]] = []
    current: List[int] = []
    last = 0
    q = 1.0
    while not visited.all():
        remaining = np.flatnonzero(~visited)
        fits = remaining[demand[remaining] <= q + DEMAND_EPS]
        if len(fits) == 0:
            routes.append(current)
            current = []
            last = 0
            q = 1.0
            continue
        d = np.hypot(*(coords[fits] - coords[last]).T)
        pick = int(fits[np.lexsort((fits, d))[0]])
        current.append(pick)
        visited[pick] = True
        q -= float(demand[pick])
        last = pick
    if current:
        routes.append(current)
    cost, report = route_cost(instance, routes)
    if not report.feasible:
        raise AssertionError(f"nearest_neighbor produced violations: {report.violations}")
    return RoutePlan(routes=routes, objective=cost)


def optimality_gap(objective: float, reference: float) -> float:
    """Percent excess over a reference objective."""
    if not (reference > 0):
        raise ValueError(f"invalid-reference: reference must be positive, got {reference}")
    return 100.0 * (objective - reference) / reference


def optimality_ratio(
    instance: Instance,
    reference_tour: Sequence[int],
    bundle: PolicyBundle,
    graph: Optional[SparseGraph] = None,
) -> float:
    """Percent of reference-tour moves whose target lands in the candidate set.

    Walks the reference tour; at each node the policy is queried for the
    state the reference prefix induces, and the true successor's membership
    is counted.  The closing move back to the start is forced (everything
    else is visited) and counts as covered.
    """
    if instance.kind != KIND_TSP:
        raise ValueError("optimality_ratio is defined for tsp references")
    tour_length(instance, reference_tour)  # validates the permutation
    if graph is None:
        graph = build_sparse_graph(instance, bundle.effective_gamma)
    n = instance.n
    coords = instance.coords
    k = bundle.effective_k
    learned = bundle.reduction == "learned"
    scorer = FastScorer(bundle.pset.values(), instance, bundle.config) if learned else None

    visited = np.zeros(n, dtype=bool)
    first = int(reference_tour[0])
    visited[first] = True
    count = 0
    for t in range(n):
        last = int(reference_tour[t])
        target = int(reference_tour[(t + 1) % n])
        remaining = np.flatnonzero(~visited)
        if len(remaining) == 0:
            count += 1  # closing the tour is the only legal move
            break
        d = coords[remaining] - coords[last]
        sq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        edge = graph.admit_mask(last, remaining, sq)
        if not edge.any():
            edge = np.ones(len(remaining), dtype=bool)
        feas_idx = remaining[edge]
        dists = np.sqrt(sq[edge])
        if learned:
            u = scorer.scores_over(
                scorer.H[remaining], scorer.expK[remaining], scorer.expKV[remaining],
                dists=np.sqrt(sq), feasible_mask=edge, first=first, last=last,
                q_remain=1.0, disable_bias=bundle.disable_red_bias,
            )
            probs = softmax_np(u)[edge]
            cand = select_candidates(probs, feas_idx, k)
        else:
            cand = dssr_candidates(feas_idx, dists, k)
        if target in set(int(i) for i in cand.indices):
            count += 1
        visited[target] = True
    return 100.0 * count / n


def ratio_from_counts(covered: int, total: int) -> float:
    """The Table-style percentage, rounded at reporting precision elsewhere."""
    if total <= 0:
        raise ValueError("total must be positive")
    return 100.0 * covered / total


def knearest_lists(coords: np.ndarray, k: int) -> np.ndarray:
    """Per-node k nearest others, ties toward the lower index."""
    n = coords.shape[0]
    dist = distance_matrix(coords)
    np.fill_diagonal(dist, np.inf)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        out[i] = np.lexsort((idx, dist[i]))[:k]
    return out


def retained_edges(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetric edge mask: keep (i,j) when either endpoint lists the other."""
    n = coords.shape[0]
    lists = knearest_lists(coords, min(k, n - 1))
    mask = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), lists.shape[1])
    mask[rows, lists.ravel()] = True
    return mask | mask.T


def pruned_oracle_experiment(
    instances: Sequence[Instance], k_values: Sequence[int]
) -> dict:
    """Optimal-cost degradation when tours must stay inside k-nearest edges.

    For each instance and k the DP reruns with non-retained edges set to
    infinity; an infeasible restriction is recorded, not raised.  Returns
    per-(instance, k) rows plus a per-k summary over feasible cases.
    """
    rows: List[dict] = []
    for pos, inst in enumerate(instances):
        if inst.kind != KIND_TSP:
            raise ValueError("the pruning experiment runs on tsp instances")
        if inst.n > HELD_KARP_MAX_N:
            raise ValueError(f"size-guard: instance {pos} has n={inst.n} > {HELD_KARP_MAX_N}")
        name = inst.name or f"instance-{pos}"
        dist = distance_matrix(inst.coords)
        ref_cost, ref_order = _held_karp_matrix(dist)
        ref = tour_length(inst, ref_order)
        for k in k_values:
            allowed = retained_edges(inst.coords, int(k))
            restricted = np.where(allowed, dist, np.inf)
            cost, order = _held_karp_matrix(restricted)
            if math.isfinite(cost):
                objective = tour_length(inst, order)
                gap = optimality_gap(objective, ref)
                rows.append(
                    {
                        "instance": name,
                        "method": "held-karp-restricted",
                        "k": int(k),
                        "feasible": True,
                        "objective": objective,
                        "reference": ref,
                        "gap_pct": gap,
                    }
                )
            else:
                rows.append(
                    {
                        "instance": name,
                        "method": "held-karp-restricted",
                        "k": int(k),
                        "feasible": False,
                        "objective": None,
                        "reference": ref,
                        "gap_pct": None,
                    }
                )
    summary = {}
    for k in k_values:
        kk = int(k)
        gaps = [r["gap_pct"] for r in rows if r["k"] == kk and r["feasible"]]
        infeasible = sum(1 for r in rows if r["k"] == kk and not r["feasible"])
        summary[kk] = {
            "mean_gap_pct": float(np.mean(gaps)) if gaps else None,
            "feasible": len(gaps),
            "infeasible": infeasible,
        }
    return {"rows": rows, "summary": summary}
