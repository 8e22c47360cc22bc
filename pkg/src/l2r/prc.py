"""Destroy-and-repair improvement of completed solutions.

Each iteration partitions the solution into alternating fixed anchors and
destroyed segments, re-solves every destroyed segment with the construction
model conditioned on the segment's two anchors, and keeps a rebuilt segment
only when it is strictly shorter.  Segments are disjoint, so repairs are
independent; they are applied in position order, which makes the whole loop
deterministic for a fixed seed.

CVRP segments live inside a single route: the customers of one route are
re-ordered between the route's anchors, so route loads are untouched and
capacity feasibility is preserved by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from l2r.instances import Instance, KIND_TSP, RoutePlan, Tour, route_cost, tour_length
from l2r.local_construction import build_subgraph, choose_next
from l2r.reduction_policy import (
    FastScorer,
    canonical_top,
    dssr_candidates,
    select_candidates,
    softmax_np,
)
from l2r.rollout import PolicyBundle

ACCEPT_MARGIN = 1e-12  # guards the strict-improvement rule against roundoff


@dataclass
class PrcConfig:
    iterations: int = 100
    max_destroy_len: int = 1000
    segments_per_iter: Optional[int] = None  # None = as many as the partition yields
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.max_destroy_len < 2:
            raise ValueError("max_destroy_len must be at least 2")
        if self.segments_per_iter is not None and self.segments_per_iter < 1:
            raise ValueError("segments_per_iter must be positive when given")


@dataclass
class ImproveResult:
    solution: Union[Tour, RoutePlan]
    objectives: List[float]  # objective before iteration 1, then after each
    accepted: int
    segments: int

    @property
    def objective(self) -> float:
        return self.solution.objective


def _dist(coords: np.ndarray, i: int, j: int) -> float:
    dx = coords[i, 0] - coords[j, 0]
    dy = coords[i, 1] - coords[j, 1]
    return float(np.hypot(dx, dy))


def _path_length(coords: np.ndarray, left: int, nodes: Sequence[int], right: int) -> float:
    total = 0.0
    prev = left
    for node in nodes:
        total += _dist(coords, prev, node)
        prev = node
    return total + _dist(coords, prev, right)


def _repair(
    instance: Instance,
    scorer: Optional[FastScorer],
    weights: dict,
    bundle: PolicyBundle,
    left: int,
    right: int,
    nodes: Sequence[int],
    q_start: float,
) -> List[int]:
    """Greedy re-construction of a destroyed segment between two anchors.

    The walk extends from ``left`` and must end adjacent to ``right``, so the
    right anchor plays the first-node role and the current end the last-node
    role.  Candidates come from the policy's reduction over the remaining
    destroyed nodes only; the static graph is not consulted inside a segment.
    """
    config = bundle.config
    coords = instance.coords
    demands = instance.normalized_demands() if instance.is_cvrp else None
    remaining = np.array(nodes, dtype=np.int64)
    order: List[int] = []
    last = left
    q = q_start
    while remaining.size:
        if remaining.size == 1:
            pick = int(remaining[0])
        else:
            delta = coords[remaining] - coords[last]
            dists = np.hypot(delta[:, 0], delta[:, 1])
            if bundle.reduction == "learned":
                all_ok = np.ones(remaining.size, dtype=bool)
                u = scorer.scores_over(
                    scorer.H[remaining], scorer.expK[remaining], scorer.expKV[remaining],
                    dists, all_ok, first=right, last=last, q_remain=q,
                    disable_bias=bundle.disable_red_bias,
                )
                probs = softmax_np(u)
                cand = select_candidates(probs, remaining, bundle.effective_k)
            else:
                cand = dssr_candidates(remaining, dists, bundle.effective_k)
            sg = build_subgraph(instance, right, last, cand, q)
            _, _, p = choose_next(weights, sg, config, bundle.disable_loc_bias)
            pick = int(cand.indices[canonical_top(p, cand.indices, 1)[0]])
        order.append(pick)
        remaining = remaining[remaining != pick]
        if instance.is_cvrp:
            q = max(q - float(demands[pick]), 0.0)
        last = pick
    return order


def _partition(
    rng: np.random.Generator,
    length: int,
    max_len: int,
    limit: Optional[int],
    lead_anchor: bool,
) -> List[Tuple[int, int]]:
    """Alternating anchors and destroyed spans over positions 0..length-1.

    Returns (start, stop) index pairs of destroyed spans.  A span needs a
    following position to anchor it unless it ends the range (the caller
    provides the closing anchor there); tails too short to destroy stay fixed.
    """
    spans: List[Tuple[int, int]] = []
    pos = 1 if lead_anchor else 0
    while pos + 2 <= length and (limit is None or len(spans) < limit):
        want = int(rng.integers(2, max_len + 1))
        take = min(want, length - pos)
        spans.append((pos, pos + take))
        pos += take + 1  # the position after the span is a fixed anchor
    return spans


def improve(
    instance: Instance,
    solution: Union[Tour, RoutePlan],
    bundle: PolicyBundle,
    config: PrcConfig,
) -> ImproveResult:
    """Iterated segment destruction and model-based repair; never worsens.

    The input must be feasible.  Each accepted replacement strictly shortens
    its segment, so the objective sequence is non-increasing; the final
    solution's objective is recomputed from scratch before returning.
    """
    if instance.kind != bundle.config.kind:
        raise ValueError(f"bundle is for {bundle.config.kind}, instance is {instance.kind}")
    coords = instance.coords
    rng = np.random.default_rng(config.seed)
    weights = bundle.pset.values()
    scorer = (
        FastScorer(weights, instance, bundle.config)
        if bundle.reduction == "learned"
        else None
    )

    if instance.kind == KIND_TSP:
        if not isinstance(solution, Tour):
            raise ValueError("invalid-solution: tsp improvement expects a Tour")
        order = list(solution.order)
        objective = tour_length(instance, order)  # also validates the permutation
    else:
        if not isinstance(solution, RoutePlan):
            raise ValueError("invalid-solution: cvrp improvement expects a RoutePlan")
        routes = [list(r) for r in solution.routes]
        objective, report = route_cost(instance, routes)
        if not report.feasible:
            raise ValueError(f"invalid-solution: {report.violations}")

    objectives = [objective]
    accepted = 0
    segments = 0
    demands = instance.normalized_demands() if instance.is_cvrp else None

    for _ in range(config.iterations):
        gained = 0.0
        if instance.kind == KIND_TSP:
            n = len(order)
            offset = int(rng.integers(n))
            view = order[offset:] + order[:offset]
            max_len = min(config.max_destroy_len, n)
            spans = _partition(rng, n, max_len, config.segments_per_iter, lead_anchor=True)
            for start, stop in spans:
                segments += 1
                left = view[start - 1]
                right = view[stop % n]
                nodes = view[start:stop]
                old_len = _path_length(coords, left, nodes, right)
                rebuilt = _repair(instance, scorer, weights, bundle, left, right, nodes, 1.0)
                new_len = _path_length(coords, left, rebuilt, right)
                if new_len < old_len - ACCEPT_MARGIN:
                    view[start:stop] = rebuilt
                    gained += old_len - new_len
                    accepted += 1
            order = view
        else:
            for route in routes:
                m = len(route)
                if m < 2:
                    continue
                max_len = min(config.max_destroy_len, m)
                lead = bool(rng.integers(2))
                spans = _partition(rng, m, max_len, config.segments_per_iter, lead)
                # remaining route capacity at each position: loads never
                # change, so q at a span start is 1 - prefix demand
                for start, stop in spans:
                    segments += 1
                    left = route[start - 1] if start > 0 else 0
                    right = route[stop] if stop < m else 0
                    nodes = route[start:stop]
                    q_start = 1.0 - float(sum(demands[c] for c in route[:start]))
                    old_len = _path_length(coords, left, nodes, right)
                    rebuilt = _repair(
                        instance, scorer, weights, bundle, left, right, nodes, max(q_start, 0.0)
                    )
                    new_len = _path_length(coords, left, rebuilt, right)
                    if new_len < old_len - ACCEPT_MARGIN:
                        route[start:stop] = rebuilt
                        gained += old_len - new_len
                        accepted += 1
        objective -= gained
        objectives.append(objective)

    if instance.kind == KIND_TSP:
        final = Tour(order=order, objective=tour_length(instance, order))
    else:
        cost, report = route_cost(instance, routes)
        if not report.feasible:
            raise AssertionError(f"repair broke feasibility: {report.violations}")
        final = RoutePlan(routes=routes, objective=cost)
    return ImproveResult(
        solution=final, objectives=objectives, accepted=accepted, segments=segments
    )
