"""Solution construction: reduction and local policies walked step by step.

The engine keeps compacted per-node buffers (embeddings, cached attention
rows, coordinates) and swap-removes a row whenever its node is visited, so a
step costs O(remaining * d) with no index gathers.  Feasibility is the
unvisited out-neighbors of the last node (plus the demand test for CVRP);
when static pruning strands the walk, the graph restriction is dropped for
that step and the event is counted.

Three entry points share the same math:

* `construct`: one instance, greedy or sampled, optional trace/instrument.
* `batched_construct`: many instances in lockstep, greedy, with the local
  stage running through the padded batch path.
* `replay`: re-walks a sampled trace on an autodiff tape and returns the
  log-probability sums REINFORCE differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from l2r import autodiff as ad
from l2r.autodiff import Tape
from l2r.instances import Instance, KIND_CVRP, KIND_TSP, RoutePlan, Tour, route_cost, tour_length
from l2r.local_construction import SubGraph, build_subgraph, batched_choose, choose_next, pad_batch
from l2r.neural_core import ModelConfig, ParameterSet
from l2r.reduction_policy import (
    CandidateSet,
    FastScorer,
    append_depot,
    canonical_top,
    dssr_candidates,
    reduction_features,
    sample_index,
    score_feasible,
    select_candidates,
    softmax_np,
)
from l2r.static_reduction import SparseGraph, build_sparse_graph

DEMAND_EPS = 1e-9


@dataclass
class PolicyBundle:
    """Everything a rollout needs: weights, reduction route, and overrides."""

    pset: ParameterSet
    reduction: str = "learned"  # or "dssr"
    k: Optional[int] = None
    gamma: Optional[float] = None
    disable_red_bias: bool = False
    disable_loc_bias: bool = False

    def __post_init__(self) -> None:
        if self.reduction not in ("learned", "dssr"):
            raise ValueError(f"unknown reduction route: {self.reduction!r}")

    @property
    def config(self) -> ModelConfig:
        return self.pset.config

    @property
    def effective_k(self) -> int:
        return self.k if self.k is not None else self.config.k

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.gamma is not None else self.config.gamma


@dataclass
class StepRecord:
    """One sampled decision: reduction sample, chosen node, candidate set."""

    tau: int
    action: int
    cand_idx: np.ndarray
    forced: bool


@dataclass
class Trace:
    start: int
    steps: List[StepRecord] = field(default_factory=list)


@dataclass
class SolveResult:
    kind: str
    sequence: List[int]
    objective: float
    steps: int
    fallback_events: int
    routes: Optional[List[List[int]]] = None
    trace: Optional[Trace] = None

    def tour(self) -> Tour:
        if self.kind != KIND_TSP:
            raise ValueError("tour() is only defined for tsp results")
        return Tour(order=list(self.sequence), objective=self.objective)

    def route_plan(self) -> RoutePlan:
        if self.kind != KIND_CVRP:
            raise ValueError("route_plan() is only defined for cvrp results")
        return RoutePlan(routes=[list(r) for r in self.routes], objective=self.objective)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "objective": float(self.objective),
            "steps": int(self.steps),
            "fallback_events": int(self.fallback_events),
        }
        if self.kind == KIND_TSP:
            out["order"] = [int(i) for i in self.sequence]
        else:
            out["routes"] = [[int(i) for i in r] for r in self.routes]
        return out


def routes_from_sequence(sequence: Sequence[int]) -> List[List[int]]:
    """Split a depot-delimited visit sequence into canonical routes."""
    routes: List[List[int]] = []
    current: List[int] = []
    for node in sequence:
        if node == 0:
            if current:
                routes.append(current)
                current = []
        else:
            current.append(node)
    if current:
        routes.append(current)
    return routes


class CandidateInstrument:
    """Checks every candidate set against the contract, independently.

    The top-k verification re-ranks the full feasible score vector with a
    plain stable sort rather than reusing the policy's partition logic.
    """

    def __init__(self, k: int, emit: Optional[Callable[[dict], None]] = None) -> None:
        self.k = k
        self.steps = 0
        self.violations: List[str] = []
        self.emit = emit

    def on_step(
        self,
        t: int,
        feas_idx: np.ndarray,
        probs: Optional[np.ndarray],
        cand: CandidateSet,
        last: int,
        kind: str,
        sampled: int,
    ) -> None:
        self.steps += 1
        scored = cand.indices[: cand.scored_count]
        feas_set = set(int(i) for i in feas_idx)
        if not all(int(i) in feas_set for i in scored):
            self.violations.append(f"t={t}: scored candidate outside the feasible set")
        if cand.scored_count != min(self.k, len(feas_idx)):
            self.violations.append(
                f"t={t}: scored count {cand.scored_count} != min(k, {len(feas_idx)})"
            )
        if len(set(int(i) for i in cand.indices)) != len(cand.indices):
            self.violations.append(f"t={t}: duplicate candidate indices")
        if probs is not None:
            total = float(probs.sum())
            if abs(total - 1.0) > 1e-6:
                self.violations.append(f"t={t}: feasible scores sum to {total}, not 1")
            # full-sort oracle for the top-k rule (desc score, asc index)
            order = sorted(range(len(feas_idx)), key=lambda p: (-probs[p], feas_idx[p]))
            expect = [int(feas_idx[p]) for p in order[: min(self.k, len(feas_idx))]]
            if [int(i) for i in scored] != expect:
                self.violations.append(f"t={t}: top-k selection disagrees with full sort")
        if kind == KIND_CVRP:
            if cand.depot_appended != (last != 0):
                self.violations.append(f"t={t}: depot appended={cand.depot_appended}, last={last}")
            if any(int(i) == 0 for i in scored):
                self.violations.append(f"t={t}: depot inside the scored candidates")
        if len(cand.indices) < 1:
            self.violations.append(f"t={t}: empty candidate set")
        if self.emit is not None:
            self.emit(
                {
                    "t": t,
                    "feasible_count": int(len(feas_idx)),
                    "candidates": [int(i) for i in cand.indices],
                    "scores": None if probs is None else [float(s) for s in cand.scores],
                    "sampled": int(sampled),
                }
            )


class _Compact:
    """Swap-remove buffers over the not-yet-visited nodes."""

    __slots__ = ("idx", "coords", "H", "expK", "expKV", "demand", "m")

    def __init__(
        self,
        idx: np.ndarray,
        coords: np.ndarray,
        H: Optional[np.ndarray],
        expK: Optional[np.ndarray],
        expKV: Optional[np.ndarray],
        demand: Optional[np.ndarray],
    ) -> None:
        self.idx = idx.copy()
        self.coords = coords.copy()
        self.H = None if H is None else H.copy()
        self.expK = None if expK is None else expK.copy()
        self.expKV = None if expKV is None else expKV.copy()
        self.demand = None if demand is None else demand.copy()
        self.m = int(len(idx))

    def remove_global(self, node: int) -> None:
        pos = int(np.nonzero(self.idx[: self.m] == node)[0][0])
        last = self.m - 1
        for arr in (self.idx, self.coords, self.H, self.expK, self.expKV, self.demand):
            if arr is not None:
                arr[pos] = arr[last]
        self.m = last


def _sq_to(coords: np.ndarray, point: np.ndarray) -> np.ndarray:
    d = coords - point
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]


def construct(
    instance: Instance,
    bundle: PolicyBundle,
    graph: Optional[SparseGraph] = None,
    *,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
    collect_trace: bool = False,
    instrument: Optional[CandidateInstrument] = None,
) -> SolveResult:
    """Roll one solution out.  Greedy is deterministic; sampling needs a rng.

    In ``sample`` mode the reduction node tau is drawn from the full score
    distribution and the next node from the local model; in ``greedy`` mode
    both use the argmax (ties toward the lower node index).
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode: {mode!r}")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0 if seed is None else seed)
    if graph is None:
        graph = build_sparse_graph(instance, bundle.effective_gamma)
    config = bundle.config
    if instance.kind != config.kind:
        raise ValueError(f"bundle is for {config.kind}, instance is {instance.kind}")
    k = bundle.effective_k
    weights = bundle.pset.values()
    learned = bundle.reduction == "learned"
    scorer = FastScorer(weights, instance, config) if learned else None

    n = instance.n
    coords = instance.coords
    cvrp = instance.is_cvrp
    if cvrp:
        start = 0
        live = np.arange(1, n, dtype=np.int64)
        demand = instance.normalized_demands()[1:]
    else:
        start = int(rng.integers(n)) if mode == "sample" else 0
        live = np.array([i for i in range(n) if i != start], dtype=np.int64)
        demand = None

    compact = _Compact(
        idx=live,
        coords=coords[live],
        H=None if scorer is None else scorer.H[live],
        expK=None if scorer is None else scorer.expK[live],
        expKV=None if scorer is None else scorer.expKV[live],
        demand=demand,
    )
    sequence = [start]
    first = start
    last = start
    q = 1.0
    fallback = 0
    trace = Trace(start=start) if collect_trace else None
    t = 1

    while True:
        m = compact.m
        if m == 0:
            if cvrp and last != 0:
                sequence.append(0)
            break
        t += 1
        ids = compact.idx[: compact.m]
        sq = _sq_to(compact.coords[: compact.m], coords[last])
        dists = np.sqrt(sq)
        edge = graph.admit_mask(last, ids, sq)
        if cvrp:
            fits = compact.demand[: compact.m] <= q + DEMAND_EPS
            feas_mask = edge & fits
            if not feas_mask.any() and fits.any():
                fallback += 1
                feas_mask = fits
            if not feas_mask.any():
                # nothing fits: return to the depot (never twice in a row)
                sequence.append(0)
                last = 0
                q = 1.0
                if collect_trace:
                    trace.steps.append(
                        StepRecord(tau=0, action=0, cand_idx=np.array([0]), forced=True)
                    )
                continue
        else:
            feas_mask = edge
            if not feas_mask.any():
                fallback += 1
                feas_mask = np.ones(m, dtype=bool)

        feas_pos = np.flatnonzero(feas_mask)
        feas_idx = ids[feas_pos]
        tau = -1
        if len(feas_pos) == 1 and not (cvrp and last != 0):
            # forced move: the only feasible node (and no depot alternative)
            choice = int(feas_idx[0])
            cand = CandidateSet(
                indices=feas_idx.astype(np.int64),
                scores=np.array([1.0]) if learned else None,
                k=k,
                scored_count=1,
            )
            probs_feas = np.array([1.0]) if learned else None
            tau = choice
            forced = True
        else:
            forced = False
            if learned:
                u = scorer.scores_over(
                    compact.H[: compact.m],
                    compact.expK[: compact.m],
                    compact.expKV[: compact.m],
                    dists,
                    feas_mask,
                    first,
                    last,
                    q,
                    disable_bias=bundle.disable_red_bias,
                )
                probs_all = softmax_np(u)
                probs_feas = probs_all[feas_pos]
                if mode == "sample":
                    tau = int(feas_idx[sample_index(rng, probs_feas)])
                cand = select_candidates(probs_feas, feas_idx, k)
            else:
                probs_feas = None
                cand = dssr_candidates(feas_idx, dists[feas_pos], k)
            if cvrp and last != 0:
                cand = append_depot(cand)
            sg = build_subgraph(instance, first, last, cand, q)
            _, _, p = choose_next(weights, sg, config, bundle.disable_loc_bias)
            if mode == "sample":
                choice = int(cand.indices[sample_index(rng, p)])
            else:
                choice = int(cand.indices[canonical_top(p, cand.indices, 1)[0]])

        if instrument is not None:
            scored_feas = feas_idx
            instrument.on_step(t, scored_feas, probs_feas, cand, last, instance.kind, choice)
        if collect_trace:
            trace.steps.append(
                StepRecord(tau=tau, action=choice, cand_idx=cand.indices.copy(), forced=forced)
            )

        sequence.append(choice)
        if cvrp and choice == 0:
            last = 0
            q = 1.0
        else:
            pos = int(np.nonzero(ids == choice)[0][0])
            if cvrp:
                q = max(q - compact.demand[pos], 0.0)
            compact.remove_global(choice)
            last = choice

    if cvrp:
        routes = routes_from_sequence(sequence)
        objective, report = route_cost(instance, routes)
        result = SolveResult(
            kind=KIND_CVRP,
            sequence=sequence,
            objective=objective,
            steps=len(sequence) - 1,
            fallback_events=fallback,
            routes=routes,
            trace=trace,
        )
    else:
        objective = tour_length(instance, sequence)
        result = SolveResult(
            kind=KIND_TSP,
            sequence=sequence,
            objective=objective,
            steps=len(sequence) - 1,
            fallback_events=fallback,
            trace=trace,
        )
    return result


# -----------------------------
# Batched greedy
# -----------------------------


class _LockstepState:
    __slots__ = ("instance", "graph", "scorer", "compact", "sequence", "first", "last",
                 "q", "fallback", "done")

    def __init__(self, instance, graph, scorer, compact, start):
        self.instance = instance
        self.graph = graph
        self.scorer = scorer
        self.compact = compact
        self.sequence = [start]
        self.first = start
        self.last = start
        self.q = 1.0
        self.fallback = 0
        self.done = False


def batched_construct(
    instances: Sequence[Instance],
    bundle: PolicyBundle,
    graphs: Optional[Sequence[SparseGraph]] = None,
) -> List[SolveResult]:
    """Greedy rollouts in lockstep; the local stage runs as one padded batch.

    Produces the same solutions as per-instance greedy `construct` (the
    candidate scoring is instance-local either way; only the construction
    model evaluation is batched).
    """
    config = bundle.config
    k = bundle.effective_k
    weights = bundle.pset.values()
    learned = bundle.reduction == "learned"
    if graphs is None:
        graphs = [build_sparse_graph(inst, bundle.effective_gamma) for inst in instances]
    states: List[_LockstepState] = []
    for inst, graph in zip(instances, graphs):
        if inst.kind != config.kind:
            raise ValueError(f"bundle is for {config.kind}, instance is {inst.kind}")
        cvrp = inst.is_cvrp
        start = 0
        if cvrp:
            live = np.arange(1, inst.n, dtype=np.int64)
            demand = inst.normalized_demands()[1:]
        else:
            live = np.arange(1, inst.n, dtype=np.int64)
            demand = None
        scorer = FastScorer(weights, inst, config) if learned else None
        compact = _Compact(
            idx=live,
            coords=inst.coords[live],
            H=None if scorer is None else scorer.H[live],
            expK=None if scorer is None else scorer.expK[live],
            expKV=None if scorer is None else scorer.expKV[live],
            demand=demand,
        )
        states.append(_LockstepState(inst, graph, scorer, compact, start))

    while True:
        pending: List[Tuple[_LockstepState, CandidateSet, SubGraph]] = []
        for st in states:
            if st.done:
                continue
            self_advance = True
            while self_advance:
                self_advance = False
                m = st.compact.m
                if m == 0:
                    if st.instance.is_cvrp and st.last != 0:
                        st.sequence.append(0)
                    st.done = True
                    break
                ids = st.compact.idx[:m]
                sq = _sq_to(st.compact.coords[:m], st.instance.coords[st.last])
                dists = np.sqrt(sq)
                edge = st.graph.admit_mask(st.last, ids, sq)
                cvrp = st.instance.is_cvrp
                if cvrp:
                    fits = st.compact.demand[:m] <= st.q + DEMAND_EPS
                    feas_mask = edge & fits
                    if not feas_mask.any() and fits.any():
                        st.fallback += 1
                        feas_mask = fits
                    if not feas_mask.any():
                        st.sequence.append(0)
                        st.last = 0
                        st.q = 1.0
                        self_advance = True
                        continue
                else:
                    feas_mask = edge
                    if not feas_mask.any():
                        st.fallback += 1
                        feas_mask = np.ones(m, dtype=bool)
                feas_pos = np.flatnonzero(feas_mask)
                feas_idx = ids[feas_pos]
                if len(feas_pos) == 1 and not (cvrp and st.last != 0):
                    _apply_choice(st, int(feas_idx[0]))
                    self_advance = True
                    continue
                if learned:
                    u = st.scorer.scores_over(
                        st.compact.H[:m], st.compact.expK[:m], st.compact.expKV[:m],
                        dists, feas_mask, st.first, st.last, st.q,
                        disable_bias=bundle.disable_red_bias,
                    )
                    probs_feas = softmax_np(u)[feas_pos]
                    cand = select_candidates(probs_feas, feas_idx, k)
                else:
                    cand = dssr_candidates(feas_idx, dists[feas_pos], k)
                if cvrp and st.last != 0:
                    cand = append_depot(cand)
                sg = build_subgraph(st.instance, st.first, st.last, cand, st.q)
                pending.append((st, cand, sg))
        if not pending:
            break
        batch = pad_batch([sg for _, _, sg in pending])
        probs = batched_choose(weights, batch, config, bundle.disable_loc_bias)
        for row, (st, cand, _) in enumerate(pending):
            p = probs[row, : cand.indices.shape[0]]
            choice = int(cand.indices[canonical_top(p, cand.indices, 1)[0]])
            _apply_choice(st, choice)

    results = []
    for st in states:
        if st.instance.is_cvrp:
            routes = routes_from_sequence(st.sequence)
            objective, _ = route_cost(st.instance, routes)
            results.append(
                SolveResult(
                    kind=KIND_CVRP, sequence=st.sequence, objective=objective,
                    steps=len(st.sequence) - 1, fallback_events=st.fallback, routes=routes,
                )
            )
        else:
            objective = tour_length(st.instance, st.sequence)
            results.append(
                SolveResult(
                    kind=KIND_TSP, sequence=st.sequence, objective=objective,
                    steps=len(st.sequence) - 1, fallback_events=st.fallback,
                )
            )
    return results


def _apply_choice(st: _LockstepState, choice: int) -> None:
    st.sequence.append(choice)
    if st.instance.is_cvrp and choice == 0:
        st.last = 0
        st.q = 1.0
        return
    pos = int(np.nonzero(st.compact.idx[: st.compact.m] == choice)[0][0])
    if st.instance.is_cvrp:
        st.q = max(st.q - st.compact.demand[pos], 0.0)
    st.compact.remove_global(choice)
    st.last = choice


# -----------------------------
# Tape replay for gradients
# -----------------------------


def replay(
    instance: Instance,
    bundle: PolicyBundle,
    graph: SparseGraph,
    trace: Trace,
    tape: Tape,
) -> Tuple[object, object, Dict[str, object]]:
    """Recompute a sampled rollout's log-probabilities on a tape.

    Returns (sum_log_tau, sum_log_pi, tape_vars).  Candidate sets and all
    actions are forced from the trace; feasibility is recomputed (it depends
    only on the instance and visited state, never on the weights).
    """
    config = bundle.config
    weights = bundle.pset.tape_vars(tape)
    dtype = np.dtype(bundle.pset.dtype)
    feats = reduction_features(instance).astype(dtype)
    H = ad.add(ad.matmul(feats, weights["red.embed.W"]), weights["red.embed.b"])
    K = ad.matmul(H, weights["red.W_K"])
    V = ad.matmul(H, weights["red.W_V"])

    n = instance.n
    coords = instance.coords
    cvrp = instance.is_cvrp
    visited = np.zeros(n, dtype=bool)
    visited[trace.start] = True
    first = trace.start
    last = trace.start
    q = 1.0
    demand = instance.normalized_demands() if cvrp else None
    log_taus: List[object] = []
    log_pis: List[object] = []

    for rec in trace.steps:
        if rec.forced:
            _replay_apply(rec.action, cvrp, visited, demand)
            if cvrp and rec.action == 0:
                last, q = 0, 1.0
            else:
                if cvrp:
                    q = max(q - demand[rec.action], 0.0)
                last = rec.action
            continue
        if cvrp:
            unvis = np.flatnonzero(~visited[1:]) + 1
        else:
            unvis = np.flatnonzero(~visited)
        d = coords[unvis] - coords[last]
        sq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        dists = np.sqrt(sq)
        edge = graph.admit_mask(last, unvis, sq)
        if cvrp:
            fits = demand[unvis] <= q + DEMAND_EPS
            feas_mask = edge & fits
            if not feas_mask.any() and fits.any():
                feas_mask = fits
        else:
            feas_mask = edge
            if not feas_mask.any():
                feas_mask = np.ones(len(unvis), dtype=bool)
        feas_idx = unvis[feas_mask]
        feas_d = dists[feas_mask]

        if bundle.reduction == "learned":
            _, log_o, _ = score_feasible(
                weights, H, K, V, feas_idx, feas_d,
                config=config, kind=instance.kind, first=first, last=last,
                q_remain=q, n_total=n, disable_bias=bundle.disable_red_bias,
            )
            tau_pos = int(np.nonzero(feas_idx == rec.tau)[0][0])
            log_taus.append(ad.pick_entry(log_o, 0, tau_pos))

        cand = CandidateSet(
            indices=np.asarray(rec.cand_idx, dtype=np.int64),
            scores=None,
            k=bundle.effective_k,
            scored_count=len(rec.cand_idx),
        )
        sg = build_subgraph(instance, first, last, cand, q)
        _, log_p, _ = choose_next(weights, sg, config, bundle.disable_loc_bias)
        act_pos = int(np.nonzero(cand.indices == rec.action)[0][0])
        log_pis.append(ad.pick_entry(log_p, 0, act_pos))

        _replay_apply(rec.action, cvrp, visited, demand)
        if cvrp and rec.action == 0:
            last, q = 0, 1.0
        else:
            if cvrp:
                q = max(q - demand[rec.action], 0.0)
            last = rec.action

    zero = np.zeros((1, 1), dtype=dtype)
    sum_tau = ad.add_n(log_taus) if log_taus else zero
    sum_pi = ad.add_n(log_pis) if log_pis else zero
    return sum_tau, sum_pi, weights


def _replay_apply(action: int, cvrp: bool, visited: np.ndarray, demand) -> None:
    if not (cvrp and action == 0):
        visited[action] = True
