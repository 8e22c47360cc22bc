"""End-to-end rollouts: starts, feasibility, batching, forcing, replay.

Every constructed solution is re-validated through the instance-level
checkers (permutation test for tours, capacity/coverage report for route
plans), which never share code with the construction loop.
"""

import numpy as np
import pytest

from l2r.autodiff import Tape, value_of
from l2r.instances import Instance, generate_uniform, route_cost, tour_length
from l2r.rollout import (
    CandidateInstrument,
    PolicyBundle,
    batched_construct,
    construct,
    replay,
    routes_from_sequence,
)
from l2r.static_reduction import build_sparse_graph


def assert_valid_tour(instance, result):
    assert sorted(result.sequence) == list(range(instance.n))
    assert result.objective == pytest.approx(
        tour_length(instance, result.sequence), rel=1e-12
    )


def assert_valid_plan(instance, result):
    assert result.sequence[0] == 0 and result.sequence[-1] == 0
    for a, b in zip(result.sequence, result.sequence[1:]):
        assert not (a == 0 and b == 0), "consecutive depot visits"
    total, report = route_cost(instance, result.routes)
    assert report.feasible, report.violations
    assert result.objective == pytest.approx(total, rel=1e-12)


class TestStartsAndDeterminism:
    def test_tsp_greedy_starts_at_node_zero(self, tsp_pset, tsp10):
        res = construct(tsp10, PolicyBundle(tsp_pset))
        assert res.sequence[0] == 0

    def test_cvrp_starts_and_ends_at_depot(self, cvrp_pset, cvrp10):
        res = construct(cvrp10, PolicyBundle(cvrp_pset))
        assert_valid_plan(cvrp10, res)

    def test_greedy_is_deterministic(self, tsp_pset, tsp10):
        bundle = PolicyBundle(tsp_pset)
        a = construct(tsp10, bundle)
        b = construct(tsp10, bundle)
        assert a.sequence == b.sequence
        assert a.objective == b.objective

    def test_sampling_reproducible_under_seed(self, tsp_pset):
        inst = generate_uniform("tsp", 16, seed=9)
        bundle = PolicyBundle(tsp_pset)
        a = construct(inst, bundle, mode="sample", seed=5)
        b = construct(inst, bundle, mode="sample", seed=5)
        assert a.sequence == b.sequence

    def test_different_seeds_explore(self, tsp_pset):
        inst = generate_uniform("tsp", 16, seed=9)
        bundle = PolicyBundle(tsp_pset)
        a = construct(inst, bundle, mode="sample", seed=1)
        b = construct(inst, bundle, mode="sample", seed=2)
        assert a.sequence != b.sequence
        assert_valid_tour(inst, a)
        assert_valid_tour(inst, b)


class TestSolutionValidity:
    def test_tsp_sweep_produces_permutations(self, tsp_pset):
        bundle = PolicyBundle(tsp_pset)
        for seed in range(25):
            inst = generate_uniform("tsp", 12, seed=100 + seed)
            assert_valid_tour(inst, construct(inst, bundle))

    def test_cvrp_sweep_respects_capacity_and_coverage(self, cvrp_pset):
        bundle = PolicyBundle(cvrp_pset)
        for seed in range(25):
            inst = generate_uniform("cvrp", 12, seed=200 + seed)
            assert_valid_plan(inst, construct(inst, bundle))

    def test_sampled_rollouts_also_valid(self, tsp_pset, cvrp_pset):
        for seed in range(5):
            t = generate_uniform("tsp", 12, seed=300 + seed)
            rt = construct(t, PolicyBundle(tsp_pset), mode="sample", seed=seed)
            assert_valid_tour(t, rt)
            c = generate_uniform("cvrp", 12, seed=300 + seed)
            rc = construct(c, PolicyBundle(cvrp_pset), mode="sample", seed=seed)
            assert_valid_plan(c, rc)

    def test_distance_reduction_also_valid(self, tsp_pset, cvrp_pset):
        t = generate_uniform("tsp", 12, seed=31)
        assert_valid_tour(t, construct(t, PolicyBundle(tsp_pset, reduction="dssr")))
        c = generate_uniform("cvrp", 12, seed=31)
        assert_valid_plan(c, construct(c, PolicyBundle(cvrp_pset, reduction="dssr")))

    def test_unit_square_tour_at_least_perimeter(self, tsp_pset):
        inst = Instance("tsp", np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
        res = construct(inst, PolicyBundle(tsp_pset))
        assert res.objective >= 4.0 - 1e-12


class TestForcedAndFallback:
    def test_two_node_tour_is_fully_forced(self, tsp_pset):
        inst = Instance("tsp", np.array([[0.0, 0.0], [0.3, 0.4]]))
        res = construct(inst, PolicyBundle(tsp_pset), collect_trace=True)
        assert res.sequence == [0, 1]
        assert res.objective == pytest.approx(1.0, rel=1e-12)
        assert all(step.forced for step in res.trace.steps)

    def test_forced_trace_replays_to_zero_log_prob(self, tsp_pset):
        inst = Instance("tsp", np.array([[0.0, 0.0], [0.3, 0.4]]))
        bundle = PolicyBundle(tsp_pset)
        graph = build_sparse_graph(inst, bundle.effective_gamma)
        res = construct(inst, bundle, graph, collect_trace=True)
        tape = Tape()
        sum_tau, sum_pi, _ = replay(inst, bundle, graph, res.trace, tape)
        assert value_of(sum_tau).item() == 0.0
        assert value_of(sum_pi).item() == 0.0

    def test_pruned_clusters_trigger_fallback(self, tsp_pset):
        """Two tight far-apart blobs under aggressive pruning: the crossing
        edge is absent, so the full-feasible fallback must fire."""
        rng = np.random.default_rng(3)
        a = rng.uniform(0.0, 0.02, size=(10, 2))
        b = rng.uniform(0.98, 1.0, size=(10, 2))
        inst = Instance("tsp", np.concatenate([a, b]))
        bundle = PolicyBundle(tsp_pset, gamma=0.9)
        res = construct(inst, bundle)
        assert res.fallback_events >= 1
        assert_valid_tour(inst, res)

    def test_no_fallback_on_dense_graph(self, tsp_pset, tsp10):
        res = construct(tsp10, PolicyBundle(tsp_pset, gamma=0.0))
        assert res.fallback_events == 0

    def test_cvrp_nothing_fits_forces_depot_return(self, cvrp_pset):
        inst = Instance(
            "cvrp",
            np.array([[0.5, 0.5], [0.2, 0.2], [0.8, 0.8]]),
            demands=np.array([0.0, 30.0, 30.0]),
            capacity=50.0,
        )
        res = construct(inst, PolicyBundle(cvrp_pset), collect_trace=True)
        assert_valid_plan(inst, res)
        assert len(res.routes) == 2
        depot_steps = [s for s in res.trace.steps if s.action == 0]
        assert depot_steps and all(s.forced for s in depot_steps)


class TestBatchedConstruct:
    def test_matches_serial_greedy_tsp(self, tsp_pset):
        insts = [generate_uniform("tsp", 12, seed=400 + s) for s in range(8)]
        bundle = PolicyBundle(tsp_pset)
        batched = batched_construct(insts, bundle)
        for inst, res in zip(insts, batched):
            serial = construct(inst, bundle)
            assert res.sequence == serial.sequence
            assert res.objective == serial.objective

    def test_matches_serial_greedy_cvrp(self, cvrp_pset):
        insts = [generate_uniform("cvrp", 12, seed=500 + s) for s in range(6)]
        bundle = PolicyBundle(cvrp_pset)
        batched = batched_construct(insts, bundle)
        for inst, res in zip(insts, batched):
            serial = construct(inst, bundle)
            assert res.sequence == serial.sequence
            assert res.objective == serial.objective

    def test_mixed_sizes_in_one_batch(self, tsp_pset):
        insts = [generate_uniform("tsp", n, seed=n) for n in (6, 9, 14)]
        bundle = PolicyBundle(tsp_pset)
        for inst, res in zip(insts, batched_construct(insts, bundle)):
            assert res.sequence == construct(inst, bundle).sequence


class TestInstrument:
    def test_clean_tsp_run_has_no_violations(self, tsp_pset, tsp10):
        inst = CandidateInstrument(k=5)
        construct(tsp10, PolicyBundle(tsp_pset), instrument=inst)
        assert inst.violations == []
        assert inst.steps > 0

    def test_clean_cvrp_run_has_no_violations(self, cvrp_pset, cvrp10):
        inst = CandidateInstrument(k=5)
        construct(cvrp10, PolicyBundle(cvrp_pset), instrument=inst)
        assert inst.violations == []
        assert inst.steps > 0

    def test_counts_steps_across_runs(self, tsp_pset):
        inst = CandidateInstrument(k=5)
        bundle = PolicyBundle(tsp_pset)
        for seed in range(3):
            construct(generate_uniform("tsp", 10, seed=seed), bundle, instrument=inst)
        assert inst.steps >= 3 * 5


class TestResultShape:
    def test_routes_from_sequence_splits_on_depot(self):
        assert routes_from_sequence([0, 2, 1, 0, 3, 0]) == [[2, 1], [3]]
        assert routes_from_sequence([0, 0, 1, 0]) == [[1]]
        assert routes_from_sequence([2, 1]) == [[2, 1]]
        assert routes_from_sequence([]) == []

    def test_to_dict_round_trips_fields(self, tsp_pset, tsp10):
        res = construct(tsp10, PolicyBundle(tsp_pset))
        d = res.to_dict()
        assert d["kind"] == "tsp"
        assert d["order"] == res.sequence
        assert d["objective"] == res.objective
        assert d["fallback_events"] == 0
        assert res.tour().objective == res.objective

    def test_cvrp_result_exposes_route_plan(self, cvrp_pset, cvrp10):
        res = construct(cvrp10, PolicyBundle(cvrp_pset))
        plan = res.route_plan()
        assert plan.routes == res.routes
        assert plan.objective == res.objective


class TestReplayConsistency:
    def test_sampled_trace_replays_with_finite_gradients(self, tsp_pset):
        inst = generate_uniform("tsp", 8, seed=77)
        bundle = PolicyBundle(tsp_pset, k=4)
        graph = build_sparse_graph(inst, bundle.effective_gamma)
        res = construct(inst, bundle, graph, mode="sample", seed=3, collect_trace=True)
        tape = Tape()
        sum_tau, sum_pi, tvars = replay(inst, bundle, graph, res.trace, tape)
        lt, lp = value_of(sum_tau).item(), value_of(sum_pi).item()
        assert lt <= 0.0 and lp <= 0.0
        import l2r.autodiff as ad

        tape.backward(ad.add(sum_tau, sum_pi))
        grads = [v.grad for v in tvars.values() if v.grad is not None]
        assert grads
        assert all(np.isfinite(g).all() for g in grads)

    def test_replay_respects_recorded_candidates(self, tsp_pset):
        """Replaying twice gives bit-identical log-probabilities."""
        inst = generate_uniform("tsp", 8, seed=78)
        bundle = PolicyBundle(tsp_pset, k=4)
        graph = build_sparse_graph(inst, bundle.effective_gamma)
        res = construct(inst, bundle, graph, mode="sample", seed=4, collect_trace=True)
        vals = []
        for _ in range(2):
            tape = Tape()
            sum_tau, sum_pi, _ = replay(inst, bundle, graph, res.trace, tape)
            vals.append((value_of(sum_tau).item(), value_of(sum_pi).item()))
        assert vals[0] == vals[1]
