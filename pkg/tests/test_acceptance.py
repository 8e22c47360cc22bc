"""Release gate: ten end-to-end criteria, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to stream the lines.
The full-scale training criterion takes roughly half an hour on one core;
everything else together stays under ten minutes.  The trained checkpoint
is shared between the training criterion and the 100K-node memory check.
"""

import itertools
import json
import math
import resource
import time

import numpy as np
import pytest

from l2r import autodiff as ad
from l2r.autodiff import Tape, value_of
from l2r.cli import main as cli_main
from l2r.evaluation import held_karp, nearest_neighbor, optimality_gap, \
    pruned_oracle_experiment, ratio_from_counts
from l2r.instances import generate_uniform, route_cost, tour_length
from l2r.neural_core import ModelConfig, ParameterSet, finite_difference
from l2r.rollout import CandidateInstrument, PolicyBundle, batched_construct, construct
from l2r.prc import PrcConfig, improve
from l2r.static_reduction import build_sparse_graph
from l2r.training import BatchRecord, TrainConfig, reinforce_gradients, train


def _report(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The reference training run: TSP-20, 2 epochs x 200 batches x 64."""
    out = tmp_path_factory.mktemp("desk")
    started = time.perf_counter()
    pset, metrics = train(TrainConfig(), out_dir=out)
    wall = time.perf_counter() - started
    return pset, metrics, out, wall


# -- 1: training gradients vs central finite differences --------------------

def test_criterion_01_gradients_match_finite_differences():
    started = time.perf_counter()
    config_by_kind = {
        kind: ModelConfig(kind, d=8, d_ff=32, layers=2, k=5, gamma=0.1, xi=10.0)
        for kind in ("tsp", "cvrp")
    }
    pset_by_kind = {
        kind: ParameterSet.init(cfg, seed=101, dtype="float64")
        for kind, cfg in config_by_kind.items()
    }
    rng = np.random.default_rng(2024)
    worst = 0.0
    trials = 100
    for trial in range(trials):
        kind = "tsp" if trial % 2 == 0 else "cvrp"
        pset = pset_by_kind[kind]
        inst = generate_uniform(kind, 8, seed=5000 + trial)
        graph = build_sparse_graph(inst, pset.config.gamma)
        bundle = PolicyBundle(pset, k=5, gamma=0.1)
        res = construct(inst, bundle, graph, mode="sample", seed=trial,
                        collect_trace=True)
        records = [BatchRecord(inst, graph, res.trace, res.objective)]
        baselines = [res.objective - 1.0]  # advantage pinned at 1

        analytic_pset = pset.copy()
        reinforce_gradients(analytic_pset, records, baselines, k=5, gamma=0.1)

        def loss(p):
            probe = p.copy()
            return reinforce_gradients(probe, records, baselines, k=5, gamma=0.1)

        names = list(pset.values())
        entries = []
        for name in rng.choice(names, size=6, replace=False):
            entries.append((name, int(rng.integers(pset.values()[name].size))))
        numeric = finite_difference(loss, pset, entries)
        for (name, idx), num in numeric.items():
            g = analytic_pset.params[name].grad
            analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
            scale = max(abs(analytic), abs(num))
            err = abs(analytic - num) if scale < 1e-10 else abs(analytic - num) / scale
            worst = max(worst, err)
    wall = time.perf_counter() - started
    ok = worst <= 1e-4 and wall < 120.0
    _report(1, ok, f"{trials} trials, worst rel err {worst:.3e}, {wall:.1f}s (< 120s)")


# -- 2: gated mixing vs its literal formula in extended precision -----------

def _mixing_oracle_longdouble(Q, K, V, A):
    Ql, Kl, Vl, Al = (np.asarray(x, dtype=np.longdouble) for x in (Q, K, V, A))
    sig = 1.0 / (1.0 + np.exp(-Ql))
    eK = np.exp(Kl)
    eA = np.exp(Al)
    return sig * ((eA @ (eK * Vl)) / (eA @ eK))


def test_criterion_02_attention_matches_literal_formula():
    started = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    worst_shift = 0.0
    shapes = 1000
    for i in range(shapes):
        m = int(rng.integers(1, 13))
        r = int(rng.integers(1, 13))
        d = int(rng.integers(1, 17))
        Q = rng.normal(0, 2, (m, d))
        K = rng.normal(0, 2, (r, d))
        V = rng.normal(0, 2, (r, d))
        A = rng.normal(0, 2, (m, r))
        if i % 5 == 0:  # stress the stabilizing shifts
            K = K * 50.0
            A = A * 100.0
        if i % 3 == 0 and r > 1:  # partial masks, never a full row
            mask = rng.random((m, r)) < 0.3
            mask[np.arange(m), rng.integers(0, r, m)] = False
            A = np.where(mask, -np.inf, A)
        got = np.asarray(value_of(ad.aafm(Q, K, V, A)), dtype=np.longdouble)
        want = _mixing_oracle_longdouble(Q, K, V, A)
        err = float(np.max(np.abs(got - want) / (np.abs(want) + 1e-12)))
        worst = max(worst, err)

        col = rng.normal(0, 5, (1, d))
        row = rng.normal(0, 5, (m, 1))
        finite_A = np.where(np.isfinite(A), A + row, A)
        shifted = value_of(ad.aafm(Q, K + col, V, finite_A))
        base = value_of(ad.aafm(Q, K, V, A))
        serr = float(np.max(np.abs(shifted - base) / (np.abs(base) + 1e-12)))
        worst_shift = max(worst_shift, serr)
    wall = time.perf_counter() - started
    ok = worst <= 1e-6 and worst_shift <= 1e-9 and wall < 30.0
    _report(2, ok, f"{shapes} shapes, worst rel err {worst:.3e}, "
                   f"shift-invariance err {worst_shift:.3e}, {wall:.1f}s (< 30s)")


# -- 3: the reference training run learns -----------------------------------

def test_criterion_03_reference_training_improves(desk_run):
    pset, metrics, _, wall = desk_run
    probe_before = metrics[0]["probe_greedy_mean_obj"]
    probe_after = metrics[-1]["probe_greedy_mean_obj"]

    bundle = PolicyBundle(pset)
    holdout = [generate_uniform("tsp", 10, seed=900000 + i) for i in range(100)]
    refs = [held_karp(inst).objective for inst in holdout]
    greedy = [r.objective for r in batched_construct(holdout, bundle)]
    nn = [nearest_neighbor(inst).objective for inst in holdout]
    greedy_gap = float(np.mean([optimality_gap(g, r) for g, r in zip(greedy, refs)]))
    nn_gap = float(np.mean([optimality_gap(v, r) for v, r in zip(nn, refs)]))

    ok = (wall < 45 * 60.0) and (probe_after < probe_before) and (greedy_gap < nn_gap)
    _report(3, ok,
            f"wall {wall / 60.0:.1f}min (< 45), probe {probe_before:.4f} -> "
            f"{probe_after:.4f}, held-out gap {greedy_gap:.2f}% vs nn {nn_gap:.2f}%")


# -- 4: candidate-set contract under instrumentation ------------------------

def test_criterion_04_instrumented_steps_clean():
    tiny = dict(d=8, d_ff=16, layers=2, k=5, gamma=0.1, xi=10.0)
    bundles = {
        kind: PolicyBundle(ParameterSet.init(ModelConfig(kind, **tiny), seed=7))
        for kind in ("tsp", "cvrp")
    }
    instruments = {kind: CandidateInstrument(k=5) for kind in bundles}
    sizes = itertools.cycle([10, 20, 35, 50])
    seed = 0
    while sum(ins.steps for ins in instruments.values()) < 10_000:
        n = next(sizes)
        for kind in ("tsp", "cvrp"):
            inst = generate_uniform(kind, n, seed=10_000 + seed)
            mode = "sample" if seed % 3 == 0 else "greedy"
            construct(inst, bundles[kind], mode=mode, seed=seed,
                      instrument=instruments[kind])
        seed += 1
    total = sum(ins.steps for ins in instruments.values())
    violations = [v for ins in instruments.values() for v in ins.violations]
    ok = total >= 10_000 and not violations
    _report(4, ok, f"{total} scored steps, {len(violations)} violations")


# -- 5: feasibility at scale -------------------------------------------------

def test_criterion_05_thousand_rollouts_feasible():
    tiny = dict(d=8, d_ff=16, layers=2, k=5, gamma=0.1, xi=10.0)
    bad = 0
    for kind in ("cvrp", "tsp"):
        pset = ParameterSet.init(ModelConfig(kind, **tiny), seed=11)
        bundle = PolicyBundle(pset)
        for chunk in range(10):
            insts = [
                generate_uniform(kind, 50, seed=20_000 + 1000 * chunk + i)
                for i in range(100)
            ]
            for inst, res in zip(insts, batched_construct(insts, bundle)):
                if kind == "tsp":
                    if sorted(res.sequence) != list(range(50)):
                        bad += 1
                else:
                    _, report = route_cost(inst, res.routes)
                    if not report.feasible:
                        bad += 1
    ok = bad == 0
    _report(5, ok, f"1000 cvrp-50 + 1000 tsp-50 greedy rollouts, {bad} violations")


# -- 6: improvement never worsens, never beats the exact optimum ------------

def test_criterion_06_improvement_soundness():
    tiny = dict(d=8, d_ff=16, layers=2, k=5, gamma=0.1, xi=10.0)
    pset = ParameterSet.init(ModelConfig("tsp", **tiny), seed=13)
    bundle = PolicyBundle(pset)
    pairs = 0
    problems = []
    for i in range(40):
        inst = generate_uniform("tsp", 12, seed=30_000 + i)
        ref = held_karp(inst).objective
        tour = construct(inst, bundle).tour()
        frozen = improve(inst, tour, bundle, PrcConfig(iterations=0, seed=0))
        if list(frozen.solution.order) != list(tour.order):
            problems.append(f"instance {i}: zero iterations changed the tour")
        for seed in range(5):
            res = improve(inst, tour, bundle, PrcConfig(iterations=10, seed=seed))
            pairs += 1
            if np.any(np.diff(res.objectives) > 1e-12):
                problems.append(f"instance {i} seed {seed}: objective increased")
            if res.objective < ref - 1e-9:
                problems.append(f"instance {i} seed {seed}: beat the exact optimum")
    ok = pairs == 200 and not problems
    _report(6, ok, f"{pairs} (instance, seed) pairs, {len(problems)} problems")


# -- 7: pruning experiment endpoints -----------------------------------------

def test_criterion_07_pruning_endpoints():
    started = time.perf_counter()
    insts = [generate_uniform("tsp", 12, seed=40_000 + i) for i in range(20)]
    out = pruned_oracle_experiment(insts, [3, 11])
    full = out["summary"][11]["mean_gap_pct"]
    small = out["summary"][3]["mean_gap_pct"]
    wall = time.perf_counter() - started
    ok = (full == 0.0) and (small is not None and small > 0.0) and wall < 300.0
    _report(7, ok, f"mean gap at k=11: {full}%, at k=3: "
                   f"{'n/a' if small is None else f'{small:.2f}%'}, "
                   f"{wall:.1f}s (< 300s)")


# -- 8: reporting arithmetic --------------------------------------------------

def test_criterion_08_reported_percentages():
    gap = optimality_gap(24.16, 23.12)
    ratio = ratio_from_counts(1067, 1173)
    ok = abs(gap - 4.50) <= 0.01 and abs(ratio - 90.96) <= 0.01
    _report(8, ok, f"gap(24.16, 23.12) = {gap:.4f}%, 1067/1173 = {ratio:.4f}%")


# -- 9: bit-identical repeats -------------------------------------------------

def test_criterion_09_reproducibility(tmp_path):
    config = TrainConfig(
        kind="tsp", n_train=8, epochs=2, batches_per_epoch=2, batch_size=4,
        d=8, d_ff=16, layers=2, k=4, eval_pool_size=8, probe_size=4, seed=3,
    )
    pairs = []
    for tag in ("a", "b"):
        out = tmp_path / f"train-{tag}"
        train(config, out_dir=out)
        pairs.append(out)
    metrics_same = (pairs[0] / "metrics.jsonl").read_bytes() == \
        (pairs[1] / "metrics.jsonl").read_bytes()
    ckpt_same = (pairs[0] / "checkpoint.l2r").read_bytes() == \
        (pairs[1] / "checkpoint.l2r").read_bytes()

    ckpt = str(pairs[0] / "checkpoint.l2r")
    gen = tmp_path / "insts"
    assert cli_main(["generate", "--n", "10", "--seed", "1", "--out", str(gen)]) == 0
    inst_file = str(gen / "tsp10-uniform-1-0000.json")
    sol_bytes = []
    for tag in ("s1", "s2"):
        sol = tmp_path / f"{tag}.json"
        assert cli_main(["solve", "--instance", inst_file, "--checkpoint", ckpt,
                         "--mode", "sample", "--seed", "9", "--out", str(sol)]) == 0
        sol_bytes.append(sol.read_bytes())
    report_bytes = []
    for tag, workers in (("e1", "2"), ("e2", "2")):
        out = tmp_path / tag
        assert cli_main(["evaluate", "--n", "7", "--count", "3", "--seed", "2",
                         "--checkpoint", ckpt, "--workers", workers,
                         "--out", str(out)]) == 0
        report_bytes.append((out / "report.json").read_bytes())
    ok = metrics_same and ckpt_same and sol_bytes[0] == sol_bytes[1] \
        and report_bytes[0] == report_bytes[1]
    _report(9, ok, f"metrics identical: {metrics_same}, checkpoints identical: "
                   f"{ckpt_same}, solutions identical: {sol_bytes[0] == sol_bytes[1]}, "
                   f"reports identical: {report_bytes[0] == report_bytes[1]}")


# -- 10: 100K-node instance inside the memory ceiling ------------------------

def test_criterion_10_hundred_thousand_nodes(desk_run):
    pset, _, _, _ = desk_run
    inst = generate_uniform("tsp", 100_000, seed=424242)
    res = construct(inst, PolicyBundle(pset))
    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    peak_gb = peak_kb / (1024.0 * 1024.0)
    valid = sorted(res.sequence) == list(range(100_000))
    ok = valid and peak_gb < 4.0
    _report(10, ok, f"objective {res.objective:.1f}, valid permutation: {valid}, "
                    f"peak rss {peak_gb:.2f} GB (< 4 GB)")
