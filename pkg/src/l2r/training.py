"""Joint REINFORCE training of the reduction and construction models.

One sampled rollout per instance supplies the trajectory; the advantage
against a baseline (exponential during the first epoch, frozen greedy copy
afterwards) scales both models' log-probability gradients identically.  The
baseline is promoted to the current learner only when a one-sided paired
t-test on a held-out pool says the learner is significantly better.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import t as student_t

from l2r import autodiff as ad
from l2r.autodiff import Tape
from l2r.instances import Instance, KIND_CVRP, KIND_TSP, generate_uniform
from l2r.neural_core import ModelConfig, ParameterSet, adam_step
from l2r.rollout import PolicyBundle, Trace, batched_construct, construct, replay
from l2r.static_reduction import SparseGraph, build_sparse_graph


@dataclass
class TrainConfig:
    """Everything a run needs; defaults target the desk scale."""

    kind: str = KIND_TSP
    n_train: int = 20
    epochs: int = 2
    batches_per_epoch: int = 200
    batch_size: int = 64
    d: int = 64
    d_ff: int = 256
    layers: int = 3
    k: int = 10
    gamma: float = 0.1
    xi: float = 10.0
    lr: float = 1e-4
    lr_decay: float = 0.98
    clip_norm: float = 1.0
    beta_exp: float = 0.8
    ttest_alpha: float = 0.05
    eval_pool_size: int = 512
    probe_size: int = 128
    capacity: float = 50.0
    seed: int = 1
    dtype: str = "float32"
    disable_red_bias: bool = False
    disable_loc_bias: bool = False

    def __post_init__(self) -> None:
        if self.kind not in (KIND_TSP, KIND_CVRP):
            raise ValueError(f"unknown kind: {self.kind!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        positive = (
            "n_train", "batches_per_epoch", "batch_size", "d", "d_ff", "layers",
            "k", "lr", "lr_decay", "clip_norm", "beta_exp", "eval_pool_size",
            "probe_size", "capacity", "xi",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.ttest_alpha < 1.0):
            raise ValueError("ttest_alpha must lie in (0, 1)")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            kind=self.kind, d=self.d, d_ff=self.d_ff, layers=self.layers,
            k=self.k, gamma=self.gamma, xi=self.xi,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class BatchRecord:
    """One sampled trajectory and the numbers REINFORCE needs for it."""

    instance: Instance
    graph: SparseGraph
    trace: Trace
    reward: float


def reinforce_gradients(
    pset: ParameterSet,
    records: Sequence[BatchRecord],
    baselines: Sequence[float],
    *,
    k: int,
    gamma: float,
    disable_red_bias: bool = False,
    disable_loc_bias: bool = False,
) -> float:
    """Accumulate d/dtheta of -(1/B) sum (R - b)(log o + log p); returns the loss.

    Each trajectory is replayed on its own tape with the recorded candidate
    sets and actions, then the backward pass is seeded with -advantage/B.
    """
    if len(records) != len(baselines):
        raise ValueError(
            f"batch-error: {len(records)} records vs {len(baselines)} baselines"
        )
    if not records:
        raise ValueError("batch-error: empty batch")
    bundle = PolicyBundle(
        pset, reduction="learned", k=k, gamma=gamma,
        disable_red_bias=disable_red_bias, disable_loc_bias=disable_loc_bias,
    )
    batch = len(records)
    loss = 0.0
    for rec, b in zip(records, baselines):
        adv = rec.reward - b
        tape = Tape()
        sum_tau, sum_pi, tape_vars = replay(rec.instance, bundle, rec.graph, rec.trace, tape)
        total = ad.add(sum_tau, sum_pi)
        loss -= adv * float(total.value[0, 0]) / batch
        tape.backward(total, seed=-adv / batch)
        pset.accumulate_from(tape_vars)
    return loss


class ExponentialBaseline:
    """Running average b <- beta*b + (1-beta)*mean(R), seeded by the first batch."""

    def __init__(self, beta: float) -> None:
        self.beta = beta
        self.value: Optional[float] = None

    def update(self, rewards: np.ndarray) -> float:
        mean = float(np.mean(rewards))
        if self.value is None:
            self.value = mean
        else:
            self.value = self.beta * self.value + (1.0 - self.beta) * mean
        return self.value


def paired_t_test(diffs: np.ndarray) -> Tuple[float, float]:
    """One-sided paired t-test for mean(diffs) > 0; returns (t, p).

    Zero-variance cases degenerate cleanly: all-zero differences give p=1,
    a constant positive difference gives p=0.
    """
    diffs = np.asarray(diffs, dtype=np.float64)
    n = diffs.size
    if n < 2:
        raise ValueError("need at least two paired observations")
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        if mean > 0.0:
            return math.inf, 0.0
        return 0.0, 1.0
    t_stat = mean / (sd / math.sqrt(n))
    p = float(student_t.sf(t_stat, df=n - 1))
    return t_stat, p


def _generate_pool(config: TrainConfig, rng: np.random.Generator, count: int) -> List[Instance]:
    capacity = config.capacity if config.kind == KIND_CVRP else None
    return [
        generate_uniform(config.kind, config.n_train, capacity=capacity, seed=rng)
        for _ in range(count)
    ]


def _greedy_objectives(
    instances: Sequence[Instance],
    graphs: Sequence[SparseGraph],
    bundle: PolicyBundle,
) -> np.ndarray:
    results = batched_construct(instances, bundle, graphs)
    return np.array([r.objective for r in results], dtype=np.float64)


def train(
    config: TrainConfig,
    out_dir: Optional[str] = None,
) -> Tuple[ParameterSet, List[dict]]:
    """Run the full training loop; returns (parameters, per-epoch metrics).

    When out_dir is given, writes checkpoint.l2r and metrics.jsonl there (a
    diagnostic.l2r is dumped instead if the loss ever goes non-finite).
    """
    root = np.random.SeedSequence(config.seed)
    init_seq, inst_seq, rollout_seq, pool_seq = root.spawn(4)
    inst_rng = np.random.default_rng(inst_seq)
    rollout_rng = np.random.default_rng(rollout_seq)
    pool_rng = np.random.default_rng(pool_seq)

    model_config = config.model_config()
    pset = ParameterSet.init(
        model_config, seed=int(init_seq.generate_state(1)[0]), dtype=config.dtype
    )
    baseline_pset = pset.copy()

    def bundle_for(p: ParameterSet) -> PolicyBundle:
        return PolicyBundle(
            p, reduction="learned", k=config.k, gamma=config.gamma,
            disable_red_bias=config.disable_red_bias,
            disable_loc_bias=config.disable_loc_bias,
        )

    eval_pool = _generate_pool(config, pool_rng, config.eval_pool_size)
    eval_graphs = [build_sparse_graph(inst, config.gamma) for inst in eval_pool]
    probe_pool = _generate_pool(config, pool_rng, config.probe_size)
    probe_graphs = [build_sparse_graph(inst, config.gamma) for inst in probe_pool]

    metrics: List[dict] = []
    probe0 = _greedy_objectives(probe_pool, probe_graphs, bundle_for(pset))
    metrics.append(
        {
            "epoch": 0,
            "probe_greedy_mean_obj": float(probe0.mean()),
            "note": "pre-training probe",
        }
    )

    exp_baseline = ExponentialBaseline(config.beta_exp)

    def dump(path_name: str, epoch: int) -> Optional[str]:
        if out_dir is None:
            return None
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, path_name)
        pset.save(path, meta={"train_config": config.to_dict(), "epoch": epoch})
        return path

    for epoch in range(1, config.epochs + 1):
        lr = config.lr * config.lr_decay ** (epoch - 1)
        epoch_rewards: List[float] = []
        epoch_losses: List[float] = []
        epoch_norms: List[float] = []
        for _ in range(config.batches_per_epoch):
            instances = _generate_pool(config, inst_rng, config.batch_size)
            graphs = [build_sparse_graph(inst, config.gamma) for inst in instances]
            records: List[BatchRecord] = []
            for inst, graph in zip(instances, graphs):
                res = construct(
                    inst, bundle_for(pset), graph,
                    mode="sample", rng=rollout_rng, collect_trace=True,
                )
                records.append(BatchRecord(inst, graph, res.trace, -res.objective))
            rewards = np.array([r.reward for r in records], dtype=np.float64)
            if epoch == 1:
                b_value = exp_baseline.update(rewards)
                baselines = np.full(len(records), b_value)
            else:
                baselines = _greedy_objectives(instances, graphs, bundle_for(baseline_pset))
                baselines = -baselines
            pset.zero_grads()
            loss = reinforce_gradients(
                pset, records, baselines,
                k=config.k, gamma=config.gamma,
                disable_red_bias=config.disable_red_bias,
                disable_loc_bias=config.disable_loc_bias,
            )
            if not math.isfinite(loss):
                path = dump("diagnostic.l2r", epoch)
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}; diagnostic checkpoint: {path}"
                )
            try:
                pset.check_finite()
            except FloatingPointError as exc:
                path = dump("diagnostic.l2r", epoch)
                raise RuntimeError(f"{exc}; diagnostic checkpoint: {path}") from exc
            norm = adam_step(pset, lr, clip_norm=config.clip_norm)
            epoch_rewards.append(float(rewards.mean()))
            epoch_losses.append(loss)
            epoch_norms.append(norm)

        learner_obj = _greedy_objectives(eval_pool, eval_graphs, bundle_for(pset))
        baseline_obj = _greedy_objectives(eval_pool, eval_graphs, bundle_for(baseline_pset))
        # rewards are negated objectives, so learner-better means obj smaller
        t_stat, p_value = paired_t_test(baseline_obj - learner_obj)
        updated = bool(p_value < config.ttest_alpha)
        if updated:
            baseline_pset = pset.copy()
            eval_pool = _generate_pool(config, pool_rng, config.eval_pool_size)
            eval_graphs = [build_sparse_graph(inst, config.gamma) for inst in eval_pool]
        probe_obj = _greedy_objectives(probe_pool, probe_graphs, bundle_for(pset))
        metrics.append(
            {
                "epoch": epoch,
                "lr": lr,
                "mean_reward": float(np.mean(epoch_rewards)),
                "mean_loss": float(np.mean(epoch_losses)),
                "mean_grad_norm": float(np.mean(epoch_norms)),
                "exp_baseline": exp_baseline.value if epoch == 1 else None,
                "eval_learner_mean_obj": float(learner_obj.mean()),
                "eval_baseline_mean_obj": float(baseline_obj.mean()),
                "ttest_t": t_stat if math.isfinite(t_stat) else None,
                "ttest_p": p_value,
                "baseline_updated": updated,
                "probe_greedy_mean_obj": float(probe_obj.mean()),
            }
        )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        dump("checkpoint.l2r", config.epochs)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        tmp = metrics_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for row in metrics:
                fh.write(json.dumps(row) + "\n")
        os.replace(tmp, metrics_path)
    return pset, metrics
