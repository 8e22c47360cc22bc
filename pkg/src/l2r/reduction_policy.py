"""Dynamic search-space reduction: score feasible nodes, keep the top k.

At every construction step the policy embeds all nodes once per instance,
builds a context vector from the first/last visited nodes (plus remaining
load for CVRP), mixes it over the feasible set with the gated attention
primitive, and scores each feasible node with a clipped-tanh compatibility.
The k best scores (ties toward the lower node index) form the candidate set
handed to the local construction model.

A distance-only baseline (`dssr_candidates`, the k nearest feasible nodes)
shares the CandidateSet contract so the two reduction routes are
interchangeable downstream.

Scoring runs in two flavors with identical math: a tape flavor used during
training (weights are autodiff leaves), and a precomputed fast flavor used
for inference where exp(K) terms are cached once per instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from l2r import autodiff as ad
from l2r.autodiff import Operand, value_of
from l2r.instances import Instance, KIND_CVRP, KIND_TSP
from l2r.neural_core import ModelConfig


@dataclass
class CandidateSet:
    """Up to k candidate nodes, ordered by descending score then index.

    ``scores`` holds the softmax probabilities of the scored entries (None
    for the distance-only baseline).  For CVRP the depot may be appended
    after the scored entries regardless of score; ``depot_appended`` marks
    that, and ``scored_count`` tells how many leading entries came from the
    top-k rule.
    """

    indices: np.ndarray
    scores: Optional[np.ndarray]
    k: int
    scored_count: int
    depot_appended: bool = False


def reduction_features(instance: Instance) -> np.ndarray:
    """Static node features: (x, y) for TSP, (x, y, demand/capacity) for CVRP."""
    if instance.is_cvrp:
        return np.concatenate(
            [instance.coords, instance.normalized_demands()[:, None]], axis=1
        )
    return instance.coords.copy()


def softmax_np(u: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis of a plain array (-inf allowed)."""
    shifted = u - u.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def canonical_top(values: np.ndarray, indices: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest values; ties go to the lower node index.

    Returns positions into `values`/`indices`, ordered by descending value
    then ascending index.  Uses a partition prefilter so the full sort only
    touches ~k entries.
    """
    m = values.shape[0]
    if k >= m:
        pool = np.arange(m)
    else:
        kth = np.partition(values, m - k)[m - k]
        pool = np.flatnonzero(values >= kth)
    order = np.lexsort((indices[pool], -values[pool]))
    return pool[order[:k]]


def sample_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Inverse-CDF sample; robust to float32 probabilities not summing to 1."""
    c = np.cumsum(probs.astype(np.float64))
    return int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, len(probs) - 1))


# -----------------------------
# Model pieces (tape or plain arrays)
# -----------------------------


def embed_nodes(weights: Dict[str, Operand], features: np.ndarray) -> Operand:
    """Shared linear embedding of the static node features."""
    return ad.add(ad.matmul(features, weights["red.embed.W"]), weights["red.embed.b"])


def context_vector(
    weights: Dict[str, Operand],
    H: Operand,
    kind: str,
    first: int,
    last: int,
    q_remain: float,
    dtype: np.dtype,
) -> Operand:
    """Decoding context: first/last node embeddings (TSP) or last + load (CVRP)."""
    h_last = ad.pick_row(H, last)
    if kind == KIND_TSP:
        return ad.add(
            ad.matmul(ad.pick_row(H, first), weights["red.W_first"]),
            ad.matmul(h_last, weights["red.W_last"]),
        )
    q = np.array([[q_remain]], dtype=dtype)
    return ad.matmul(ad.concat_cols([h_last, q]), weights["red.W_last"])


def adaptation_bias(
    alpha: Operand, dists: np.ndarray, pool_size: int, dtype: np.dtype
) -> Operand:
    """Distance bias -alpha * log2(pool_size) * d, as a (1, m) row."""
    const = (-math.log2(pool_size) * dists).astype(dtype).reshape(1, -1)
    return ad.mul(alpha, const)


def score_feasible(
    weights: Dict[str, Operand],
    H: Operand,
    K: Operand,
    V: Operand,
    feas_idx: np.ndarray,
    dists_from_last: np.ndarray,
    *,
    config: ModelConfig,
    kind: str,
    first: int,
    last: int,
    q_remain: float,
    n_total: int,
    disable_bias: bool = False,
) -> Tuple[Operand, Operand, np.ndarray]:
    """Scores over the feasible set.

    Returns (u, log_probs, probs_values): `u` the clipped logits as a (1, m)
    operand, `log_probs` its log-softmax, and `probs_values` a plain float
    array for sampling and top-k selection.
    """
    dtype = value_of(H).dtype
    H_A = ad.gather_rows(H, feas_idx)
    K_A = ad.gather_rows(K, feas_idx)
    V_A = ad.gather_rows(V, feas_idx)
    h_c = context_vector(weights, H, kind, first, last, q_remain, dtype)
    if disable_bias:
        a_row: Operand = np.zeros((1, len(feas_idx)), dtype=dtype)
    else:
        a_row = adaptation_bias(weights["red.alpha"], dists_from_last, n_total, dtype)
    h_hat = ad.aafm(h_c, K_A, V_A, a_row)
    compat = ad.mul(ad.matmul(h_hat, ad.transpose(H_A)), 1.0 / math.sqrt(config.d))
    pre = compat if disable_bias else ad.add(compat, a_row)
    u = ad.mul(ad.tanh(pre), config.xi)
    log_probs = ad.log_softmax(u)
    probs = softmax_np(value_of(u).astype(np.float64))[0]
    return u, log_probs, probs


def select_candidates(
    probs: np.ndarray, feas_idx: np.ndarray, k: int
) -> CandidateSet:
    """Top-k of the scored feasible set, canonical order."""
    pos = canonical_top(probs, feas_idx, k)
    return CandidateSet(
        indices=feas_idx[pos].astype(np.int64),
        scores=probs[pos].copy(),
        k=k,
        scored_count=len(pos),
    )


def dssr_candidates(feas_idx: np.ndarray, dists: np.ndarray, k: int) -> CandidateSet:
    """Distance-only baseline: the k nearest feasible nodes (ties by index)."""
    pos = canonical_top(-dists, feas_idx, k)
    return CandidateSet(
        indices=feas_idx[pos].astype(np.int64),
        scores=None,
        k=k,
        scored_count=len(pos),
    )


def append_depot(cand: CandidateSet) -> CandidateSet:
    """CVRP: the depot joins the candidate set whenever leaving it is legal.

    The demand mask can never admit the depot (its demand is 0), so it is
    appended after the scored entries, independent of any score.
    """
    indices = np.concatenate([cand.indices, [0]])
    scores = None if cand.scores is None else np.concatenate([cand.scores, [0.0]])
    return CandidateSet(
        indices=indices.astype(np.int64),
        scores=scores,
        k=cand.k,
        scored_count=cand.scored_count,
        depot_appended=True,
    )


# -----------------------------
# Fast per-instance scorer (inference path)
# -----------------------------


class FastScorer:
    """Per-instance caches for inference-time scoring.

    exp(K) is shifted by a global per-column max once; the attention ratio
    is invariant to the shift, so per-step work drops to one bias row and
    three (m, d) reductions.  Infeasible columns are excluded by -inf bias
    entries, which become exact zeros under exp.
    """

    def __init__(self, weights: Dict[str, np.ndarray], instance: Instance, config: ModelConfig):
        self.config = config
        self.kind = instance.kind
        self.n_total = instance.n
        dtype = weights["red.embed.W"].dtype
        self.dtype = dtype
        feats = reduction_features(instance).astype(dtype)
        self.H = feats @ weights["red.embed.W"] + weights["red.embed.b"]
        K = self.H @ weights["red.W_K"]
        V = self.H @ weights["red.W_V"]
        self.expK = np.exp(K - K.max(axis=0, keepdims=True))
        self.expKV = self.expK * V
        self.weights = weights
        self.log2n = math.log2(max(self.n_total, 2))
        self.alpha = float(weights["red.alpha"][0, 0])
        self.scale = 1.0 / math.sqrt(config.d)

    def context(self, first: int, last: int, q_remain: float) -> np.ndarray:
        w = self.weights
        if self.kind == KIND_TSP:
            return self.H[first : first + 1] @ w["red.W_first"] + self.H[last : last + 1] @ w["red.W_last"]
        cat = np.concatenate(
            [self.H[last : last + 1], np.array([[q_remain]], dtype=self.dtype)], axis=1
        )
        return cat @ w["red.W_last"]

    def scores_over(
        self,
        rows_H: np.ndarray,
        rows_expK: np.ndarray,
        rows_expKV: np.ndarray,
        dists: np.ndarray,
        feasible_mask: np.ndarray,
        first: int,
        last: int,
        q_remain: float,
        disable_bias: bool = False,
    ) -> np.ndarray:
        """Clipped logits over a block of node rows; -inf where infeasible.

        `dists` are raw euclidean distances from the last node to each row's
        node; `feasible_mask` marks the scored (feasible) rows.
        """
        if disable_bias:
            a = np.zeros(dists.shape[0], dtype=self.dtype)
        else:
            a = (-self.alpha * self.log2n) * dists.astype(self.dtype)
        a_masked = np.where(feasible_mask, a, -np.inf)
        shift = a_masked.max()
        eA = np.exp(a_masked - shift)
        num = eA @ rows_expKV
        den = eA @ rows_expK
        if np.any(den == 0.0):
            raise ValueError("attention denominator underflowed to zero")
        h_c = self.context(first, last, q_remain)
        sig = ad.sigmoid(h_c)[0]
        h_hat = sig * (num / den)
        compat = (rows_H @ h_hat) * self.scale
        pre = compat if disable_bias else compat + a
        u = self.config.xi * np.tanh(pre)
        return np.where(feasible_mask, u, -np.inf)
