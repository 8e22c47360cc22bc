"""Local construction: pick the next node from a normalized candidate view.

The candidate set plus the first and last visited nodes form a small
subproblem.  Its coordinates are rescaled so the candidates span the unit
square (aspect preserved; first/last mapped by the same transform and then
clamped into it), embedded with role-specific projections, refined by a
stack of gated-attention encoder layers whose pair bias shrinks with
distance, and scored by a clipped-tanh compatibility head against the
first+last context.

`choose_next` is the per-step operand path (tape during training, plain
arrays otherwise); `pad_batch` + `batched_choose` run the same computation
for many subgraphs at once with explicit masking, for greedy inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from l2r import autodiff as ad
from l2r.autodiff import Operand, value_of
from l2r.instances import Instance, KIND_CVRP, KIND_TSP
from l2r.neural_core import ModelConfig, layer_forward, layer_weights
from l2r.reduction_policy import CandidateSet, softmax_np

LN_EPS = 1e-6


@dataclass
class SubGraph:
    """One step's local view: normalized first/last/candidate geometry."""

    kind: str
    cand_idx: np.ndarray       # global node indices, candidate order
    first_xy: np.ndarray       # (2,) normalized, clamped to [0, 1]
    last_xy: np.ndarray        # (2,) normalized, clamped to [0, 1]
    cand_xy: np.ndarray        # (m, 2) normalized
    r: float                   # scale used (0 for a degenerate box)
    pair_dists: np.ndarray     # (2+m, 2+m) distances in normalized coords
    last_to_cand: np.ndarray   # (m,) distances in normalized coords
    cand_demand_frac: Optional[np.ndarray] = None  # demand / q_remain
    q_remain: float = 0.0

    @property
    def size(self) -> int:
        return int(self.cand_idx.shape[0])


def normalize_subgraph(
    first_xy: np.ndarray, last_xy: np.ndarray, cand_xy: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Rescale so candidates span [0, 1]^2; first/last follow, then clamp.

    The scale is 1 / max(width, height) of the candidate bounding box; a
    degenerate box (all candidates coincide) maps every point to the origin.
    """
    mins = cand_xy.min(axis=0)
    extent = float(np.max(cand_xy.max(axis=0) - mins))
    r = 0.0 if extent <= 0.0 else 1.0 / extent
    cand = (cand_xy - mins) * r
    first = np.clip((first_xy - mins) * r, 0.0, 1.0)
    last = np.clip((last_xy - mins) * r, 0.0, 1.0)
    return first, last, cand, r


def build_subgraph(
    instance: Instance,
    first: int,
    last: int,
    cand: CandidateSet,
    q_remain: float = 0.0,
) -> SubGraph:
    """Assemble the normalized step view for one candidate set."""
    coords = instance.coords
    f_xy, l_xy, c_xy, r = normalize_subgraph(
        coords[first], coords[last], coords[cand.indices]
    )
    pts = np.concatenate([f_xy[None, :], l_xy[None, :], c_xy], axis=0)
    diff = pts[:, None, :] - pts[None, :, :]
    pair = np.hypot(diff[..., 0], diff[..., 1])
    frac = None
    if instance.is_cvrp:
        demand = instance.normalized_demands()[cand.indices]
        frac = demand / q_remain if q_remain > 0.0 else np.zeros_like(demand)
    return SubGraph(
        kind=instance.kind,
        cand_idx=cand.indices,
        first_xy=f_xy,
        last_xy=l_xy,
        cand_xy=c_xy,
        r=r,
        pair_dists=pair,
        last_to_cand=pair[1, 2:],
        cand_demand_frac=frac,
        q_remain=q_remain,
    )


def embed_subgraph(weights: Dict[str, Operand], sg: SubGraph, dtype: np.dtype) -> Operand:
    """Initial embeddings: role projections for first/last, demand/load terms
    for CVRP, shared linear map for everything."""
    pts = np.concatenate([sg.first_xy[None, :], sg.last_xy[None, :], sg.cand_xy], axis=0)
    base = ad.add(ad.matmul(pts.astype(dtype), weights["loc.embed.W"]), weights["loc.embed.b"])
    first_row = ad.matmul(ad.pick_row(base, 0), weights["loc.W1"])
    last_row = ad.matmul(ad.pick_row(base, 1), weights["loc.W2"])
    cand_rows = ad.slice_rows(base, 2)
    if sg.kind == KIND_CVRP:
        load = float(sg.q_remain)
        first_row = ad.add(first_row, ad.mul(weights["loc.W_load"], load))
        last_row = ad.add(last_row, ad.mul(weights["loc.W_load"], load))
        frac_col = sg.cand_demand_frac.astype(dtype).reshape(-1, 1)
        cand_rows = ad.add(cand_rows, ad.matmul(frac_col, weights["loc.W_demand"]))
    return ad.concat_rows([first_row, last_row, cand_rows])


def choose_next(
    weights: Dict[str, Operand],
    sg: SubGraph,
    config: ModelConfig,
    disable_bias: bool = False,
) -> Tuple[Operand, Operand, np.ndarray]:
    """Candidate logits after the encoder stack.

    Returns (u, log_probs, probs_values) over the candidates in subgraph
    order.  Logits are xi * tanh(compatibility / sqrt(d) + bias).
    """
    dtype = value_of(weights["loc.embed.W"]).dtype
    m = sg.size
    log2m = math.log2(m) if m > 1 else 0.0
    H = embed_subgraph(weights, sg, dtype)
    if disable_bias:
        A: Operand = np.zeros_like(sg.pair_dists, dtype=dtype)
        head_bias: Optional[Operand] = None
    else:
        A = ad.mul(weights["loc.alpha"], (-log2m * sg.pair_dists).astype(dtype))
        head_bias = ad.mul(
            weights["loc.alpha"], (-log2m * sg.last_to_cand).astype(dtype).reshape(1, -1)
        )
    for i in range(config.layers):
        H = layer_forward(H, A, layer_weights(weights, i), LN_EPS)
    h_c = ad.add(ad.pick_row(H, 0), ad.pick_row(H, 1))
    compat = ad.mul(
        ad.matmul(h_c, ad.transpose(ad.slice_rows(H, 2))), 1.0 / math.sqrt(config.d)
    )
    pre = compat if head_bias is None else ad.add(compat, head_bias)
    u = ad.mul(ad.tanh(pre), config.xi)
    log_probs = ad.log_softmax(u)
    probs = softmax_np(value_of(u).astype(np.float64))[0]
    return u, log_probs, probs


# -----------------------------
# Batched inference path
# -----------------------------


@dataclass
class PaddedBatch:
    """Stacked subgraphs, right-padded to the widest candidate count."""

    kind: str
    pts: np.ndarray        # (B, 2 + kmax, 2)
    mask: np.ndarray       # (B, kmax) True where a real candidate sits
    pair: np.ndarray       # (B, 2 + kmax, 2 + kmax)
    last_to_cand: np.ndarray  # (B, kmax)
    sizes: np.ndarray      # (B,) real candidate counts
    frac: Optional[np.ndarray] = None  # (B, kmax)
    q: Optional[np.ndarray] = None     # (B,)


def pad_batch(sgs: List[SubGraph]) -> PaddedBatch:
    """Stack subgraphs with zero padding and an explicit candidate mask."""
    if not sgs:
        raise ValueError("pad_batch needs at least one subgraph")
    kind = sgs[0].kind
    kmax = max(sg.size for sg in sgs)
    B = len(sgs)
    pts = np.zeros((B, 2 + kmax, 2))
    mask = np.zeros((B, kmax), dtype=bool)
    pair = np.zeros((B, 2 + kmax, 2 + kmax))
    d_last = np.zeros((B, kmax))
    sizes = np.zeros(B, dtype=np.int64)
    frac = np.zeros((B, kmax)) if kind == KIND_CVRP else None
    q = np.zeros(B) if kind == KIND_CVRP else None
    for b, sg in enumerate(sgs):
        m = sg.size
        pts[b, 0] = sg.first_xy
        pts[b, 1] = sg.last_xy
        pts[b, 2 : 2 + m] = sg.cand_xy
        mask[b, :m] = True
        pair[b, : 2 + m, : 2 + m] = sg.pair_dists
        d_last[b, :m] = sg.last_to_cand
        sizes[b] = m
        if kind == KIND_CVRP:
            frac[b, :m] = sg.cand_demand_frac
            q[b] = sg.q_remain
    return PaddedBatch(
        kind=kind, pts=pts, mask=mask, pair=pair, last_to_cand=d_last,
        sizes=sizes, frac=frac, q=q,
    )


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return (c / np.sqrt(var + LN_EPS)) * g + b


def _aafm_np(Q: np.ndarray, K: np.ndarray, V: np.ndarray, A: np.ndarray) -> np.ndarray:
    eK = np.exp(K - K.max(axis=1, keepdims=True))
    eA = np.exp(A - A.max(axis=2, keepdims=True))
    num = eA @ (eK * V)
    den = eA @ eK
    return _sigmoid_np(Q) * (num / den)


def batched_choose(
    weights: Dict[str, np.ndarray],
    batch: PaddedBatch,
    config: ModelConfig,
    disable_bias: bool = False,
) -> np.ndarray:
    """Candidate probabilities, (B, kmax); padded entries are exactly zero.

    Plain-array mirror of `choose_next` over a padded stack.  Padded
    candidates are excluded from the attention mixing by -inf pair bias
    columns and from the head softmax by -inf logits.
    """
    dtype = weights["loc.embed.W"].dtype
    pts = batch.pts.astype(dtype)
    base = pts @ weights["loc.embed.W"] + weights["loc.embed.b"]
    first = base[:, 0:1] @ weights["loc.W1"]
    last = base[:, 1:2] @ weights["loc.W2"]
    cand = base[:, 2:]
    if batch.kind == KIND_CVRP:
        load = batch.q.astype(dtype)[:, None, None]
        first = first + load * weights["loc.W_load"]
        last = last + load * weights["loc.W_load"]
        cand = cand + batch.frac.astype(dtype)[:, :, None] * weights["loc.W_demand"]
    H = np.concatenate([first, last, cand], axis=1)

    log2m = np.where(batch.sizes > 1, np.log2(batch.sizes), 0.0)
    alpha = float(weights["loc.alpha"][0, 0])
    if disable_bias:
        A = np.zeros_like(batch.pair, dtype=dtype)
    else:
        A = (-alpha * log2m[:, None, None] * batch.pair).astype(dtype)
    # padded candidates must never be mixed in: kill their key columns
    pad_cols = np.concatenate(
        [np.zeros((batch.mask.shape[0], 2), dtype=bool), ~batch.mask], axis=1
    )
    A = np.where(pad_cols[:, None, :], -np.inf, A)

    for i in range(config.layers):
        lw = layer_weights(weights, i)
        mixed = _aafm_np(H @ lw["W_Q"], H @ lw["W_K"], H @ lw["W_V"], A)
        h = _ln_np(H + mixed, lw["ln1.g"], lw["ln1.b"])
        ff = np.maximum(h @ lw["ff.W1"] + lw["ff.b1"], 0.0) @ lw["ff.W2"] + lw["ff.b2"]
        H = _ln_np(h + ff, lw["ln2.g"], lw["ln2.b"])

    h_c = H[:, 0] + H[:, 1]
    compat = np.einsum("bd,bmd->bm", h_c, H[:, 2:]) / math.sqrt(config.d)
    if not disable_bias:
        compat = compat + (-alpha * log2m[:, None] * batch.last_to_cand).astype(dtype)
    u = config.xi * np.tanh(compat)
    u = np.where(batch.mask, u, -np.inf)
    return softmax_np(u.astype(np.float64))
