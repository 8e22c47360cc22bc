"""Static search-space pruning: per-node nearest out-neighbor graphs.

Each node keeps directed edges to its ``ceil((1 - gamma) * (n - 1))``
nearest other nodes, dropping the farthest gamma-fraction.  Ranking is by
euclidean distance with ties broken toward the lower node index; the
comparator works on exact squared distances in float64 so both storage
modes agree bit-for-bit.

Two representations back the same contract:

* materialized: per-node index/distance arrays, cache-friendly and
  serializable.  Built with a KD-tree so the full distance matrix is never
  formed.
* implicit: only the per-node cut radius (k-th squared distance) plus the
  indices admitted on exact ties.  O(n) memory, used when the neighbor
  lists themselves would not fit (large n with small gamma keeps ~0.9 n
  edges per node).
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from l2r.instances import Instance

GRAPH_MAGIC = b"L2RG"
GRAPH_VERSION = 1

# materialize neighbor lists only while n * keep_count stays below this
MATERIALIZE_BUDGET = 24_000_000


def keep_count_for(n: int, gamma: float) -> int:
    """Edges kept per node: ceil((1 - gamma) * (n - 1))."""
    if not (0.0 <= gamma < 1.0):
        raise ValueError(f"invalid-gamma: gamma must lie in [0, 1), got {gamma}")
    if n < 2:
        raise ValueError(f"graph needs at least 2 nodes, got {n}")
    return int(math.ceil((1.0 - gamma) * (n - 1)))


def _sq_dists(coords: np.ndarray, i: int) -> np.ndarray:
    d = coords - coords[i]
    out = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    out[i] = np.inf
    return out


@dataclass
class SparseGraph:
    """Directed nearest-neighbor graph over one instance's nodes.

    Exactly one of the two representations is populated.  ``neighbors`` and
    ``neighbor_dists`` hold, per node, the kept out-neighbors in ascending
    distance order (ties by lower index).  In implicit mode ``cut_sq`` holds
    the squared distance of the last kept neighbor and ``tie_admits`` the
    node indices admitted at exactly that distance.
    """

    n: int
    gamma: float
    keep_count: int
    coords: np.ndarray
    neighbors: Optional[np.ndarray] = None        # (n, keep) int32
    neighbor_dists: Optional[np.ndarray] = None   # (n, keep) float64
    cut_sq: Optional[np.ndarray] = None           # (n,) float64
    tie_admits: Optional[List[np.ndarray]] = None

    @property
    def materialized(self) -> bool:
        return self.neighbors is not None

    def out_neighbors(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Kept out-neighbors of node i: (indices, distances), ascending."""
        if self.materialized:
            return self.neighbors[i], self.neighbor_dists[i]
        sq = _sq_dists(self.coords, i)
        order = np.lexsort((np.arange(self.n), sq))[: self.keep_count]
        return order.astype(np.int32), np.sqrt(sq[order])

    def admit_mask(self, i: int, j_indices: np.ndarray, sq_dists: np.ndarray) -> np.ndarray:
        """Which of the edges i -> j_indices exist, given their squared distances."""
        if self.materialized:
            return np.isin(j_indices, self.neighbors[i])
        cut = self.cut_sq[i]
        mask = sq_dists < cut
        at_cut = sq_dists == cut
        if at_cut.any():
            mask = mask | (at_cut & np.isin(j_indices, self.tie_admits[i]))
        return mask

    def is_edge(self, i: int, j: int) -> bool:
        if i == j:
            return False
        d = self.coords[j] - self.coords[i]
        sq = np.array([d[0] * d[0] + d[1] * d[1]])
        return bool(self.admit_mask(i, np.array([j]), sq)[0])

    def save(self, path: str) -> None:
        """Write the binary cache (materialized graphs only)."""
        if not self.materialized:
            raise ValueError("only materialized graphs can be cached")
        buf = io.BytesIO()
        buf.write(GRAPH_MAGIC)
        buf.write(struct.pack("<BQId", GRAPH_VERSION, self.n, self.keep_count, self.gamma))
        buf.write(np.ascontiguousarray(self.coords, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.neighbors, dtype="<i4").tobytes())
        buf.write(np.ascontiguousarray(self.neighbor_dists, dtype="<f8").tobytes())
        data = buf.getvalue()
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "SparseGraph":
        with open(path, "rb") as fh:
            data = fh.read()
        header = struct.calcsize("<BQId")
        if len(data) < 4 + header or data[:4] != GRAPH_MAGIC:
            raise ValueError("not a sparse-graph cache file (bad magic)")
        version, n, keep, gamma = struct.unpack_from("<BQId", data, 4)
        if version != GRAPH_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        off = 4 + header
        need = off + n * 2 * 8 + n * keep * 4 + n * keep * 8
        if len(data) != need:
            raise ValueError(f"truncated cache file: {len(data)} bytes, expected {need}")
        coords = np.frombuffer(data, dtype="<f8", count=n * 2, offset=off).reshape(n, 2).copy()
        off += n * 2 * 8
        nbrs = np.frombuffer(data, dtype="<i4", count=n * keep, offset=off).reshape(n, keep).copy()
        off += n * keep * 4
        dists = np.frombuffer(data, dtype="<f8", count=n * keep, offset=off).reshape(n, keep).copy()
        return cls(
            n=int(n), gamma=float(gamma), keep_count=int(keep), coords=coords,
            neighbors=nbrs, neighbor_dists=dists,
        )


def _canonical_topk(sq_row: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the keep smallest squared distances, ties toward lower index."""
    n = sq_row.shape[0]
    order = np.lexsort((np.arange(n), sq_row))
    return order[:keep]


def _build_materialized(coords: np.ndarray, keep: int) -> Tuple[np.ndarray, np.ndarray]:
    n = coords.shape[0]
    nbrs = np.empty((n, keep), dtype=np.int32)
    dists = np.empty((n, keep), dtype=np.float64)
    if n <= 2048:
        for i in range(n):
            sq = _sq_dists(coords, i)
            top = _canonical_topk(sq, keep)
            nbrs[i] = top
            dists[i] = np.sqrt(sq[top])
        return nbrs, dists
    tree = cKDTree(coords)
    slack = min(n, keep + 9)  # +1 for self, +8 to expose boundary ties
    chunk = max(1, 4_000_000 // slack)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        rows = np.arange(start, stop)
        _, idx = tree.query(coords[rows], k=slack)
        for local, i in enumerate(rows):
            cand = idx[local]
            cand = cand[cand != i]
            d = coords[cand] - coords[i]
            sq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
            # ties exactly at the cut must follow the global comparator; the
            # pool provably contains every tied node unless its own max sits
            # at the cut, in which case fall back to the full row
            if cand.shape[0] > keep:
                kth = np.partition(sq, keep - 1)[keep - 1]
                if cand.shape[0] < n - 1 and sq.max() <= kth:
                    full = _sq_dists(coords, i)
                    top = _canonical_topk(full, keep)
                    nbrs[i] = top
                    dists[i] = np.sqrt(full[top])
                    continue
            order = np.lexsort((cand, sq))[:keep]
            nbrs[i] = cand[order]
            dists[i] = np.sqrt(sq[order])
    return nbrs, dists


def _build_implicit(coords: np.ndarray, keep: int) -> Tuple[np.ndarray, List[np.ndarray]]:
    n = coords.shape[0]
    cut = np.empty(n, dtype=np.float64)
    admits: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    chunk = max(1, 24_000_000 // n)
    x = coords[:, 0]
    y = coords[:, 1]
    rows = min(chunk, n)
    buf_a = np.empty((rows, n))
    buf_b = np.empty((rows, n))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        r = stop - start
        # the direct subtract-square formula, bit-identical to what callers
        # of admit_mask compute per query; a gemm formulation would disagree
        # in the last ulp and flip boundary memberships
        sq = buf_a[:r]
        np.subtract(x[start:stop, None], x[None, :], out=sq)
        np.multiply(sq, sq, out=sq)
        other = buf_b[:r]
        np.subtract(y[start:stop, None], y[None, :], out=other)
        np.multiply(other, other, out=other)
        np.add(sq, other, out=sq)
        sq[np.arange(r), np.arange(start, stop)] = np.inf
        kth = np.partition(sq, keep - 1, axis=1)[:, keep - 1]
        cut[start:stop] = kth
        strict = np.count_nonzero(sq < kth[:, None], axis=1)
        at_cut = sq == kth[:, None]
        counts = np.count_nonzero(at_cut, axis=1)
        _, cols_idx = np.nonzero(at_cut)  # cols ascend within each row
        bounds = np.cumsum(counts)[:-1]
        for local, tied in enumerate(np.split(cols_idx.astype(np.int64), bounds)):
            admits[start + local] = tied[: keep - strict[local]]
    return cut, admits


def build_sparse_graph(
    instance: Instance, gamma: float = 0.1, *, mode: str = "auto"
) -> SparseGraph:
    """Prune the complete graph down to each node's nearest out-neighbors.

    ``mode`` picks the representation: "materialized", "implicit", or "auto"
    (materialize while the lists fit :data:`MATERIALIZE_BUDGET` entries).
    Deterministic for fixed input in either mode, and both modes define
    exactly the same edge set.
    """
    n = instance.n
    keep = keep_count_for(n, gamma)
    coords = np.asarray(instance.coords, dtype=np.float64)
    if mode not in ("auto", "materialized", "implicit"):
        raise ValueError(f"unknown mode: {mode!r}")
    if mode == "auto":
        mode = "materialized" if n * keep <= MATERIALIZE_BUDGET else "implicit"
    if mode == "materialized":
        nbrs, dists = _build_materialized(coords, keep)
        return SparseGraph(
            n=n, gamma=gamma, keep_count=keep, coords=coords,
            neighbors=nbrs, neighbor_dists=dists,
        )
    cut, admits = _build_implicit(coords, keep)
    return SparseGraph(
        n=n, gamma=gamma, keep_count=keep, coords=coords,
        cut_sq=cut, tie_admits=admits,
    )
