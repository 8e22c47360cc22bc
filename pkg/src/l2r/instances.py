"""Problem instances: definitions, random generators, file formats, objectives.

An :class:`Instance` is a set of planar nodes, optionally with demands and a
vehicle capacity (CVRP).  Generated instances live in the unit square; files
loaded from benchmark formats are rescaled into it at parse time, with the
original frame kept in ``scale_note`` so reported objectives can use raw
coordinates.  Demands are stored raw; solver state normalizes them by the
capacity so the remaining load is always a fraction in [0, 1].
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

KIND_TSP = "tsp"
KIND_CVRP = "cvrp"
_KINDS = (KIND_TSP, KIND_CVRP)

CLUSTER_PATTERNS = ("cluster", "explosion", "implosion")

# demands are drawn as integers from [1, DEMAND_MAX]
DEMAND_MAX = 9
_CLUSTER_SIGMA = 0.07
_EXPLOSION_RADIUS = 0.3
_IMPLOSION_FACTOR = 0.5


@dataclass
class Instance:
    """One routing problem: node coordinates plus optional demand data.

    Attributes:
        kind: ``"tsp"`` or ``"cvrp"``.
        coords: (n, 2) float array.  Generated instances are in [0, 1]^2;
            parsed benchmark files are rescaled into it.
        demands: (n,) float array for CVRP (index 0 is the depot, demand 0);
            None for TSP.
        capacity: vehicle capacity for CVRP; None for TSP.
        name: optional identifier carried through reports.
        scale_note: original-frame info for parsed files
            (``{"xmin", "ymin", "span"}``), used to de-normalize coordinates
            when reporting benchmark objectives.  None for native instances.
    """

    kind: str
    coords: np.ndarray
    demands: Optional[np.ndarray] = None
    capacity: Optional[float] = None
    name: str = ""
    scale_note: Optional[Dict[str, float]] = None

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.demands is not None:
            self.demands = np.asarray(self.demands, dtype=np.float64)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])

    @property
    def is_cvrp(self) -> bool:
        return self.kind == KIND_CVRP

    def validate(self) -> None:
        """Raise ValueError on any structural violation."""
        if self.kind not in _KINDS:
            raise ValueError(f"unknown problem kind: {self.kind!r}")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {self.coords.shape}")
        if self.coords.shape[0] < 2:
            raise ValueError("instance needs at least 2 nodes")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        if self.kind == KIND_TSP:
            if self.demands is not None or self.capacity is not None:
                raise ValueError("tsp instances carry no demands or capacity")
            return
        if self.demands is None or self.capacity is None:
            raise ValueError("cvrp instances need demands and capacity")
        if self.capacity <= 0:
            raise ValueError(f"invalid-capacity: capacity must be positive, got {self.capacity}")
        if self.demands.shape != (self.n,):
            raise ValueError(
                f"demands length {self.demands.shape} does not match {self.n} nodes"
            )
        if self.demands[0] != 0.0:
            raise ValueError("depot (index 0) must have demand 0")
        customer = self.demands[1:]
        if np.any(customer <= 0) or np.any(customer > self.capacity):
            raise ValueError("every customer demand must lie in (0, capacity]")

    def normalized_demands(self) -> np.ndarray:
        """Demands divided by capacity, so a full vehicle holds 1.0."""
        if not self.is_cvrp:
            raise ValueError("normalized_demands is only defined for cvrp")
        return self.demands / float(self.capacity)

    def raw_coords(self) -> np.ndarray:
        """Coordinates in the original frame (identity for native instances)."""
        if self.scale_note is None:
            return self.coords
        note = self.scale_note
        return self.coords * note["span"] + np.array([note["xmin"], note["ymin"]])

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "name": self.name,
            "coords": [[float(x), float(y)] for x, y in self.coords],
        }
        if self.is_cvrp:
            out["demands"] = [float(d) for d in self.demands]
            out["capacity"] = float(self.capacity)
        if self.scale_note is not None:
            out["scale_note"] = {k: float(v) for k, v in self.scale_note.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Instance":
        return cls(
            kind=data["kind"],
            coords=np.array(data["coords"], dtype=np.float64),
            demands=(
                np.array(data["demands"], dtype=np.float64) if "demands" in data else None
            ),
            capacity=data.get("capacity"),
            name=data.get("name", ""),
            scale_note=data.get("scale_note"),
        )

    def save(self, path: str) -> None:
        _atomic_write_text(path, json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str) -> "Instance":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Tour:
    """A closed TSP tour given as a visiting order (permutation of 0..n-1)."""

    order: List[int]
    objective: float = 0.0

    def to_dict(self) -> dict:
        return {"order": [int(i) for i in self.order], "objective": float(self.objective)}


@dataclass
class RoutePlan:
    """A CVRP solution: one customer sequence per vehicle route.

    Canonical form stores no depot indices inside routes and no empty routes;
    :func:`route_cost` reports violations instead of raising.
    """

    routes: List[List[int]]
    objective: float = 0.0

    def to_dict(self) -> dict:
        return {
            "routes": [[int(i) for i in r] for r in self.routes],
            "objective": float(self.objective),
        }


@dataclass
class FeasibilityReport:
    """Constraint check result for a RoutePlan: all violations, not just the first."""

    feasible: bool
    violations: List[str] = field(default_factory=list)
    route_loads: List[float] = field(default_factory=list)


def _atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file + rename so readers never see partial content."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -----------------------------
# Random generators
# -----------------------------


def _draw_demands(rng: np.random.Generator, n_customers: int) -> np.ndarray:
    # integers in [1, 9], stored as reals
    d = rng.integers(1, DEMAND_MAX + 1, size=n_customers).astype(np.float64)
    return np.concatenate([[0.0], d])


def _check_generate_args(kind: str, n: int, capacity: Optional[float]) -> float:
    if kind not in _KINDS:
        raise ValueError(f"unknown problem kind: {kind!r}")
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    if kind == KIND_TSP:
        if capacity is not None:
            raise ValueError("capacity is a cvrp-only argument")
        return 0.0
    cap = 50.0 if capacity is None else float(capacity)
    if cap <= DEMAND_MAX:
        raise ValueError(
            f"invalid-capacity: capacity must exceed the max demand {DEMAND_MAX}, got {cap}"
        )
    return cap


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_uniform(
    kind: str, n: int, *, capacity: Optional[float] = None, seed=0, name: str = ""
) -> Instance:
    """Uniform random instance in the unit square.

    For CVRP, ``n`` counts customers; a depot (index 0, demand 0) is added,
    so the instance has n + 1 nodes.  Demands are integers in [1, 9] stored
    as reals.  ``seed`` is an integer or a Generator to draw from.
    """
    cap = _check_generate_args(kind, n, capacity)
    rng = _as_rng(seed)
    if kind == KIND_TSP:
        coords = rng.random((n, 2))
        return Instance(kind=kind, coords=coords, name=name or f"tsp{n}-u")
    coords = rng.random((n + 1, 2))
    demands = _draw_demands(rng, n)
    return Instance(
        kind=kind,
        coords=coords,
        demands=demands,
        capacity=cap,
        name=name or f"cvrp{n}-u",
    )


def _cluster_coords(rng: np.random.Generator, n: int) -> np.ndarray:
    n_blobs = int(rng.integers(3, 9))
    centers = rng.random((n_blobs, 2))
    assign = rng.integers(0, n_blobs, size=n)
    pts = centers[assign] + rng.normal(0.0, _CLUSTER_SIGMA, size=(n, 2))
    return np.clip(pts, 0.0, 1.0)


def _explosion_coords(rng: np.random.Generator, n: int) -> np.ndarray:
    pts = rng.random((n, 2))
    r = _EXPLOSION_RADIUS
    # center at least r from every edge, so clamping cannot push a point
    # back strictly inside the evacuated disk
    center = rng.uniform(r, 1.0 - r, size=2)
    delta = pts - center
    dist = np.hypot(delta[:, 0], delta[:, 1])
    inside = dist < r
    safe = np.where(dist > 0.0, dist, 1.0)
    direction = delta / safe[:, None]
    direction[dist == 0.0] = (1.0, 0.0)
    pushed = center + direction * (r + dist)[:, None]
    pts = np.where(inside[:, None], pushed, pts)
    return np.clip(pts, 0.0, 1.0)


def _implosion_coords(rng: np.random.Generator, n: int) -> np.ndarray:
    pts = rng.random((n, 2))
    center = rng.random(2)
    delta = pts - center
    dist = np.hypot(delta[:, 0], delta[:, 1])
    inside = dist < _EXPLOSION_RADIUS
    pulled = center + delta * _IMPLOSION_FACTOR
    pts = np.where(inside[:, None], pulled, pts)
    return np.clip(pts, 0.0, 1.0)


def generate_clustered(
    kind: str,
    n: int,
    pattern: str,
    *,
    capacity: Optional[float] = None,
    seed: int = 0,
    name: str = "",
) -> Instance:
    """Structured instance: gaussian blobs, or a disk evacuated or contracted.

    Patterns:
        cluster: 3-8 gaussian blobs (sigma 0.07), clamped to the unit square.
        explosion: uniform points, then a random disk of radius 0.3 is
            evacuated by pushing interior points radially outward.
        implosion: uniform points, then a random disk of radius 0.3 is
            contracted toward its center by a factor 0.5.

    For CVRP the depot is the first of the n + 1 patterned points.
    """
    if pattern not in CLUSTER_PATTERNS:
        raise ValueError(f"unknown pattern: {pattern!r} (expected one of {CLUSTER_PATTERNS})")
    cap = _check_generate_args(kind, n, capacity)
    rng = _as_rng(seed)
    total = n if kind == KIND_TSP else n + 1
    if pattern == "cluster":
        coords = _cluster_coords(rng, total)
    elif pattern == "explosion":
        coords = _explosion_coords(rng, total)
    else:
        coords = _implosion_coords(rng, total)
    if kind == KIND_TSP:
        return Instance(kind=kind, coords=coords, name=name or f"tsp{n}-{pattern}")
    demands = _draw_demands(rng, n)
    return Instance(
        kind=kind,
        coords=coords,
        demands=demands,
        capacity=cap,
        name=name or f"cvrp{n}-{pattern}",
    )


# -----------------------------
# Benchmark file parsing (EUC_2D subset)
# -----------------------------


def _parse_error(lineno: int, message: str) -> ValueError:
    return ValueError(f"parse error at line {lineno}: {message}")


def _normalize_frame(raw: np.ndarray) -> Tuple[np.ndarray, Dict[str, float]]:
    xmin = float(raw[:, 0].min())
    ymin = float(raw[:, 1].min())
    span = float(max(raw[:, 0].max() - xmin, raw[:, 1].max() - ymin))
    if span <= 0.0:
        span = 1.0
    coords = (raw - np.array([xmin, ymin])) / span
    return coords, {"xmin": xmin, "ymin": ymin, "span": span}


def parse_benchmark(text: str, *, name: Optional[str] = None) -> Instance:
    """Parse the EUC_2D subset of the classic benchmark formats.

    Recognized keys: NAME, TYPE (TSP or CVRP), DIMENSION, EDGE_WEIGHT_TYPE
    (EUC_2D only), CAPACITY, and the NODE_COORD / DEMAND / DEPOT sections.
    Coordinates are rescaled to the unit square (aspect preserved); the
    original frame is kept in ``scale_note``.  For CVRP the depot is moved
    to index 0.  Malformed input raises ValueError with a line number.
    """
    lines = text.splitlines()
    header: Dict[str, str] = {}
    coords_raw: Dict[int, Tuple[float, float]] = {}
    demands_raw: Dict[int, float] = {}
    depot_ids: List[int] = []
    section = None
    dimension = None

    i = 0
    while i < len(lines):
        lineno = i + 1
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "EOF":
            break
        upper = line.upper()
        if upper.startswith("NODE_COORD_SECTION"):
            section = "coord"
            continue
        if upper.startswith("DEMAND_SECTION"):
            section = "demand"
            continue
        if upper.startswith("DEPOT_SECTION"):
            section = "depot"
            continue
        if section is None or ":" in line and any(
            upper.startswith(k)
            for k in ("NAME", "TYPE", "COMMENT", "DIMENSION", "EDGE_WEIGHT_TYPE", "CAPACITY")
        ):
            if ":" not in line:
                raise _parse_error(lineno, f"expected 'KEY : value', got {line!r}")
            key, _, value = line.partition(":")
            header[key.strip().upper()] = value.strip()
            if key.strip().upper() == "DIMENSION":
                try:
                    dimension = int(value.strip())
                except ValueError:
                    raise _parse_error(lineno, f"DIMENSION is not an integer: {value.strip()!r}")
            continue
        if section == "coord":
            parts = line.split()
            if len(parts) != 3:
                raise _parse_error(lineno, f"expected 'id x y', got {line!r}")
            try:
                node_id = int(parts[0])
                coords_raw[node_id] = (float(parts[1]), float(parts[2]))
            except ValueError:
                raise _parse_error(lineno, f"bad coordinate row: {line!r}")
        elif section == "demand":
            parts = line.split()
            if len(parts) != 2:
                raise _parse_error(lineno, f"expected 'id demand', got {line!r}")
            try:
                demands_raw[int(parts[0])] = float(parts[1])
            except ValueError:
                raise _parse_error(lineno, f"bad demand row: {line!r}")
        elif section == "depot":
            try:
                depot_id = int(line.split()[0])
            except ValueError:
                raise _parse_error(lineno, f"bad depot row: {line!r}")
            if depot_id == -1:
                section = None
            else:
                depot_ids.append(depot_id)
        else:
            raise _parse_error(lineno, f"unexpected content outside any section: {line!r}")

    problem_type = header.get("TYPE", "").upper()
    if problem_type not in ("TSP", "CVRP"):
        raise ValueError(f"unsupported TYPE: {header.get('TYPE')!r} (expected TSP or CVRP)")
    edge_type = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if edge_type != "EUC_2D":
        raise ValueError(
            f"unsupported-edge-weight: only EUC_2D is handled, got {edge_type or 'missing'!r}"
        )
    if dimension is None:
        raise ValueError("missing DIMENSION")
    if len(coords_raw) != dimension:
        raise ValueError(
            f"NODE_COORD_SECTION has {len(coords_raw)} rows, DIMENSION says {dimension}"
        )
    ids = sorted(coords_raw)
    if ids != list(range(1, dimension + 1)):
        raise ValueError("node ids must be exactly 1..DIMENSION")

    raw = np.array([coords_raw[j] for j in ids], dtype=np.float64)
    coords, note = _normalize_frame(raw)
    instance_name = name or header.get("NAME", "")

    if problem_type == "TSP":
        return Instance(kind=KIND_TSP, coords=coords, name=instance_name, scale_note=note)

    if "CAPACITY" not in header:
        raise ValueError("cvrp file is missing CAPACITY")
    capacity = float(header["CAPACITY"])
    if sorted(demands_raw) != ids:
        raise ValueError("DEMAND_SECTION must cover exactly the node ids 1..DIMENSION")
    if len(depot_ids) != 1:
        raise ValueError(f"expected exactly one depot, got {depot_ids}")
    depot = depot_ids[0]
    if depot not in coords_raw:
        raise ValueError(f"depot id {depot} has no coordinates")
    if demands_raw[depot] != 0.0:
        raise ValueError(f"depot id {depot} must have demand 0, got {demands_raw[depot]}")
    order = [depot] + [j for j in ids if j != depot]
    coords = coords[[j - 1 for j in order]]
    demands = np.array([demands_raw[j] for j in order], dtype=np.float64)
    return Instance(
        kind=KIND_CVRP,
        coords=coords,
        demands=demands,
        capacity=capacity,
        name=instance_name,
        scale_note=note,
    )


def load_instance(path: str) -> Instance:
    """Load an instance from native JSON or a benchmark text file (by content)."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return Instance.from_dict(json.loads(text))
    return parse_benchmark(text, name=os.path.splitext(os.path.basename(path))[0])


# -----------------------------
# Objectives
# -----------------------------


def _nint(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def tour_length(instance: Instance, order: Sequence[int], *, rounded: bool = False) -> float:
    """Closed-tour length under the euclidean metric.

    ``rounded=True`` reproduces the benchmark convention: each edge weight is
    the nearest integer of the raw-frame euclidean distance.  The order must
    visit every node exactly once.
    """
    n = instance.n
    idx = np.asarray(order, dtype=np.int64)
    if idx.shape != (n,):
        raise ValueError(f"tour visits {idx.shape[0]} nodes, instance has {n}")
    seen = np.zeros(n, dtype=bool)
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError("tour contains an out-of-range node index")
    seen[idx] = True
    if not seen.all():
        raise ValueError("tour is not a permutation: some node is missing")
    coords = instance.raw_coords() if rounded else instance.coords
    pts = coords[idx]
    diffs = pts - np.roll(pts, -1, axis=0)
    dists = np.hypot(diffs[:, 0], diffs[:, 1])
    if rounded:
        dists = _nint(dists)
    return float(dists.sum())


def route_cost(
    instance: Instance, routes: Sequence[Sequence[int]], *, rounded: bool = False
) -> Tuple[float, FeasibilityReport]:
    """Total CVRP cost plus a full constraint report.

    Every route starts and ends at the depot (index 0, never listed inside a
    route).  All violations are collected: bad indices, duplicated or missing
    customers, empty routes, per-route capacity overflow.  Cost sums the
    routes whose indices are valid; infeasibility is reported, not thrown.
    """
    if not instance.is_cvrp:
        raise ValueError("route_cost is only defined for cvrp instances")
    n = instance.n
    coords = instance.raw_coords() if rounded else instance.coords
    violations: List[str] = []
    loads: List[float] = []
    counts = np.zeros(n, dtype=np.int64)
    total = 0.0
    for r, route in enumerate(routes):
        route = list(route)
        if not route:
            violations.append(f"empty-route: route {r}")
            loads.append(0.0)
            continue
        valid = True
        for node in route:
            if not (1 <= node < n):
                violations.append(f"invalid-index: route {r} contains {node}")
                valid = False
            else:
                counts[node] += 1
        if not valid:
            loads.append(0.0)
            continue
        load = float(instance.demands[route].sum())
        loads.append(load)
        if load > instance.capacity + 1e-9:
            violations.append(
                f"capacity-overflow: route {r} load {load} exceeds capacity {instance.capacity}"
            )
        pts = coords[[0] + route + [0]]
        diffs = np.diff(pts, axis=0)
        dists = np.hypot(diffs[:, 0], diffs[:, 1])
        if rounded:
            dists = _nint(dists)
        total += float(dists.sum())
    for node in range(1, n):
        if counts[node] == 0:
            violations.append(f"missing-customer: {node}")
        elif counts[node] > 1:
            violations.append(f"duplicate-customer: {node} visited {counts[node]} times")
    return total, FeasibilityReport(
        feasible=not violations, violations=violations, route_loads=loads
    )
