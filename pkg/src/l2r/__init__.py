"""Learning-to-reduce constructive solver for TSP and CVRP.

The pipeline has three stages: a static sparse graph keeps each node's
nearest out-neighbors, a small learned policy narrows the feasible set to a
k-node candidate set at every construction step, and a local attention model
picks the next node from that candidate set.  Training is joint REINFORCE
over both policies; a destroy-repair pass can polish finished solutions.
"""

from l2r.instances import (
    Instance,
    Tour,
    RoutePlan,
    FeasibilityReport,
    generate_uniform,
    generate_clustered,
    parse_benchmark,
    tour_length,
    route_cost,
)
from l2r.static_reduction import SparseGraph, build_sparse_graph
from l2r.neural_core import ModelConfig, ParameterSet
from l2r.rollout import PolicyBundle, construct
from l2r.prc import PrcConfig, improve
from l2r.training import TrainConfig, train
from l2r.evaluation import held_karp, nearest_neighbor, optimality_gap

__version__ = "0.1.0"

__all__ = [
    "Instance",
    "Tour",
    "RoutePlan",
    "FeasibilityReport",
    "generate_uniform",
    "generate_clustered",
    "parse_benchmark",
    "tour_length",
    "route_cost",
    "SparseGraph",
    "build_sparse_graph",
    "ModelConfig",
    "ParameterSet",
    "PolicyBundle",
    "construct",
    "PrcConfig",
    "improve",
    "TrainConfig",
    "train",
    "held_karp",
    "nearest_neighbor",
    "optimality_gap",
    "__version__",
]
