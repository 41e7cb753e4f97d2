"""Link-utilization prediction toolkit.

Simulates splittable-flow routing (shortest-path and equal-cost multi-path)
over capacitated directed graphs, synthesizes gravity-model traffic datasets
labeled with the achieved maximum link utilization, and trains graph
attention models with per-edge weights against standard baselines to
predict that utilization directly from demand matrices.
"""

from .errors import ConvergenceError, ParseError, SamplingError, ValidationError
from .mcnf_lp import MinMluResult, min_mlu, rescale_demands
from .routing import DemandMatrix, RoutingOutcome, per_pair_flows, route, route_ecmp, route_ssp
from .topology import Edge, Node, Topology, TopologyMetrics, compute_metrics, parse_topology
from .traffic import Dataset, build_datasets, gravity_dm, load_datasets, save_datasets

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "ParseError",
    "SamplingError",
    "ValidationError",
    "MinMluResult",
    "min_mlu",
    "rescale_demands",
    "DemandMatrix",
    "RoutingOutcome",
    "per_pair_flows",
    "route",
    "route_ecmp",
    "route_ssp",
    "Edge",
    "Node",
    "Topology",
    "TopologyMetrics",
    "compute_metrics",
    "parse_topology",
    "Dataset",
    "build_datasets",
    "gravity_dm",
    "load_datasets",
    "save_datasets",
    "__version__",
]
