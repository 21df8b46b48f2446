"""Dynamic optimal mass transport on grids, channel graphs, and images.

Core pieces: staggered space-time fields and difference operators (grid),
channel graphs with a source-layer construction for unbalanced endpoints
(graph), the perspective energy and its exact pointwise prox (energy), exact
projection onto the continuity constraint (projection), the splitting solver
(solver), brute-force validation references (oracles), Netpbm image IO
(netpbm), a scikit-learn style estimator (estimator), and a CLI (cli).
"""
from .energy import (
    EnergyBreakdown,
    apply_prox,
    centered_energy,
    edge_density,
    prox_batch,
    prox_perspective,
    total_energy,
)
from .estimator import DynamicTransport
from .graph import (
    PRIMARY_ENDPOINT,
    TWO_POINT,
    AugmentationReport,
    ChannelGraph,
    EdgeCoupling,
    augment_scalar,
    augment_vector,
    graph_divergence,
    graph_divergence_adjoint,
    recover_source,
)
from .grid import (
    CenteredState,
    FaceField,
    GridSpec,
    StateFields,
    adjoint_of,
    face_to_center,
    face_to_center_adjoint,
    spatial_divergence,
    spatial_divergence_adjoint,
    time_average,
    time_average_adjoint,
    time_difference,
    time_difference_adjoint,
)
from .netpbm import read_density_image, read_netpbm, write_netpbm
from .oracles import (
    DiscreteCoupling,
    LinearOp,
    finite_check,
    lp_w2,
    prox_bruteforce,
    reaction_energy,
    reaction_energy_numeric,
)
from .projection import ConstraintSystem, ProjectionError
from .solver import (
    Problem,
    Solution,
    SolverOptions,
    balanced_problem,
    complete_edges,
    initial_state,
    interpolation_frames,
    scalar_problem,
    solve,
    sweep,
    vector_problem,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationReport",
    "CenteredState",
    "ChannelGraph",
    "ConstraintSystem",
    "DiscreteCoupling",
    "DynamicTransport",
    "EdgeCoupling",
    "EnergyBreakdown",
    "FaceField",
    "GridSpec",
    "LinearOp",
    "PRIMARY_ENDPOINT",
    "Problem",
    "ProjectionError",
    "Solution",
    "SolverOptions",
    "StateFields",
    "TWO_POINT",
    "adjoint_of",
    "apply_prox",
    "augment_scalar",
    "augment_vector",
    "balanced_problem",
    "centered_energy",
    "complete_edges",
    "edge_density",
    "face_to_center",
    "face_to_center_adjoint",
    "finite_check",
    "graph_divergence",
    "graph_divergence_adjoint",
    "initial_state",
    "interpolation_frames",
    "lp_w2",
    "prox_batch",
    "prox_bruteforce",
    "prox_perspective",
    "read_density_image",
    "read_netpbm",
    "recover_source",
    "reaction_energy",
    "reaction_energy_numeric",
    "scalar_problem",
    "solve",
    "spatial_divergence",
    "spatial_divergence_adjoint",
    "sweep",
    "time_average",
    "time_average_adjoint",
    "time_difference",
    "time_difference_adjoint",
    "total_energy",
    "vector_problem",
    "write_netpbm",
]
