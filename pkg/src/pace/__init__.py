"""Category-level 3D pose and shape estimation from keypoint detections.

Certifiably optimal solving of the active-shape registration problem
(closed-form translation and shape mixture, semidefinite rotation relaxation
with a duality-gap certificate), graph-theoretic outlier pruning through
convex-hull compatibility and maximum cliques, robust estimation by graduated
non-convexity, baselines, and a Monte Carlo benchmark harness.
"""

from .bench import (
    GenParams,
    ResultRow,
    SweepConfig,
    SyntheticInstance,
    generate_instance,
    generate_outlier_free,
    generate_robust_instance,
    random_rotation,
    rotation_error,
    run_monte_carlo,
)
from .core import (
    CenteredData,
    DegenerateProblemError,
    KeypointMeasurements,
    LibraryFormatError,
    MeasurementFormatError,
    Pose,
    ShapeCoefficients,
    ShapeLibrary,
    SolverFailureError,
    center_and_weight,
    load_measurements,
    load_shape_library,
    weighted_centroids,
)
from .pruning import (
    CompatibilityGraph,
    MaxCliqueResult,
    PairwiseBounds,
    PruneParams,
    compatibility_graph,
    maximum_clique,
    pairwise_bounds,
)
from .robust import (
    GncState,
    RobustParams,
    alternating_minimization,
    clique_pace_star,
    gnc_tls,
    irls,
    pace_hash,
    wahba_svd,
)
from .sdp import SdpSolution, duality_gap, round_rotation, solve_rotation_sdp
from .solver import (
    Certificate,
    Estimate,
    RotationQCQP,
    ShapeCache,
    assemble_rotation_qcqp,
    build_shape_cache,
    clamp_to_simplex,
    pace_star,
    registration_cost,
    residual_norms,
    solve_shape,
    solve_translation,
)

__version__ = "0.1.0"
