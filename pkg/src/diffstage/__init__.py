"""Disease-progression trajectory reconstruction on learned coupling graphs.

The package reconstructs cohort-level biomarker trajectories from irregular
longitudinal snapshots by jointly optimizing subject pseudo-time placement and
the parameters of a graph-coupled diffusion-aggregation flow. The coupling
graph may be a measured connectome, a blend of several, or a probabilistic
graph inferred from text-generation providers, filtered to sparsity and
weight-refined from data.
"""

from .errors import DataError, DiffstageError, NumericError, ParseError, ProviderError
from .graphs import (
    BinaryGraph,
    FilterSpec,
    LaplacianMatrix,
    MixWeights,
    Region,
    RegionAtlas,
    SimilarityReport,
    WeightedGraph,
    apply_support,
    degree_matrix,
    desikan_killiany_atlas,
    filter_graph,
    graph_similarity,
    laplacian,
    mix_laplacians,
    novel_links,
)
from .dynamics import (
    CarryingCapacity,
    InitialState,
    ModelKind,
    ModelParams,
    Trajectory,
    carrying_capacity,
    integrate,
    ndm_rhs,
    sample_trajectory,
    seed_initial,
)
from .staging import (
    Cohort,
    FitState,
    OptimizerConfig,
    Scan,
    StageAssignment,
    Subject,
    fit,
    stage_holdout,
    stage_subject,
    subject_sse,
)
from .evaluation import (
    FoldSpec,
    Metrics,
    SweepResult,
    aic,
    compare_models,
    make_folds,
    pearson_r,
    sse,
    threshold_sweep,
)

__version__ = "0.1.0"
