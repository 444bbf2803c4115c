"""Decentralized kernel ridge regression with data-dependent random features.

Each node of a communication graph learns its own random-feature model
``f_j(x) = theta_j^T z_j(x)``; neighbouring nodes are pulled together by
penalising disagreement of their decision functions on local data rather
than by equating coefficient vectors, so every node may use its own
(data-selected) feature set.

Modules
-------
dataset
    Loading, normalisation, partitioning and train/test splitting.
features
    Gaussian random Fourier features and data-dependent selection.
graph
    Communication topologies.
solver
    Per-node closed-form updates, global objective, descent condition.
simulator
    Synchronous message-passing execution and communication accounting.
evaluation
    Metrics, centralized references, baselines and cross-validation.
cli
    Config-driven experiment runner.
"""

from dekrr.dataset import (
    Dataset,
    DatasetError,
    Partition,
    RawDataset,
    Shard,
    load_table,
    normalize,
    partition_balanced,
    partition_imbalanced,
    partition_noniid,
    split_train_test,
)
from dekrr.features import (
    CandidatePool,
    FeatureSpec,
    feature_map,
    feature_matrix,
    sample_candidates,
    sample_gaussian_features,
    score_features,
    select_ddrf,
    select_top,
)
from dekrr.graph import Topology, TopologyError, load_edge_list, ring_lattice, validate
from dekrr.solver import (
    AuxMatrices,
    NodeState,
    PenaltyConfig,
    Prop1Verdict,
    build_aux,
    check_prop1,
    effective_lambda,
    local_update,
    objective,
)
from dekrr.simulator import (
    RoundLog,
    RunConfig,
    TrainResult,
    allocate_features,
    comm_cost,
    run,
    setup_exchange,
    spectral_radius,
    stationary_point,
)
from dekrr.evaluation import (
    Predictor,
    centralized_krr,
    centralized_rff,
    consensus_disagreement,
    cross_validate,
    rse,
    run_baseline,
)

__version__ = "0.1.0"
