"""Radius-of-influence subgraph extraction for 3D molecular message passing."""

__version__ = "0.1.0"

from .geometry import (
    AnnulusBinning,
    DirectedEdgeSet,
    EdgeMask,
    MolecularGraph,
    build_cutoff_graph,
    build_dpg,
    mask_annulus,
    pairwise_distances,
    quantile_annuli,
)
from .autodiff import Tape, backward, finite_diff_check
from .backbone import (
    BackboneParams,
    Prediction,
    TrainConfig,
    forward,
    init_params,
    load_checkpoint,
    rbf_expand,
    save_checkpoint,
    train,
)
from .datasets import (
    SyntheticCorpusConfig,
    generate_synthetic_corpus,
    load_corpus,
    parse_xyz,
    save_corpus,
    split_corpus,
    write_xyz,
)
from .explainers import (
    BaselineLossWeights,
    ConsistencyGap,
    ExplainConfig,
    ExplanationResult,
    RadiusMask,
    consistency_gap,
    entropy,
    gnnexplainer_optimize,
    lri_bernoulli_optimize,
    pgexplainer_optimize,
    rise_edge_mask,
    rise_extract,
    rise_optimize,
    rise_radii,
)
from .evaluation import (
    AnnulusStudyTable,
    EvalRecord,
    annulus_study,
    bond_recovery,
    brute_force_oracle,
    fidelity_sweep,
)

__all__ = [name for name in dir() if not name.startswith("_")]
