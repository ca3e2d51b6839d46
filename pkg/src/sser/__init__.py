"""Rare-event estimation with stochastic spectral embedding.

An adaptive, tree-partitioned surrogate of the limit-state function built
from sparse polynomial residual expansions with bootstrap error estimation,
combined with per-domain Monte Carlo / subset-simulation failure-probability
estimation.
"""

from .engine import (
    LimitStateError,
    ReliabilityProblem,
    RunConfig,
    SserResult,
    TraceRecord,
    UnsplittableDomainError,
    run_sser,
)
from .estimators import (
    ConditionalEstimate,
    EstimatorConfig,
    FailureEstimate,
    SubsetParams,
    aggregate,
    estimate_conditional_pf,
    mcs_on_surrogate,
    reliability_index,
    subset_simulation_on_surrogate,
)
from .inputs import CopulaModel, InputModel, Marginal
from .spectral import (
    BasisSpec,
    BootstrapEnsemble,
    PceExpansion,
    bootstrap_fit,
    build_basis,
    compute_envelope,
    evaluate_expansion,
    fit_sparse_expansion,
)
from .tree import DomainNode, ExperimentalDesign, SseTree

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "BootstrapEnsemble",
    "ConditionalEstimate",
    "CopulaModel",
    "DomainNode",
    "EstimatorConfig",
    "ExperimentalDesign",
    "FailureEstimate",
    "InputModel",
    "LimitStateError",
    "Marginal",
    "PceExpansion",
    "ReliabilityProblem",
    "RunConfig",
    "SseTree",
    "SserResult",
    "SubsetParams",
    "TraceRecord",
    "UnsplittableDomainError",
    "aggregate",
    "bootstrap_fit",
    "build_basis",
    "compute_envelope",
    "estimate_conditional_pf",
    "evaluate_expansion",
    "fit_sparse_expansion",
    "mcs_on_surrogate",
    "reliability_index",
    "run_sser",
    "subset_simulation_on_surrogate",
]
