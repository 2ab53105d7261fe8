"""Privacy-preserving mixture-of-experts unification toolkit.

Selects relevant-and-diverse public proxy samples per client with a
relevance-weighted determinantal point process, fine-tunes experts on
private-plus-proxy data, merges them behind a context-aware router, and
analyzes the privacy of the shared routing vectors.
"""

__version__ = "0.1.0"

from .data import (
    DomainSpec,
    EmbeddingRecord,
    EmbeddingSet,
    generate_synthetic_domains,
    load_embeddings,
    pca_project_2d,
    save_embeddings,
)
from .linalg import CholeskyFactor, cholesky_decompose, cholesky_extend
from .moe import (
    EvalReport,
    MoEModel,
    PipelineConfig,
    ToyModel,
    TrainConfig,
    run_pipeline,
)
from .privacy import (
    SensitivityReport,
    empirical_sensitivity,
    routing_vector,
    sensitivity_bound,
)
from .relevance import RelevanceClassifier, candidate_pool, train_relevance_classifier
from .router import RouterLayer, routing_distribution
from .selection import (
    DppProxySelector,
    KernelConfig,
    ProxySelection,
    WeightedKernel,
    brute_force_map,
    build_kernel,
    greedy_map,
    greedy_map_naive,
    log_prob,
    select_random,
    select_topk_relevance,
    weight_kernel,
)

__all__ = [
    "CholeskyFactor",
    "DomainSpec",
    "DppProxySelector",
    "EmbeddingRecord",
    "EmbeddingSet",
    "EvalReport",
    "KernelConfig",
    "MoEModel",
    "PipelineConfig",
    "ProxySelection",
    "RelevanceClassifier",
    "RouterLayer",
    "SensitivityReport",
    "ToyModel",
    "TrainConfig",
    "WeightedKernel",
    "brute_force_map",
    "build_kernel",
    "candidate_pool",
    "cholesky_decompose",
    "cholesky_extend",
    "empirical_sensitivity",
    "generate_synthetic_domains",
    "greedy_map",
    "greedy_map_naive",
    "load_embeddings",
    "log_prob",
    "pca_project_2d",
    "routing_distribution",
    "routing_vector",
    "run_pipeline",
    "save_embeddings",
    "select_random",
    "select_topk_relevance",
    "sensitivity_bound",
    "train_relevance_classifier",
    "weight_kernel",
]
