"""Influence functions with LiSSA and sampled Hessians.

The Hessian in the inverse-Hessian-vector product is estimated on a small
subset of the training data. Besides uniform random subsets, the subset can
be chosen around K-means centroids in a feature space (top-k or
distance-weighted) or by per-class softmax scores.
"""

__version__ = "0.1.0"

from .influence import (  # noqa: E402
    ClassRemoval,
    LissaConfig,
    MLPContext,
    QuadraticContext,
    RemovalConfig,
    class_removal_edit,
    direct_ihvp_oracle,
    influence_vector,
    lissa_ihvp,
    mean_hvp,
)
from .linalg import RngStream  # noqa: E402
from .model import MLPClassifier, ModelSpec  # noqa: E402
from .samplers import (  # noqa: E402
    DistanceWeightedSampler,
    KMeans,
    LogitSampler,
    RandomSampler,
    TopKSampler,
)

__all__ = [
    "ClassRemoval",
    "DistanceWeightedSampler",
    "KMeans",
    "LissaConfig",
    "LogitSampler",
    "MLPClassifier",
    "MLPContext",
    "ModelSpec",
    "QuadraticContext",
    "RandomSampler",
    "RemovalConfig",
    "RngStream",
    "TopKSampler",
    "class_removal_edit",
    "direct_ihvp_oracle",
    "influence_vector",
    "lissa_ihvp",
    "mean_hvp",
]
