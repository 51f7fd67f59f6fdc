"""Hybrid epidemic forecasting.

A learned estimator produces per-region, per-day infection and recovery
rates; a mobility-coupled metapopulation SIR core rolls them forward; an
adaptive-threshold filter suppresses transmission in regions with weak or
quiet signals.  See README.md for the pipeline walkthrough.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    adjacency,
    autodiff,
    datasets,
    domain,
    estimator,
    evaluation,
    kernels,
    metapop,
    pipeline,
    suppression,
    training,
)

__all__ = [
    "adjacency",
    "autodiff",
    "datasets",
    "domain",
    "estimator",
    "evaluation",
    "kernels",
    "metapop",
    "pipeline",
    "suppression",
    "training",
]
