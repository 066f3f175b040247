"""Stability analytics and simulation for cancel-on-completion redundancy."""

from redlab.distributions import (
    Deterministic,
    Distribution,
    Exponential,
    ScaledBernoulli,
    Weibull,
)
from redlab.workload import (
    JobTypeSpec,
    SystemModel,
    TypeVisibility,
    build_fs_scenario,
    build_homogeneous,
)

__version__ = "0.1.0"

__all__ = [
    "Deterministic",
    "Distribution",
    "Exponential",
    "JobTypeSpec",
    "ScaledBernoulli",
    "SystemModel",
    "TypeVisibility",
    "Weibull",
    "build_fs_scenario",
    "build_homogeneous",
]
