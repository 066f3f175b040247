"""Replica placement: the C(N, d) server subsets and static assignment policies.

Policies are static and sampled i.i.d. per arrival.  When job types are
observable a policy may carry one probability vector over subsets per
type; when they are not, a single vector applies to every job (enforced
structurally: an unknown-visibility policy cannot hold per-type vectors).
"""
from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from numpy.random import Generator

from redlab.workload import SystemModel, TypeVisibility

__all__ = [
    "MAX_SUBSETS",
    "Policy",
    "SubsetCatalog",
    "diag_d1_policy",
    "fixed_subset_policy",
    "policy_from_config",
    "policy_to_config",
    "sample_subset",
    "subset_catalog",
    "uniform_power_of_d",
]

MAX_SUBSETS = 200_000
PROB_TOL = 1e-12


@dataclass(frozen=True)
class SubsetCatalog:
    """All d-element subsets of {0, ..., n-1} in lexicographic order."""

    n_servers: int
    d: int
    subsets: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.subsets)

    def containing(self, server: int) -> tuple[int, ...]:
        """Indices of subsets that include the given server."""
        return tuple(h for h, s in enumerate(self.subsets) if server in s)


@lru_cache(maxsize=None)
def subset_catalog(n: int, d: int) -> SubsetCatalog:
    if not 1 <= d <= n:
        raise ValueError(f"need 1 <= d <= n, got d={d}, n={n}")
    if math.comb(n, d) > MAX_SUBSETS:
        raise ValueError(f"C({n},{d}) = {math.comb(n, d)} subsets exceed limit {MAX_SUBSETS}")
    return SubsetCatalog(n, d, tuple(combinations(range(n), d)))


def _check_prob_vector(p, k):
    if len(p) != k:
        raise ValueError(f"probability vector has {len(p)} entries, expected {k}")
    if any(v < 0 for v in p):
        raise ValueError("subset probabilities must be nonnegative")
    if abs(sum(p) - 1.0) > PROB_TOL:
        raise ValueError(f"subset probabilities sum to {sum(p)!r}, not 1")


@dataclass(frozen=True)
class Policy:
    """Static probabilistic assignment over a subset catalog.

    Exactly one of ``probs`` (type-blind) and ``probs_by_type`` (per-type,
    known visibility only) is set.
    """

    catalog: SubsetCatalog
    visibility: TypeVisibility
    probs: tuple[float, ...] | None = None
    probs_by_type: tuple[tuple[float, ...], ...] | None = None
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if (self.probs is None) == (self.probs_by_type is None):
            raise ValueError("set exactly one of probs and probs_by_type")
        if self.probs is not None:
            object.__setattr__(self, "probs", tuple(float(v) for v in self.probs))
            _check_prob_vector(self.probs, self.catalog.k)
        else:
            if self.visibility is not TypeVisibility.KNOWN:
                raise ValueError("per-type assignment requires known job types")
            rows = tuple(tuple(float(v) for v in row) for row in self.probs_by_type)
            object.__setattr__(self, "probs_by_type", rows)
            for row in rows:
                _check_prob_vector(row, self.catalog.k)

    @property
    def d(self) -> int:
        return self.catalog.d

    @property
    def per_type(self) -> bool:
        return self.probs_by_type is not None

    def probs_for_type(self, type_j: int | None = None) -> tuple[float, ...]:
        if self.probs is not None:
            return self.probs
        if type_j is None:
            raise ValueError("per-type policy needs a type index")
        return self.probs_by_type[type_j]

    def marginal(self, server: int, type_j: int | None = None) -> float:
        """Probability that an assignment (of the given type) includes server."""
        p = self.probs_for_type(type_j)
        return sum(p[h] for h in self.catalog.containing(server))


def uniform_power_of_d(
    n: int, d: int, visibility: TypeVisibility = TypeVisibility.UNKNOWN
) -> Policy:
    """Replicas go to d of the n servers chosen uniformly without replacement."""
    cat = subset_catalog(n, d)
    return Policy(cat, visibility, probs=(1.0 / cat.k,) * cat.k, label=f"uniform-d{d}")


def fixed_subset_policy(
    n: int, subset, visibility: TypeVisibility = TypeVisibility.UNKNOWN
) -> Policy:
    """All jobs go to one fixed subset (degenerate assignment)."""
    want = tuple(sorted(int(s) for s in subset))
    cat = subset_catalog(n, len(want))
    probs = [0.0] * cat.k
    probs[cat.subsets.index(want)] = 1.0
    return Policy(cat, visibility, probs=tuple(probs), label=f"fixed-{want}")


def diag_d1_policy(model: SystemModel) -> Policy:
    """Route each type to its fast server with probability one (d = 1).

    Only meaningful for fast-slow shaped models, where type j is fastest
    on server j; anything else is rejected.
    """
    n, m = model.n_servers, model.m_types
    if m != n:
        raise ValueError(f"diagonal routing needs one type per server, got N={n}, M={m}")
    for j in range(m):
        speeds = model.types[j].speeds
        if speeds[j] < max(speeds):
            raise ValueError(f"type {j} is not fastest on server {j}; not a fast-slow model")
    cat = subset_catalog(n, 1)
    rows = []
    for j in range(m):
        row = [0.0] * cat.k
        row[cat.subsets.index((j,))] = 1.0
        rows.append(tuple(row))
    return Policy(cat, TypeVisibility.KNOWN, probs_by_type=tuple(rows), label="diag-d1")


def sample_subset(policy: Policy, rng: Generator, type_j: int | None = None) -> int:
    """Draw a subset index from the policy using the caller's stream."""
    cum = np.cumsum(policy.probs_for_type(type_j))
    return int(bisect_left(cum, rng.random() * cum[-1]))


# --- configuration -----------------------------------------------------------

def policy_to_config(policy: Policy) -> dict:
    cfg: dict = {"d": policy.d, "visibility": policy.visibility.value}
    if policy.per_type:
        cfg["by_type"] = [
            {"subsets": [[s + 1 for s in sub] for sub in policy.catalog.subsets], "p": list(row)}
            for row in policy.probs_by_type
        ]
    else:
        cfg["subsets"] = [[s + 1 for s in sub] for sub in policy.catalog.subsets]
        cfg["p"] = list(policy.probs)
    return cfg


def _vector_from_entry(entry: dict, cat: SubsetCatalog) -> tuple[float, ...]:
    if entry.get("probs") == "uniform":
        return (1.0 / cat.k,) * cat.k
    subsets = entry["subsets"]
    weights = entry["p"]
    if len(subsets) != len(weights):
        raise ValueError("subsets and p must have equal length")
    probs = [0.0] * cat.k
    for sub, w in zip(subsets, weights):
        # Config files use 1-based server ids.
        key = tuple(sorted(int(s) - 1 for s in sub))
        probs[cat.subsets.index(key)] += float(w)
    return tuple(probs)


def policy_from_config(obj: dict, n_servers: int) -> Policy:
    """Build a policy from its config form.

    Accepted shapes: ``{"d": 2, "probs": "uniform"}``, an explicit
    ``{"d": 2, "subsets": [[1,2], ...], "p": [...]}`` or, for known types,
    ``{"d": 2, "by_type": [{...}, ...]}``.
    """
    d = int(obj["d"])
    cat = subset_catalog(n_servers, d)
    visibility = TypeVisibility(obj.get("visibility", "unknown"))
    if "by_type" in obj:
        rows = tuple(_vector_from_entry(entry, cat) for entry in obj["by_type"])
        return Policy(cat, TypeVisibility.KNOWN, probs_by_type=rows)
    return Policy(cat, visibility, probs=_vector_from_entry(obj, cat))
