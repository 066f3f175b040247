"""System model: servers, job types, speeds, and canonical scenario builders.

A model has N servers and M job types.  A type-j job has intrinsic size
X_j, per-server speed variation S_j, and deterministic service speed
``r[i][j]`` at server i, so a replica of realized size x with variation y
needs ``x * y / r[i][j]`` time at server i.  In ``identical`` replica mode
every replica of a job shares one realized variation (S_j must then be a
point mass); in ``iid`` mode each assigned server draws its own copy.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from redlab.distributions import (
    Deterministic,
    Distribution,
    dist_from_config,
    dist_to_config,
)

__all__ = [
    "JobTypeSpec",
    "MAX_SERVERS",
    "MAX_TYPES",
    "SystemModel",
    "TypeVisibility",
    "build_fs_scenario",
    "build_homogeneous",
    "load_scenario",
    "model_from_config",
    "model_to_config",
    "parse_scenario_shorthand",
    "validate",
]

# Keeps C(N, d) subset catalogs enumerable at desk scale.
MAX_SERVERS = 32
MAX_TYPES = 64

PROB_SUM_TOL = 1e-9

IDENTICAL = "identical"
IID = "iid"


class TypeVisibility(Enum):
    """Whether the dispatcher can observe each job's type on arrival."""

    KNOWN = "known"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class JobTypeSpec:
    probability: float
    size_law: Distribution
    variation_law: Distribution
    speeds: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(float(r) for r in self.speeds))

    @property
    def mean_work(self) -> float:
        """E[X] * E[S]: offered work per job of this type."""
        return self.size_law.mean() * self.variation_law.mean()


@dataclass(frozen=True)
class SystemModel:
    n_servers: int
    types: tuple[JobTypeSpec, ...]
    replica_mode: str = IID

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        errors = validate(self)
        if errors:
            raise ValueError("invalid system model: " + "; ".join(errors))

    @property
    def m_types(self) -> int:
        return len(self.types)

    def speed(self, server: int, type_j: int) -> float:
        return self.types[type_j].speeds[server]

    def speed_matrix(self) -> np.ndarray:
        """Speeds as an (n_servers, m_types) array."""
        return np.array([t.speeds for t in self.types]).T

    def work_vector(self) -> np.ndarray:
        """Per-type offered work E[X_j] E[S_j]."""
        return np.array([t.mean_work for t in self.types])

    def type_probabilities(self) -> np.ndarray:
        return np.array([t.probability for t in self.types])


def validate(model: SystemModel) -> list[str]:
    """Return a list of invariant violations, empty when the model is valid."""
    errors = []
    n, m = model.n_servers, len(model.types)
    if n < 1:
        errors.append(f"need at least one server, got {n}")
    if n > MAX_SERVERS:
        errors.append(f"server count {n} exceeds limit {MAX_SERVERS}")
    if m < 1:
        errors.append("need at least one job type")
    if m > MAX_TYPES:
        errors.append(f"type count {m} exceeds limit {MAX_TYPES}")
    if model.replica_mode not in (IID, IDENTICAL):
        errors.append(f"unknown replica mode {model.replica_mode!r}")
    psum = 0.0
    for j, spec in enumerate(model.types):
        psum += spec.probability
        if not 0.0 < spec.probability <= 1.0:
            errors.append(f"type {j} probability {spec.probability} outside (0, 1]")
        if len(spec.speeds) != n:
            errors.append(f"type {j} has {len(spec.speeds)} speeds, expected {n}")
        for i, r in enumerate(spec.speeds):
            if not r > 0.0:
                errors.append(f"zero speed: r[{i}][{j}] = {r}")
        if model.replica_mode == IDENTICAL and not isinstance(spec.variation_law, Deterministic):
            errors.append(f"identical replicas require a point-mass variation law (type {j})")
    if m >= 1 and abs(psum - 1.0) > PROB_SUM_TOL:
        errors.append(f"probabilities sum {psum:g}")
    return errors


def build_fs_scenario(
    n: int,
    r_fast: float,
    r_slow: float,
    size_law: Distribution,
    variation_law: Distribution,
    replica_mode: str = IID,
) -> SystemModel:
    """Fast-slow scenario: type j runs at r_fast on server j, r_slow elsewhere.

    One type per server, uniform type probabilities.
    """
    if not (r_fast > 0 and r_slow > 0):
        raise ValueError(f"speeds must be positive, got r_fast={r_fast}, r_slow={r_slow}")
    if r_slow > r_fast:
        raise ValueError(f"r_slow={r_slow} exceeds r_fast={r_fast}")
    if n < 1:
        raise ValueError(f"need at least one server, got {n}")
    types = tuple(
        JobTypeSpec(
            probability=1.0 / n,
            size_law=size_law,
            variation_law=variation_law,
            speeds=tuple(r_fast if i == j else r_slow for i in range(n)),
        )
        for j in range(n)
    )
    return SystemModel(n, types, replica_mode)


def build_homogeneous(
    n: int,
    size_law: Distribution,
    variation_law: Distribution,
    replica_mode: str = IID,
) -> SystemModel:
    """Single job type, all server speeds equal to one."""
    spec = JobTypeSpec(1.0, size_law, variation_law, (1.0,) * n)
    return SystemModel(n, (spec,), replica_mode)


# --- configuration -----------------------------------------------------------

def model_to_config(model: SystemModel) -> dict:
    return {
        "n_servers": model.n_servers,
        "replica_mode": model.replica_mode,
        "types": [
            {
                "p": t.probability,
                "size_law": dist_to_config(t.size_law),
                "variation_law": dist_to_config(t.variation_law),
                "speeds": list(t.speeds),
            }
            for t in model.types
        ],
    }


def _builder_from_config(obj: dict) -> SystemModel:
    mode = obj.get("replica_mode", IID)
    if "fs" in obj:
        fs = obj["fs"]
        return build_fs_scenario(
            int(fs["n"]),
            float(fs.get("r_fast", 1.0)),
            float(fs["r_slow"]),
            dist_from_config(fs["size_law"]),
            dist_from_config(fs["variation_law"]),
            replica_mode=fs.get("replica_mode", mode),
        )
    hom = obj["homogeneous"]
    return build_homogeneous(
        int(hom["n"]),
        dist_from_config(hom["size_law"]),
        dist_from_config(hom["variation_law"]),
        replica_mode=hom.get("replica_mode", mode),
    )


def model_from_config(obj: dict) -> SystemModel:
    if "fs" in obj or "homogeneous" in obj:
        return _builder_from_config(obj)
    types = tuple(
        JobTypeSpec(
            probability=float(t["p"]),
            size_law=dist_from_config(t["size_law"]),
            variation_law=dist_from_config(t["variation_law"]),
            speeds=tuple(float(r) for r in t["speeds"]),
        )
        for t in obj["types"]
    )
    return SystemModel(int(obj["n_servers"]), types, obj.get("replica_mode", IID))


_SHORTHAND_RE = re.compile(r"^(fs|hom|homogeneous):(.*)$")


def parse_scenario_shorthand(
    text: str,
    size_law: Distribution,
    variation_law: Distribution,
    replica_mode: str = IID,
) -> SystemModel:
    """Parse builder shorthands like ``fs:n=3,rslow=0.5`` or ``hom:n=2``."""
    m = _SHORTHAND_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a scenario shorthand: {text!r}")
    kind, args = m.group(1), m.group(2)
    kv = {}
    for part in args.split(","):
        if not part.strip():
            continue
        key, _, val = part.partition("=")
        kv[key.strip().lower().replace("_", "")] = val.strip()
    n = int(kv.pop("n"))
    if kind == "fs":
        r_slow = float(kv.pop("rslow"))
        r_fast = float(kv.pop("rfast", "1.0"))
        if kv:
            raise ValueError(f"unknown fs parameters {sorted(kv)}")
        return build_fs_scenario(n, r_fast, r_slow, size_law, variation_law, replica_mode)
    if kv:
        raise ValueError(f"unknown homogeneous parameters {sorted(kv)}")
    return build_homogeneous(n, size_law, variation_law, replica_mode)


def load_scenario(
    spec: str | Path,
    size_law: Distribution | None = None,
    variation_law: Distribution | None = None,
    replica_mode: str = IID,
) -> SystemModel:
    """Load a model from a shorthand string or a JSON config file."""
    if isinstance(spec, str) and _SHORTHAND_RE.match(spec.strip()):
        if size_law is None or variation_law is None:
            raise ValueError("scenario shorthands need size and variation laws")
        return parse_scenario_shorthand(spec, size_law, variation_law, replica_mode)
    path = Path(spec)
    if not path.exists():
        raise ValueError(f"scenario {spec!r} is neither a shorthand nor a file")
    with open(path, encoding="utf-8") as fh:
        return model_from_config(json.load(fh))
