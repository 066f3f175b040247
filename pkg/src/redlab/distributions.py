"""Probability laws for job sizes and per-server speed variations.

Four families are supported: deterministic, exponential, Weibull (ccdf
``exp(-(t/scale)^shape)``) and scaled Bernoulli (mass ``1/K`` at ``K`` and
``1 - 1/K`` at zero).  Besides the usual sampling/ccdf/moment surface, the
module provides the two quantities the stability analysis is built on:

* aging classification (new-better-than-used vs new-worse-than-used),
* expectations of weighted minima ``E[min_l Y_l / r_l]`` of independent
  draws, which give the execution time per unit size of a replicated job
  whose replicas all start at once.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

__all__ = [
    "AgingClass",
    "AgingTag",
    "Deterministic",
    "Distribution",
    "Exponential",
    "ScaledBernoulli",
    "Weibull",
    "classify_aging",
    "dist_from_config",
    "dist_to_config",
    "expected_min_weighted",
    "g_metric",
    "make_stream",
    "parse_dist_shorthand",
    "second_moment_min_weighted",
]

# Quadrature contract: truncate where the survival product drops below
# INTEGRAND_CUTOFF, refine to QUAD_REL_TOL relative error.
QUAD_REL_TOL = 1e-9
INTEGRAND_CUTOFF = 1e-12
AGING_GRID_TOL = 1e-12
AGING_GRID_SIZE = 64
MAX_BERNOULLI_LATTICE = 20


class Distribution:
    """Nonnegative law with analytic moments and survival function."""

    def mean(self) -> float:
        raise NotImplementedError

    def second_moment(self) -> float:
        raise NotImplementedError

    def ccdf(self, t: float) -> float:
        """P(S > t) for t >= 0."""
        raise NotImplementedError

    def sample(self, rng: Generator) -> float:
        return float(self.sample_n(rng, 1)[0])

    def sample_n(self, rng: Generator, n) -> np.ndarray:
        raise NotImplementedError

    def support_grid(self, n: int = AGING_GRID_SIZE) -> np.ndarray:
        """Representative points of the support, used by the aging check."""
        raise NotImplementedError

    @staticmethod
    def _check_t(t: float) -> None:
        if t < 0:
            raise ValueError(f"ccdf argument must be nonnegative, got {t}")


@dataclass(frozen=True)
class Deterministic(Distribution):
    """Point mass at ``value``."""

    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"deterministic value must be positive, got {self.value}")

    def mean(self):
        return self.value

    def second_moment(self):
        return self.value * self.value

    def ccdf(self, t):
        self._check_t(t)
        return 1.0 if t < self.value else 0.0

    def sample_n(self, rng, n):
        return np.full(n, self.value)

    def support_grid(self, n=AGING_GRID_SIZE):
        return np.array([self.value])


@dataclass(frozen=True)
class Exponential(Distribution):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"exponential rate must be positive, got {self.rate}")

    def mean(self):
        return 1.0 / self.rate

    def second_moment(self):
        return 2.0 / (self.rate * self.rate)

    def ccdf(self, t):
        self._check_t(t)
        return math.exp(-self.rate * t)

    def sample_n(self, rng, n):
        return rng.exponential(1.0 / self.rate, n)

    def support_grid(self, n=AGING_GRID_SIZE):
        p = (np.arange(n) + 1.0) / (n + 1.0)
        return -np.log1p(-p) / self.rate


@dataclass(frozen=True)
class Weibull(Distribution):
    """Weibull law with ccdf ``exp(-(t/scale)**shape)``."""

    scale: float
    shape: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"weibull scale must be positive, got {self.scale}")
        if not self.shape > 0:
            raise ValueError(f"weibull shape must be positive, got {self.shape}")

    def mean(self):
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)

    def second_moment(self):
        return self.scale ** 2 * math.gamma(1.0 + 2.0 / self.shape)

    def ccdf(self, t):
        self._check_t(t)
        return math.exp(-((t / self.scale) ** self.shape))

    def sample_n(self, rng, n):
        return self.scale * rng.weibull(self.shape, n)

    def support_grid(self, n=AGING_GRID_SIZE):
        p = (np.arange(n) + 1.0) / (n + 1.0)
        return self.scale * (-np.log1p(-p)) ** (1.0 / self.shape)


@dataclass(frozen=True)
class ScaledBernoulli(Distribution):
    """Two-point law: value ``upper`` (= K) with mass 1/K, zero otherwise."""

    upper: float

    def __post_init__(self):
        if not self.upper > 1:
            raise ValueError(f"scaled Bernoulli K must exceed 1, got {self.upper}")

    def mean(self):
        return 1.0

    def second_moment(self):
        return self.upper

    def ccdf(self, t):
        self._check_t(t)
        return 1.0 / self.upper if t < self.upper else 0.0

    def sample_n(self, rng, n):
        return np.where(rng.random(n) < 1.0 / self.upper, self.upper, 0.0)

    def support_grid(self, n=AGING_GRID_SIZE):
        return np.array([0.0, self.upper])


class AgingTag(Enum):
    NBU = "nbu"
    NWU = "nwu"
    BOTH = "both"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class AgingClass:
    tag: AgingTag
    strict: bool

    def __post_init__(self):
        if self.tag in (AgingTag.BOTH, AgingTag.INDETERMINATE) and self.strict:
            raise ValueError("boundary/indeterminate classes cannot be strict")

    @property
    def is_nbu(self) -> bool:
        return self.tag in (AgingTag.NBU, AgingTag.BOTH)

    @property
    def is_nwu(self) -> bool:
        return self.tag in (AgingTag.NWU, AgingTag.BOTH)


def _grid_consistent(dist: Distribution, tag: AgingTag) -> bool:
    """Check the defining ccdf inequality on a support/quantile grid.

    The parameter rules are the source of truth; this guards against a law
    object whose ccdf disagrees with its declared parameters.
    """
    ts = dist.support_grid()
    vals = np.array([dist.ccdf(float(t)) for t in ts])
    lhs = np.array([[dist.ccdf(float(t1 + t2)) for t2 in ts] for t1 in ts])
    rhs = np.outer(vals, vals)
    nbu_ok = bool(np.all(lhs <= rhs + AGING_GRID_TOL))
    nwu_ok = bool(np.all(lhs >= rhs - AGING_GRID_TOL))
    if tag is AgingTag.NBU:
        return nbu_ok
    if tag is AgingTag.NWU:
        return nwu_ok
    return nbu_ok and nwu_ok


def classify_aging(dist: Distribution) -> AgingClass:
    """Classify a law as NBU / NWU / both by its parameters.

    Weibull is strictly NBU for shape > 1 and strictly NWU for shape < 1;
    the exponential (and shape-1 Weibull) sits on the boundary.  A point
    mass is treated as strictly NBU (its minima behave like the identical
    replica case).  The scaled Bernoulli ccdf is supermultiplicative on its
    two-point support, hence NWU, with equality at the upper atom.
    """
    if isinstance(dist, Exponential):
        cls = AgingClass(AgingTag.BOTH, strict=False)
    elif isinstance(dist, Weibull):
        if dist.shape > 1:
            cls = AgingClass(AgingTag.NBU, strict=True)
        elif dist.shape < 1:
            cls = AgingClass(AgingTag.NWU, strict=True)
        else:
            cls = AgingClass(AgingTag.BOTH, strict=False)
    elif isinstance(dist, Deterministic):
        cls = AgingClass(AgingTag.NBU, strict=True)
    elif isinstance(dist, ScaledBernoulli):
        cls = AgingClass(AgingTag.NWU, strict=False)
    else:
        return AgingClass(AgingTag.INDETERMINATE, strict=False)
    if not _grid_consistent(dist, cls.tag):
        return AgingClass(AgingTag.INDETERMINATE, strict=False)
    return cls


def _split_families(dists, speeds):
    """Reduce a weighted-minimum problem to (atom probability, cap, smooth part).

    Scaled Bernoulli draws put an atom at zero: any outcome on the lattice
    of SB draws that contains a zero forces the minimum to zero, so only
    the all-positive corner contributes, with probability ``prod 1/K_l``
    and a deterministic cap ``min K_l / r_l``.  Point masses likewise cap
    the minimum.  What remains is a product of smooth survival functions.
    """
    atom_prob = 1.0
    cap = math.inf
    smooth = []
    smooth_speeds = []
    n_bern = sum(1 for d in dists if isinstance(d, ScaledBernoulli))
    if n_bern > MAX_BERNOULLI_LATTICE:
        raise ValueError(f"scaled Bernoulli lattice limited to {MAX_BERNOULLI_LATTICE} draws")
    for dist, r in zip(dists, speeds):
        if isinstance(dist, ScaledBernoulli):
            atom_prob *= 1.0 / dist.upper
            cap = min(cap, dist.upper / r)
        elif isinstance(dist, Deterministic):
            cap = min(cap, dist.value / r)
        else:
            smooth.append(dist)
            smooth_speeds.append(r)
    return atom_prob, cap, smooth, smooth_speeds


def _truncation_point(survival, cap):
    if math.isfinite(cap):
        return cap
    t = 1.0
    for _ in range(200):
        if survival(t) < INTEGRAND_CUTOFF:
            return t
        t *= 2.0
    raise ValueError("survival product does not decay; integral may diverge")


def _adaptive_simpson(f, a, b, rel_tol=QUAD_REL_TOL):
    """Adaptive Simpson rule on [a, b] with relative tolerance."""
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    eps = max(abs(whole), 1e-300) * rel_tol

    def recurse(a, b, fa, fm, fb, whole, eps, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= 50 or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return recurse(a, m, fa, flm, fm, left, 0.5 * eps, depth + 1) + recurse(
            m, b, fm, frm, fb, right, 0.5 * eps, depth + 1
        )

    return recurse(a, b, fa, fm, fb, whole, eps, 0)


def _integrate_survival(smooth, speeds, cap, moment):
    """Integrate ``m t^(m-1) * prod ccdf_l(r_l t)`` over [0, cap or T]."""

    def survival(t):
        p = 1.0
        for dist, r in zip(smooth, speeds):
            p *= dist.ccdf(r * t)
            if p == 0.0:
                return 0.0
        return p

    upper = _truncation_point(survival, cap)
    if upper <= 0.0:
        return 0.0
    if moment == 1:
        f = survival
    else:
        def f(t, _s=survival):
            return 2.0 * t * _s(t)
    return _adaptive_simpson(f, 0.0, upper)


def _min_moment(dists, speeds, moment):
    if len(dists) != len(speeds) or not dists:
        raise ValueError("need equally many laws and speeds, at least one each")
    for r in speeds:
        if not r > 0:
            raise ValueError(f"speeds must be positive, got {r}")
    atom_prob, cap, smooth, sspeeds = _split_families(dists, speeds)

    if not smooth:
        # Minimum of constants on the surviving lattice corner.
        return atom_prob * cap ** moment

    if not math.isfinite(cap):
        if all(isinstance(d, Exponential) for d in smooth):
            # min of exponentials: rate is the speed-weighted rate sum.
            total_rate = sum(d.rate * r for d, r in zip(smooth, sspeeds))
            if moment == 1:
                return atom_prob / total_rate
            return atom_prob * 2.0 / total_rate ** 2
        if all(isinstance(d, Weibull) for d in smooth):
            shapes = {d.shape for d in smooth}
            if len(shapes) == 1:
                # Common shape k: the minimum is Weibull again with scale
                # lam_eff = (sum (r_l/scale_l)^k)^(-1/k).
                k = smooth[0].shape
                lam_eff = sum((r / d.scale) ** k for d, r in zip(smooth, sspeeds)) ** (-1.0 / k)
                if moment == 1:
                    return atom_prob * lam_eff * math.gamma(1.0 + 1.0 / k)
                return atom_prob * lam_eff ** 2 * math.gamma(1.0 + 2.0 / k)

    return atom_prob * _integrate_survival(smooth, sspeeds, cap, moment)


def expected_min_weighted(dists: Sequence[Distribution], speeds: Sequence[float]) -> float:
    """E[min_l Y_l / r_l] for independent draws Y_l ~ dists[l]."""
    return _min_moment(dists, speeds, 1)


def second_moment_min_weighted(dists: Sequence[Distribution], speeds: Sequence[float]) -> float:
    """E[(min_l Y_l / r_l)^2] for independent draws."""
    return _min_moment(dists, speeds, 2)


def g_metric(dist: Distribution, d: int) -> float:
    """Aggregate resource usage of d simultaneous unit-speed replicas.

    Monotone nondecreasing in d for NBU laws, nonincreasing for NWU laws.
    """
    if d < 1:
        raise ValueError(f"replica count must be >= 1, got {d}")
    return d * expected_min_weighted([dist] * d, [1.0] * d)


# --- serialization -----------------------------------------------------------

_DIST_TAGS = {
    "deterministic": Deterministic,
    "exponential": Exponential,
    "weibull": Weibull,
    "scaled_bernoulli": ScaledBernoulli,
}


def dist_to_config(dist: Distribution) -> dict:
    if isinstance(dist, Deterministic):
        return {"type": "deterministic", "value": dist.value}
    if isinstance(dist, Exponential):
        return {"type": "exponential", "rate": dist.rate}
    if isinstance(dist, Weibull):
        return {"type": "weibull", "scale": dist.scale, "shape": dist.shape}
    if isinstance(dist, ScaledBernoulli):
        return {"type": "scaled_bernoulli", "K": dist.upper}
    raise TypeError(f"unknown distribution {dist!r}")


def dist_from_config(obj: dict) -> Distribution:
    if not isinstance(obj, dict) or "type" not in obj:
        raise ValueError(f"distribution config must be a tagged mapping, got {obj!r}")
    tag = obj["type"]
    if tag == "deterministic":
        return Deterministic(float(obj["value"]))
    if tag == "exponential":
        return Exponential(float(obj["rate"]))
    if tag == "weibull":
        return Weibull(float(obj["scale"]), float(obj["shape"]))
    if tag == "scaled_bernoulli":
        return ScaledBernoulli(float(obj.get("K", obj.get("k", 0.0))))
    raise ValueError(f"unknown distribution type {tag!r}")


def parse_dist_shorthand(text: str) -> Distribution:
    """Parse CLI shorthands: exp[:rate], weibull:scale,shape, det:c, sb:K."""
    name, _, args = text.partition(":")
    name = name.strip().lower()
    vals = [float(v) for v in args.split(",") if v.strip()] if args else []
    if name in ("exp", "exponential"):
        return Exponential(vals[0] if vals else 1.0)
    if name in ("weibull", "wb"):
        if len(vals) != 2:
            raise ValueError("weibull shorthand needs scale,shape")
        return Weibull(vals[0], vals[1])
    if name in ("det", "deterministic", "const"):
        return Deterministic(vals[0] if vals else 1.0)
    if name in ("sb", "bernoulli", "scaled_bernoulli"):
        if len(vals) != 1:
            raise ValueError("scaled Bernoulli shorthand needs K")
        return ScaledBernoulli(vals[0])
    raise ValueError(f"unknown distribution shorthand {text!r}")


# --- random streams ----------------------------------------------------------

def make_stream(seed: int, *path) -> Generator:
    """Named counter-based stream; equal (seed, path) always replays.

    Path elements may be ints or short strings; strings hash via crc32 so
    labels like ("run", 3, "arrivals") are stable across processes.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for p in path:
        if isinstance(p, str):
            key.append(zlib.crc32(p.encode()))
        else:
            key.append(int(p) & 0xFFFFFFFF)
    return Generator(Philox(SeedSequence(key)))
