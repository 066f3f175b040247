"""Closed-form and LP-based stability computations.

The three achievable-region computations:

* ``stability_known_d1``   -- single replicas, observable types; supremal
  arrival rate over all per-type routing matrices (a small exact LP).
* ``stability_unknown_d1`` -- single replicas, common routing vector; the
  optimum balances per-server loads and has a closed form.
* ``lambda_star``          -- full replication; the system collapses to a
  single M/G/1 queue with service time ``X_j min_i Y_ij / r_ij``.

For intermediate replication degrees the exact region is open; the module
computes per-server load proxies built from simultaneous-start execution
times (``compute_proxies`` / ``gamma_thresholds``), the harmonic-mean gap
of the exponential load values (``lemma1_gap``), the NWU lower bound on
aggregate weighted service time (``lemma2_bound``), and the constructive
de-replication that turns measured busy fractions of a stable replicated
run into a single-replica policy with at least the same throughput
(``prop1_derive_d1``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from redlab.assignment import Policy, policy_to_config, subset_catalog
from redlab.distributions import classify_aging, expected_min_weighted
from redlab.simplex import solve_lp_max
from redlab.workload import SystemModel, TypeVisibility

__all__ = [
    "LoadProxies",
    "Prop1Derivation",
    "Prop1InfeasibleError",
    "StabilityReport",
    "TauMatrix",
    "compute_proxies",
    "gamma_thresholds",
    "hat_load_values",
    "lambda_star",
    "lemma1_gap",
    "lemma1_gap_for",
    "lemma2_bound",
    "prop1_derive_d1",
    "stability_known_d1",
    "stability_unknown_d1",
]

SIGMA_TOL = 1e-9


def _round_sig(x, digits=12):
    if x is None or not math.isfinite(x):
        return None
    return float(f"{x:.{digits}g}")


@dataclass(frozen=True)
class StabilityReport:
    """Supremal arrival rate, the assignment witnessing it, and per-server
    saturation rates under that witness (lambda_sup = min over servers)."""

    lambda_sup: float
    per_server_thresholds: np.ndarray
    witness: dict

    def to_json_dict(self) -> dict:
        return {
            "lambda_sup": _round_sig(self.lambda_sup),
            "per_server_thresholds": [_round_sig(v) for v in self.per_server_thresholds],
            "witness": json.loads(
                json.dumps(self.witness), parse_float=lambda s: _round_sig(float(s))
            ),
        }


@dataclass(frozen=True)
class TauMatrix:
    """Long-run busy fractions per (server, type), optionally split into the
    effective part (the server finished the job) and the wasted part."""

    tau: np.ndarray
    lambda_0: float
    tau1: np.ndarray | None = None
    tau2: np.ndarray | None = None

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        object.__setattr__(self, "tau", tau)
        if (self.tau1 is None) != (self.tau2 is None):
            raise ValueError("provide both effective and wasted parts or neither")
        if self.tau1 is not None:
            t1 = np.asarray(self.tau1, dtype=float)
            t2 = np.asarray(self.tau2, dtype=float)
            object.__setattr__(self, "tau1", t1)
            object.__setattr__(self, "tau2", t2)
            if not np.allclose(t1 + t2, tau, atol=1e-9):
                raise ValueError("effective + wasted must equal total busy fraction")
        if np.any(tau < -1e-12):
            raise ValueError("busy fractions must be nonnegative")
        if np.any(tau.sum(axis=1) > 1.0 + 1e-9):
            raise ValueError("per-server busy fractions must not exceed one")


@dataclass(frozen=True)
class LoadProxies:
    """Simultaneous-start load proxies for one (model, policy) pair.

    ``theta[j][h]`` is the expected execution time per unit size of a
    type-j job on subset h when all replicas start together; the hat
    variants substitute the exponential value E[S_j] / sum of speeds.
    ``gamma_ij`` conditions on the assignment hitting server i, and
    ``gamma_i`` additionally weights types by their arrival shares at i.
    ``gamma_0`` is the (policy-independent, exact) full-replication load.
    Entries are NaN for servers the policy never selects.
    """

    policy: Policy
    theta: np.ndarray      # (M, K)
    hat_theta: np.ndarray  # (M, K)
    gamma_ij: np.ndarray   # (N, M)
    hat_gamma_ij: np.ndarray
    gamma_i: np.ndarray    # (N,)
    hat_gamma_i: np.ndarray
    gamma_0: float
    hat_gamma_0: float
    marginals: np.ndarray         # (M, N) per-type server marginals
    arrival_marginals: np.ndarray  # (N,) type-averaged marginals

    def theta_for(self, server: int, type_j: int, subset_h: int) -> float:
        if server not in self.policy.catalog.subsets[subset_h]:
            raise ValueError(f"server {server} not in subset {subset_h}")
        return float(self.theta[type_j, subset_h])


def _theta_tables(model: SystemModel, catalog) -> tuple[np.ndarray, np.ndarray]:
    m = model.m_types
    theta = np.empty((m, catalog.k))
    hat_theta = np.empty((m, catalog.k))
    cache: dict = {}
    for j, spec in enumerate(model.types):
        law = spec.variation_law
        mean_s = law.mean()
        for h, subset in enumerate(catalog.subsets):
            speeds = tuple(spec.speeds[s] for s in subset)
            key = (law, speeds)
            got = cache.get(key)
            if got is None:
                got = expected_min_weighted([law] * len(subset), speeds)
                cache[key] = got
            theta[j, h] = got
            hat_theta[j, h] = mean_s / sum(speeds)
    return theta, hat_theta


def _full_set_thetas(model: SystemModel) -> np.ndarray:
    return np.array(
        [
            expected_min_weighted([spec.variation_law] * model.n_servers, spec.speeds)
            for spec in model.types
        ]
    )


def compute_proxies(model: SystemModel, policy: Policy) -> LoadProxies:
    n, m = model.n_servers, model.m_types
    cat = policy.catalog
    if cat.n_servers != n:
        raise ValueError("policy and model disagree on the server count")
    theta, hat_theta = _theta_tables(model, cat)

    p = model.type_probabilities()
    ex = np.array([t.size_law.mean() for t in model.types])

    membership = np.zeros((n, cat.k))
    for h, subset in enumerate(cat.subsets):
        for s in subset:
            membership[s, h] = 1.0

    probs = np.array([policy.probs_for_type(j) for j in range(m)])  # (M, K)
    marginals = probs @ membership.T  # (M, N)

    weighted = np.einsum("nk,mk,mk->nm", membership, probs, theta)      # (N, M)
    hat_weighted = np.einsum("nk,mk,mk->nm", membership, probs, hat_theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma_ij = np.where(marginals.T > 0, weighted / marginals.T, np.nan)
        hat_gamma_ij = np.where(marginals.T > 0, hat_weighted / marginals.T, np.nan)

    arrival_marginals = marginals.T @ p  # (N,)
    load_num = weighted @ (p * ex)       # (N,) = sum_j p_j E[X_j] sum_{h:i} probs_j[h] theta_jh
    hat_load_num = hat_weighted @ (p * ex)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma_i = np.where(arrival_marginals > 0, load_num / arrival_marginals, np.nan)
        hat_gamma_i = np.where(arrival_marginals > 0, hat_load_num / arrival_marginals, np.nan)

    theta_full = _full_set_thetas(model)
    gamma_0 = float(np.dot(p * ex, theta_full))
    hat_gamma_0 = float(
        np.dot(p * ex, [t.variation_law.mean() / sum(t.speeds) for t in model.types])
    )
    return LoadProxies(
        policy=policy,
        theta=theta,
        hat_theta=hat_theta,
        gamma_ij=gamma_ij,
        hat_gamma_ij=hat_gamma_ij,
        gamma_i=gamma_i,
        hat_gamma_i=hat_gamma_i,
        gamma_0=gamma_0,
        hat_gamma_0=hat_gamma_0,
        marginals=marginals,
        arrival_marginals=arrival_marginals,
    )


def lambda_star(model: SystemModel) -> float:
    """Full-replication stability threshold 1 / gamma_0 (exact)."""
    p = model.type_probabilities()
    ex = np.array([t.size_law.mean() for t in model.types])
    gamma_0 = float(np.dot(p * ex, _full_set_thetas(model)))
    return 1.0 / gamma_0


def stability_known_d1(model: SystemModel) -> StabilityReport:
    """Supremal rate with single replicas and per-type routing.

    Solved exactly as an LP in the flow variables f_ij = lambda p_j ptilde_ij:
    maximize lambda subject to sum_i f_ij = lambda p_j and per-server load
    sum_j f_ij E[X_j]E[S_j] / r_ij <= 1.
    """
    n, m = model.n_servers, model.m_types
    work = model.work_vector()
    p = model.type_probabilities()

    nvars = n * m + 1  # f variables then lambda
    c = [Fraction(0)] * nvars
    c[-1] = Fraction(1)
    a_eq, b_eq = [], []
    for j in range(m):
        row = [Fraction(0)] * nvars
        for i in range(n):
            row[i * m + j] = Fraction(1)
        row[-1] = -Fraction(p[j])
        a_eq.append(row)
        b_eq.append(Fraction(0))
    a_ub, b_ub = [], []
    for i in range(n):
        row = [Fraction(0)] * nvars
        for j in range(m):
            row[i * m + j] = Fraction(work[j]) / Fraction(model.speed(i, j))
        a_ub.append(row)
        b_ub.append(Fraction(1))

    res = solve_lp_max(c, a_ub, b_ub, a_eq, b_eq)
    if res.status != "optimal":
        raise RuntimeError(f"stability LP unexpectedly {res.status}")
    lam = res.x[-1]
    flows = [[res.x[i * m + j] for j in range(m)] for i in range(n)]

    witness = np.zeros((m, n))
    for j in range(m):
        denom = lam * Fraction(p[j])
        for i in range(n):
            witness[j, i] = float(flows[i][j] / denom) if denom else 0.0
    loads = [sum(flows[i][j] * a_ub[i][i * m + j] for j in range(m)) for i in range(n)]
    thresholds = np.array(
        [float(lam / rho) if rho > 0 else math.inf for rho in loads]
    )
    return StabilityReport(
        lambda_sup=float(lam),
        per_server_thresholds=thresholds,
        witness={"by_type": witness.tolist()},
    )


def stability_unknown_d1(model: SystemModel) -> StabilityReport:
    """Supremal rate with single replicas and type-blind routing.

    The per-server loads gamma~_i = sum_j p_j E[X_j]E[S_j] / r_ij are fixed,
    so the optimum routes in proportion to 1 / gamma~_i and supports
    lambda < sum_i 1 / gamma~_i.
    """
    p = model.type_probabilities()
    ex = np.array([t.size_law.mean() for t in model.types])
    es = np.array([t.variation_law.mean() for t in model.types])
    speeds = model.speed_matrix()  # (N, M)
    gamma_tilde = (speeds ** -1.0) @ (p * ex * es)
    inv = 1.0 / gamma_tilde
    lam = float(inv.sum())
    witness = inv / inv.sum()
    thresholds = 1.0 / (witness * gamma_tilde)
    return StabilityReport(
        lambda_sup=lam,
        per_server_thresholds=thresholds,
        witness={"common": witness.tolist()},
    )


def gamma_thresholds(model: SystemModel, policy: Policy) -> StabilityReport:
    """Proxy stability boundary: server i saturates when
    lambda * arrival_marginal_i * gamma_i reaches one.

    Exact at d = 1 and d = N, a simultaneous-start proxy in between.
    Servers the policy never touches carry no constraint.
    """
    proxies = compute_proxies(model, policy)
    with np.errstate(invalid="ignore", divide="ignore"):
        thresholds = 1.0 / (proxies.gamma_i * proxies.arrival_marginals)
    finite = thresholds[np.isfinite(thresholds)]
    if finite.size == 0:
        raise ValueError("policy assigns no work to any server")
    return StabilityReport(
        lambda_sup=float(finite.min()),
        per_server_thresholds=thresholds,
        witness={"policy": policy_to_config(policy)},
    )


def hat_load_values(model: SystemModel, policy: Policy) -> tuple[np.ndarray, float]:
    """Exponential load values (hat gammas) without any quadrature."""
    n, m = model.n_servers, model.m_types
    cat = policy.catalog
    p = model.type_probabilities()
    ex = np.array([t.size_law.mean() for t in model.types])
    es = np.array([t.variation_law.mean() for t in model.types])

    hat_num = np.zeros(n)
    marg = np.zeros((m, n))
    for j in range(m):
        probs = policy.probs_for_type(j)
        speeds = model.types[j].speeds
        for h, subset in enumerate(cat.subsets):
            ph = probs[h]
            if ph == 0.0:
                continue
            theta_hat = es[j] / sum(speeds[s] for s in subset)
            w = p[j] * ex[j] * ph * theta_hat
            for s in subset:
                hat_num[s] += w
                marg[j, s] += ph
    arrival_marg = p @ marg
    with np.errstate(invalid="ignore", divide="ignore"):
        hat_gamma_i = np.where(arrival_marg > 0, hat_num / arrival_marg, np.nan)
    hat_gamma_0 = float(np.dot(p * ex, es / model.speed_matrix().sum(axis=0)))
    return hat_gamma_i, hat_gamma_0


def lemma1_gap(hat_gamma_i, hat_gamma_0: float, policy: Policy) -> float:
    """max_i hat_gamma_i * marginal_i - hat_gamma_0 (nonnegative by Lemma)."""
    hat_gamma_i = np.asarray(hat_gamma_i, dtype=float)
    best = -math.inf
    for i, g in enumerate(hat_gamma_i):
        if math.isnan(g):
            continue
        marg = policy.marginal(i) if not policy.per_type else None
        if marg is None:
            raise ValueError("lemma 1 gap applies to type-blind policies")
        best = max(best, g * marg)
    return best - hat_gamma_0


def lemma1_gap_for(model: SystemModel, policy: Policy) -> float:
    hat_gamma_i, hat_gamma_0 = hat_load_values(model, policy)
    return lemma1_gap(hat_gamma_i, hat_gamma_0, policy)


def lemma2_bound(model: SystemModel, subset, type_j: int) -> float:
    """NWU lower bound on aggregate weighted service time per unit size:
    sum_{i in subset} r_ij theta, attained under simultaneous starts."""
    spec = model.types[type_j]
    cls = classify_aging(spec.variation_law)
    if not cls.is_nwu:
        raise ValueError(f"lemma 2 requires an NWU variation law, got {cls.tag.value}")
    subset = tuple(sorted(int(s) for s in subset))
    speeds = [spec.speeds[s] for s in subset]
    theta = expected_min_weighted([spec.variation_law] * len(subset), speeds)
    return float(sum(speeds) * theta)


class Prop1InfeasibleError(ValueError):
    """Measured busy fractions violate the per-type work inequality."""

    def __init__(self, type_j: int, sigma: float):
        self.type_j = type_j
        self.sigma = sigma
        super().__init__(
            f"type {type_j}: offered load exceeds weighted busy time (sigma = {sigma:.6g})"
        )


@dataclass(frozen=True)
class Prop1Derivation:
    """Single-replica policy derived from a stable replicated run."""

    policy: Policy
    p_tilde: np.ndarray      # (N, M)
    p_hat: np.ndarray        # (N,)
    sigma: np.ndarray        # (M,)
    delta_tau: np.ndarray    # (N, M)
    r_avg: np.ndarray        # (N,) time-average server speeds
    delta_lambda: float
    kappa: float
    epsilon: float
    lambda_total: float
    loads: np.ndarray        # (N,) at lambda_total


def prop1_derive_d1(model: SystemModel, tau: TauMatrix) -> Prop1Derivation:
    """De-replicate: busy fractions of a stable d > 1 run at rate lambda_0
    yield a d = 1 policy that is stable at lambda_0 + delta_lambda.

    Routes type j to server i proportionally to r_ij tau_ij, and spreads the
    measured slack capacity type-blindly in proportion to r_i delta_tau_i.
    """
    n, m = model.n_servers, model.m_types
    lam0 = tau.lambda_0
    if not lam0 > 0:
        raise ValueError(f"tau must come from a run at a positive rate, got {lam0}")
    t = tau.tau
    if t.shape != (n, m):
        raise ValueError(f"tau shape {t.shape} does not match model ({n}, {m})")
    busy = t.sum(axis=1)
    if np.any(busy >= 1.0):
        worst = int(np.argmax(busy))
        raise ValueError(f"server {worst} busy fraction {busy[worst]:.6g} is not below one")

    speeds = model.speed_matrix()
    p = model.type_probabilities()
    work = model.work_vector()

    weighted = (speeds * t).sum(axis=0)  # (M,) sum_i r_ij tau_ij
    offered = lam0 * p * work
    sigma = np.empty(m)
    for j in range(m):
        if weighted[j] <= 0.0:
            if offered[j] > 0.0:
                raise Prop1InfeasibleError(j, math.inf)
            sigma[j] = 1.0
            continue
        sigma[j] = offered[j] / weighted[j]
        if sigma[j] > 1.0 + SIGMA_TOL:
            raise Prop1InfeasibleError(j, float(sigma[j]))
    sigma = np.minimum(sigma, 1.0)

    with np.errstate(invalid="ignore", divide="ignore"):
        p_tilde = np.where(weighted > 0, speeds * t / weighted, 0.0)
    delta_tau = (1.0 - sigma) * t
    delta_tau_i = delta_tau.sum(axis=1)

    total_work = float(np.dot(p, work))
    r_avg = total_work / ((1.0 / speeds) @ (p * work))
    slack = float(np.dot(r_avg, delta_tau_i))
    delta_lambda = slack / total_work
    kappa = float(r_avg.min() / speeds.max())
    epsilon = float(weighted.sum() / (lam0 * total_work) - 1.0)

    if slack > 0.0:
        p_hat = r_avg * delta_tau_i / slack
    else:
        p_hat = np.zeros(n)

    lam_total = lam0 + delta_lambda
    q = (lam0 * p_tilde + delta_lambda * p_hat[:, None]) / lam_total  # (N, M)
    loads = ((q / speeds) * (p * work)).sum(axis=1) * lam_total

    cat = subset_catalog(n, 1)
    rows = tuple(tuple(float(q[i, j]) for i in range(n)) for j in range(m))
    # Singleton subsets are ordered (0,), ..., (N-1,), so row == prob vector.
    policy = Policy(cat, TypeVisibility.KNOWN, probs_by_type=rows, label="prop1-d1")
    return Prop1Derivation(
        policy=policy,
        p_tilde=p_tilde,
        p_hat=p_hat,
        sigma=sigma,
        delta_tau=delta_tau,
        r_avg=r_avg,
        delta_lambda=float(delta_lambda),
        kappa=kappa,
        epsilon=epsilon,
        lambda_total=float(lam_total),
        loads=loads,
    )
