"""Event-driven simulation of N FCFS queues under cancel-on-completion.

Each Poisson arrival draws a type, an intrinsic size and a server subset,
and places one replica in every chosen queue.  A replica of size x with
variation y needs ``x * y / r[server][type]`` service time; the moment the
first replica finishes, all siblings vanish (queued ones silently, an
in-service one counts its partial work as wasted busy time).

Event ties are ordered (completion before arrival, then server index, then
job id) so runs with atomic laws remain deterministic.  Statistics are
collected over the post-warmup window and split into equal time batches so
that any derived quantity gets a batch-means standard error.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from hashlib import blake2b
from heapq import heappop, heappush
from bisect import bisect_left
from collections import deque
from pathlib import Path

import numpy as np
from scipy import stats as sps

from redlab.analytics import TauMatrix
from redlab.assignment import Policy
from redlab.distributions import Deterministic, make_stream
from redlab.workload import IDENTICAL, SystemModel

__all__ = [
    "OldestJobViolation",
    "SimConfig",
    "SimStats",
    "batch_standard_error",
    "estimate_boundary",
    "measure_tau",
    "oldest_job_violation",
    "run",
]

_CHUNK = 1 << 15
_EVT = struct.Struct("<dBqi")  # time, kind, job, server


class OldestJobViolation(AssertionError):
    """The oldest in-system job lacks an in-service replica somewhere."""

    def __init__(self, time: float, job: int, server: int):
        self.time = time
        self.job = job
        self.server = server
        super().__init__(f"t={time:.6g}: oldest job {job} not in service at server {server}")


@dataclass(frozen=True)
class SimConfig:
    horizon_arrivals: int = 100_000
    warmup_fraction: float = 0.2
    seed: int = 0
    batches: int = 32
    divergence_guard: int = 1_000_000
    assert_invariants: bool = False
    trace_hash: bool = False
    trace_path: str | Path | None = None
    # Probes switch draining off: in-flight work at the horizon is then not
    # billed to the busy-time accounts, which slightly understates tau.
    drain: bool = True

    def __post_init__(self):
        if self.horizon_arrivals < 1:
            raise ValueError("need at least one arrival")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.batches < 2:
            raise ValueError("need at least two batches")


@dataclass(frozen=True)
class SimStats:
    """Measured steady-state statistics of one run.

    Time-fraction fields cover the post-warmup window; latency and overlap
    cover jobs arriving in that window.  ``batch_*`` arrays hold the same
    measures per time batch for standard-error estimation.
    """

    lam: float
    seed: int
    horizon_arrivals: int
    window: tuple[float, float]
    diverged: bool
    diverged_at: float | None
    jobs_completed: int
    mean_latency: float
    latency_half_width: float
    tau1: np.ndarray  # (N, M) effective busy fraction
    tau2: np.ndarray  # (N, M) wasted busy fraction
    pi0_bar: float    # fraction of time the system is non-empty
    pi0_star: float   # fraction of time all servers are busy
    mean_overlap: float
    mean_queue: float
    batch_time: np.ndarray        # (B,) covered time per batch
    batch_tau1: np.ndarray        # (B, N, M) busy time (not fraction)
    batch_tau2: np.ndarray
    batch_nonempty: np.ndarray    # (B,) time
    batch_allbusy: np.ndarray     # (B,) time
    batch_queue_time: np.ndarray  # (B,) integral of jobs-in-system dt
    batch_latency_sum: np.ndarray
    batch_latency_count: np.ndarray
    batch_overlap_sum: np.ndarray
    trace_hash: str | None = None

    @property
    def tau(self) -> np.ndarray:
        return self.tau1 + self.tau2

    @property
    def batch_latency_mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(
                self.batch_latency_count > 0,
                self.batch_latency_sum / self.batch_latency_count,
                np.nan,
            )

    def batch_fractions(self, batch_values: np.ndarray) -> np.ndarray:
        """Convert per-batch times (leading axis B) into per-batch fractions."""
        shape = (-1,) + (1,) * (batch_values.ndim - 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return batch_values / self.batch_time.reshape(shape)

    @property
    def batch_queue(self) -> np.ndarray:
        return self.batch_fractions(self.batch_queue_time)

    def to_json_dict(self) -> dict:
        def arr(a):
            return np.asarray(a).tolist()

        return {
            "lambda": self.lam,
            "seed": self.seed,
            "horizon_arrivals": self.horizon_arrivals,
            "window": list(self.window),
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "jobs_completed": self.jobs_completed,
            "mean_latency": None if math.isnan(self.mean_latency) else self.mean_latency,
            "latency_half_width": None
            if math.isnan(self.latency_half_width)
            else self.latency_half_width,
            "tau": arr(self.tau),
            "tau1": arr(self.tau1),
            "tau2": arr(self.tau2),
            "pi0_bar": self.pi0_bar,
            "pi0_star": self.pi0_star,
            "mean_overlap": self.mean_overlap,
            "mean_queue": self.mean_queue,
            "trace_hash": self.trace_hash,
        }


def batch_standard_error(series) -> float:
    """Standard error of a mean estimated from batch means."""
    vals = np.asarray(series, dtype=float)
    vals = vals[np.isfinite(vals)]
    if vals.size < 2:
        return math.inf
    return float(vals.std(ddof=1) / math.sqrt(vals.size))


def oldest_job_violation(jobs: dict, srv_job: list) -> tuple[int, int] | None:
    """Check that the oldest in-system job is in service on its whole subset.

    ``jobs`` must iterate in arrival order (dicts do).  Returns the
    offending (job, server) or None; an empty system passes vacuously.
    """
    for jid, rec in jobs.items():
        for s in rec[3]:
            if srv_job[s] != jid:
                return jid, s
        return None
    return None


def _add_interval(acc, a, b, w, t0, t1, inv_bw, nb):
    """Accumulate w * dt of [a, b] clipped to the window into time batches."""
    if a < t0:
        a = t0
    if b > t1:
        b = t1
    if b <= a:
        return
    ka = int((a - t0) * inv_bw)
    kb = int((b - t0) * inv_bw)
    if ka >= nb:
        ka = nb - 1
    if kb >= nb:
        kb = nb - 1
    if ka == kb:
        acc[ka] += (b - a) * w
        return
    bw = 1.0 / inv_bw
    acc[ka] += (t0 + (ka + 1) * bw - a) * w
    for k in range(ka + 1, kb):
        acc[k] += bw * w
    acc[kb] += (b - (t0 + kb * bw)) * w


def _add_busy(acc, idx, a, b, t0, t1, inv_bw, nb):
    """Accumulate a service interval into per-batch (server, type) cells."""
    if a < t0:
        a = t0
    if b > t1:
        b = t1
    if b <= a:
        return
    ka = int((a - t0) * inv_bw)
    kb = int((b - t0) * inv_bw)
    if ka >= nb:
        ka = nb - 1
    if kb >= nb:
        kb = nb - 1
    if ka == kb:
        acc[ka][idx] += b - a
        return
    bw = 1.0 / inv_bw
    acc[ka][idx] += t0 + (ka + 1) * bw - a
    for k in range(ka + 1, kb):
        acc[k][idx] += bw
    acc[kb][idx] += b - (t0 + kb * bw)


def _empty_stats(model, lam, config):
    n, m, b = model.n_servers, model.m_types, config.batches
    zero_nm = np.zeros((n, m))
    return SimStats(
        lam=lam,
        seed=config.seed,
        horizon_arrivals=config.horizon_arrivals,
        window=(0.0, 0.0),
        diverged=False,
        diverged_at=None,
        jobs_completed=0,
        mean_latency=math.nan,
        latency_half_width=math.nan,
        tau1=zero_nm,
        tau2=zero_nm.copy(),
        pi0_bar=0.0,
        pi0_star=0.0,
        mean_overlap=math.nan,
        mean_queue=0.0,
        batch_time=np.zeros(b),
        batch_tau1=np.zeros((b, n, m)),
        batch_tau2=np.zeros((b, n, m)),
        batch_nonempty=np.zeros(b),
        batch_allbusy=np.zeros(b),
        batch_queue_time=np.zeros(b),
        batch_latency_sum=np.zeros(b),
        batch_latency_count=np.zeros(b, dtype=int),
        batch_overlap_sum=np.zeros(b),
    )


def run(model: SystemModel, policy: Policy, lam: float, config: SimConfig | None = None) -> SimStats:
    """Simulate ``horizon_arrivals`` Poisson arrivals at rate ``lam``.

    Identical (seed, config, model, policy, lam) reproduces the run bit for
    bit.  If the number of resident replicas ever exceeds the divergence
    guard the run aborts and is flagged diverged.
    """
    if config is None:
        config = SimConfig()
    if lam < 0:
        raise ValueError(f"arrival rate must be nonnegative, got {lam}")
    if policy.catalog.n_servers != model.n_servers:
        raise ValueError("policy and model disagree on the server count")
    if policy.per_type and len(policy.probs_by_type) != model.m_types:
        raise ValueError("per-type policy does not match the model's type count")
    if lam == 0.0:
        return _empty_stats(model, lam, config)

    n, m = model.n_servers, model.m_types
    cat = policy.catalog
    subsets = cat.subsets
    dsub = cat.d
    nb = config.batches
    horizon = config.horizon_arrivals
    guard = config.divergence_guard
    seed = config.seed
    identical = model.replica_mode == IDENTICAL

    rs = [[model.speed(i, j) for j in range(m)] for i in range(n)]
    probs = model.type_probabilities()
    cum_p = np.cumsum(probs).tolist()
    cum_sub = [
        np.cumsum(policy.probs_for_type(j if policy.per_type else None)).tolist()
        for j in range(m)
    ]
    k_sub = cat.k

    arr_rng = make_stream(seed, "arrivals")
    type_rng = make_stream(seed, "types")
    sub_rng = make_stream(seed, "subsets")
    size_rngs = [make_stream(seed, "sizes", j) for j in range(m)]
    var_rngs = [make_stream(seed, "variations", j) for j in range(m)]

    arrivals = np.cumsum(arr_rng.exponential(1.0 / lam, horizon)).tolist()
    warm = min(int(config.warmup_fraction * horizon), horizon - 1)
    t0 = arrivals[warm] if warm > 0 else 0.0
    t1 = arrivals[-1]
    if t1 <= t0:
        t1 = t0 + 1e-12
    inv_bw = nb / (t1 - t0)

    # Per-type draw plumbing: point-mass laws skip their streams entirely.
    size_const: list = [None] * m
    size_buf: list = [None] * m
    size_idx = [0] * m
    var_const: list = [None] * m
    var_buf: list = [None] * m
    var_idx = [0] * m
    for j, spec in enumerate(model.types):
        if isinstance(spec.size_law, Deterministic):
            size_const[j] = spec.size_law.value
        else:
            size_buf[j] = []
        if identical or isinstance(spec.variation_law, Deterministic):
            var_const[j] = spec.variation_law.mean()
        else:
            var_buf[j] = []

    type_buf: list = []
    type_i = 0
    sub_u_buf: list = []
    sub_u_i = 0

    acc1 = [[0.0] * (n * m) for _ in range(nb)]
    acc2 = [[0.0] * (n * m) for _ in range(nb)]
    qacc = [0.0] * nb
    neacc = [0.0] * nb
    abacc = [0.0] * nb
    lat_sum = [0.0] * nb
    lat_cnt = [0] * nb
    ov_sum = [0.0] * nb

    heap: list = []
    srv_job = [-1] * n
    srv_start = [0.0] * n
    queues = [deque() for _ in range(n)]
    jobs: dict = {}
    busy = 0
    njobs = 0
    resident = 0
    q_last = 0.0
    ne_mark = 0.0
    ab_mark = 0.0
    diverged = False
    diverged_at = None
    completed = 0

    hasher = blake2b(digest_size=16) if config.trace_hash else None
    trace_fh = open(config.trace_path, "w", encoding="utf-8") if config.trace_path else None

    def emit(t, kind, jid, server):
        if hasher is not None:
            hasher.update(_EVT.pack(t, kind, jid, server))
        if trace_fh is not None:
            name = ("completion", "arrival", "cancel")[kind]
            trace_fh.write(
                json.dumps({"t": t, "kind": name, "job": jid, "server": server}) + "\n"
            )

    tracing = hasher is not None or trace_fh is not None
    checking = config.assert_invariants

    def start_queued(s, t):
        """Server s finished an episode: begin the next live replica or idle."""
        nonlocal busy
        q = queues[s]
        while q:
            nj = q.popleft()
            rec = jobs.get(nj)
            if rec is None:
                continue  # sibling completed while this replica was queued
            jt = rec[0]
            vrow = rec[4]
            y = vrow[rec[3].index(s)] if vrow is not None else var_const[jt]
            srv_job[s] = nj
            srv_start[s] = t
            heappush(heap, (t + rec[2] * y / rs[s][jt], s, nj))
            cnt = rec[5] + 1
            rec[5] = cnt
            if cnt == dsub:
                rec[6] = t
            return
        srv_job[s] = -1
        if busy == n:
            _add_interval(abacc, ab_mark, t, 1.0, t0, t1, inv_bw, nb)
        busy -= 1

    inf = math.inf
    n_idx = 0
    arr_t = arrivals[0]

    while True:
        if heap and heap[0][0] <= arr_t:
            t, s, jid = heappop(heap)
            rec = jobs.get(jid)
            if rec is None:
                continue  # replica was cancelled after being scheduled
            del jobs[jid]
            jt = rec[0]
            _add_busy(acc1, s * m + jt, srv_start[s], t, t0, t1, inv_bw, nb)
            for s2 in rec[3]:
                if s2 != s and srv_job[s2] == jid:
                    _add_busy(acc2, s2 * m + jt, srv_start[s2], t, t0, t1, inv_bw, nb)
                    if tracing:
                        emit(t, 2, jid, s2)
                    start_queued(s2, t)
            if jid >= warm:
                at = rec[1]
                k = int((at - t0) * inv_bw)
                if k >= nb:
                    k = nb - 1
                elif k < 0:
                    k = 0
                lat_sum[k] += t - at
                lat_cnt[k] += 1
                a0 = rec[6]
                if a0 >= 0.0:
                    ov_sum[k] += t - a0
                completed += 1
            if njobs and t > q_last:
                _add_interval(qacc, q_last, t, float(njobs), t0, t1, inv_bw, nb)
            q_last = t
            njobs -= 1
            if njobs == 0:
                _add_interval(neacc, ne_mark, t, 1.0, t0, t1, inv_bw, nb)
            resident -= dsub
            start_queued(s, t)
            if tracing:
                emit(t, 0, jid, s)
            if checking:
                bad = oldest_job_violation(jobs, srv_job)
                if bad is not None:
                    raise OldestJobViolation(t, bad[0], bad[1])
        elif n_idx < horizon:
            t = arr_t
            jid = n_idx
            if m > 1:
                if type_i == len(type_buf):
                    type_buf = np.searchsorted(
                        cum_p, type_rng.random(_CHUNK), side="left"
                    ).tolist()
                    type_i = 0
                jt = type_buf[type_i]
                type_i += 1
            else:
                jt = 0
            x = size_const[jt]
            if x is None:
                si = size_idx[jt]
                buf = size_buf[jt]
                if si == len(buf):
                    buf = model.types[jt].size_law.sample_n(size_rngs[jt], _CHUNK).tolist()
                    size_buf[jt] = buf
                    si = 0
                x = buf[si]
                size_idx[jt] = si + 1
            if k_sub > 1:
                if sub_u_i == len(sub_u_buf):
                    sub_u_buf = sub_rng.random(_CHUNK).tolist()
                    sub_u_i = 0
                h = bisect_left(cum_sub[jt], sub_u_buf[sub_u_i])
                sub_u_i += 1
            else:
                h = 0
            subset = subsets[h]
            if var_const[jt] is None:
                vi = var_idx[jt]
                vbuf = var_buf[jt]
                if vi + dsub > len(vbuf):
                    vbuf = (
                        model.types[jt]
                        .variation_law.sample_n(var_rngs[jt], _CHUNK * dsub)
                        .tolist()
                    )
                    var_buf[jt] = vbuf
                    vi = 0
                vrow = vbuf[vi : vi + dsub]
                var_idx[jt] = vi + dsub
            else:
                vrow = None
            rec = [jt, t, x, subset, vrow, 0, -1.0]
            jobs[jid] = rec
            resident += dsub
            if resident > guard:
                diverged = True
                diverged_at = t
                break
            if njobs and t > q_last:
                _add_interval(qacc, q_last, t, float(njobs), t0, t1, inv_bw, nb)
            q_last = t
            njobs += 1
            if njobs == 1:
                ne_mark = t
            started = 0
            for slot in range(dsub):
                s = subset[slot]
                if srv_job[s] == -1:
                    srv_job[s] = jid
                    srv_start[s] = t
                    y = vrow[slot] if vrow is not None else var_const[jt]
                    heappush(heap, (t + x * y / rs[s][jt], s, jid))
                    started += 1
                    busy += 1
                    if busy == n:
                        ab_mark = t
                else:
                    queues[s].append(jid)
            rec[5] = started
            if started == dsub:
                rec[6] = t
            if tracing:
                emit(t, 1, jid, -1)
            n_idx += 1
            arr_t = arrivals[n_idx] if n_idx < horizon else (inf if config.drain else -inf)
            if checking:
                bad = oldest_job_violation(jobs, srv_job)
                if bad is not None:
                    raise OldestJobViolation(t, bad[0], bad[1])
        else:
            break

    t_fin = t1 if not diverged else min(diverged_at, t1)
    if njobs and t_fin > q_last:
        _add_interval(qacc, q_last, t_fin, float(njobs), t0, t1, inv_bw, nb)
        _add_interval(neacc, ne_mark, t_fin, 1.0, t0, t1, inv_bw, nb)
    if busy == n:
        _add_interval(abacc, ab_mark, t_fin, 1.0, t0, t1, inv_bw, nb)
    if trace_fh is not None:
        trace_fh.close()

    bw = 1.0 / inv_bw
    batch_time = np.clip(t_fin - (t0 + np.arange(nb) * bw), 0.0, bw)
    span = float(batch_time.sum())
    batch_tau1 = np.asarray(acc1).reshape(nb, n, m)
    batch_tau2 = np.asarray(acc2).reshape(nb, n, m)
    lat_cnt_arr = np.asarray(lat_cnt)
    lat_sum_arr = np.asarray(lat_sum)
    total_cnt = int(lat_cnt_arr.sum())

    if span > 0:
        tau1 = batch_tau1.sum(axis=0) / span
        tau2 = batch_tau2.sum(axis=0) / span
        pi0_bar = float(sum(neacc) / span)
        pi0_star = float(sum(abacc) / span)
        mean_queue = float(sum(qacc) / span)
    else:
        tau1 = np.full((n, m), math.nan)
        tau2 = np.full((n, m), math.nan)
        pi0_bar = pi0_star = mean_queue = math.nan

    if total_cnt > 0 and not diverged:
        mean_latency = float(lat_sum_arr.sum() / total_cnt)
        means = lat_sum_arr[lat_cnt_arr > 0] / lat_cnt_arr[lat_cnt_arr > 0]
        if means.size >= 2:
            tcrit = float(sps.t.ppf(0.975, means.size - 1))
            half = tcrit * float(means.std(ddof=1)) / math.sqrt(means.size)
        else:
            half = math.inf
        mean_overlap = float(np.asarray(ov_sum).sum() / total_cnt)
    else:
        mean_latency = math.nan
        half = math.nan
        mean_overlap = math.nan

    return SimStats(
        lam=lam,
        seed=seed,
        horizon_arrivals=horizon,
        window=(t0, t1),
        diverged=diverged,
        diverged_at=diverged_at,
        jobs_completed=completed,
        mean_latency=mean_latency,
        latency_half_width=half,
        tau1=tau1,
        tau2=tau2,
        pi0_bar=pi0_bar,
        pi0_star=pi0_star,
        mean_overlap=mean_overlap,
        mean_queue=mean_queue,
        batch_time=batch_time,
        batch_tau1=batch_tau1,
        batch_tau2=batch_tau2,
        batch_nonempty=np.asarray(neacc),
        batch_allbusy=np.asarray(abacc),
        batch_queue_time=np.asarray(qacc),
        batch_latency_sum=lat_sum_arr,
        batch_latency_count=lat_cnt_arr,
        batch_overlap_sum=np.asarray(ov_sum),
        trace_hash=hasher.hexdigest() if hasher is not None else None,
    )


def measure_tau(stats: SimStats) -> TauMatrix:
    """Busy-fraction matrix of a completed run, split effective/wasted."""
    if stats.diverged:
        raise ValueError("cannot measure busy fractions of a diverged run")
    return TauMatrix(
        tau=stats.tau, tau1=stats.tau1, tau2=stats.tau2, lambda_0=stats.lam
    )


# --- empirical stability boundary -------------------------------------------

# A probe is unstable when the late-window mean queue clearly outgrows the
# early window; the offset keeps small-queue noise from tripping the rule.
_GROWTH_FACTOR = 1.5
_GROWTH_OFFSET = 8.0


def _probe_seed(seed: int, idx: int) -> int:
    return int(np.random.SeedSequence((seed, 0xB0, idx)).generate_state(1)[0])


def probe_unstable(stats: SimStats) -> bool:
    """Classify one probe run as unstable (diverged or growing backlog)."""
    if stats.diverged:
        return True
    q = stats.batch_queue
    nbq = q.size
    early = float(np.nanmean(q[nbq // 4 : nbq // 2]))
    late = float(np.nanmean(q[(3 * nbq) // 4 :]))
    return late > _GROWTH_FACTOR * early + _GROWTH_OFFSET


def estimate_boundary(
    model: SystemModel,
    policy: Policy,
    config: SimConfig | None = None,
    lo: float = 0.05,
    hi: float | None = None,
    resolution: float = 0.02,
) -> float:
    """Bisect the arrival rate between a stable and an unstable probe.

    ``lo`` must probe stable and ``hi`` unstable; ``hi`` is found by
    doubling when not supplied.  Each probe is an independent short run
    (no drain), so the answer carries probe noise on top of the stated
    resolution.
    """
    if config is None:
        config = SimConfig()
    base = replace(config, drain=False, assert_invariants=False, trace_hash=False, trace_path=None)
    counter = 0

    def unstable(lam):
        nonlocal counter
        counter += 1
        stats = run(model, policy, lam, replace(base, seed=_probe_seed(config.seed, counter)))
        return probe_unstable(stats)

    tries = 0
    while unstable(lo):
        lo *= 0.5
        tries += 1
        if tries > 6:
            return 0.0
    if hi is None:
        hi = max(4.0 * lo, 0.1)
    while not unstable(hi):
        lo = hi
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("no unstable rate found below 1e6; check the model")
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if unstable(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
