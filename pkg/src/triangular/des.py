"""Event-driven simulation of the n-th queueing system under the shared-buffer policy.

Arrivals are renewal processes with rate n*lambda + sqrt(n)*lambda_hat; each
class serves its head-of-line task only, draining a unit-mean requirement
scaled by 1/mu_n at the effort fraction the policy assigns.  Effort is
recomputed at every arrival and departure.
"""
from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import DerivedParams, SystemSpec, derive
from .policy import Decision, PolicyConfig, admit, allocate

log = logging.getLogger(__name__)

_BATCH = 1024


class _Sampler:
    """Buffered mean-one variates from one of the supported families."""

    def __init__(self, rng: np.random.Generator, family: str, scv: float):
        self.rng, self.family, self.scv = rng, family, scv
        self.buf = np.empty(0)
        self.pos = 0
        if family == "lognormal":
            self.s2 = math.log1p(scv)

    def _refill(self):
        rng, fam = self.rng, self.family
        if fam == "exponential":
            self.buf = rng.standard_exponential(_BATCH)
        elif fam == "deterministic":
            self.buf = np.ones(_BATCH)
        elif fam == "uniform":
            half = math.sqrt(3.0 * self.scv)
            self.buf = 1.0 + half * (2.0 * rng.random(_BATCH) - 1.0)
        elif fam == "lognormal":
            s = math.sqrt(self.s2)
            self.buf = np.exp(-0.5 * self.s2 + s * rng.standard_normal(_BATCH))
        else:
            raise ValueError(f"unknown family {fam!r}")
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= self.buf.size:
            self._refill()
        v = self.buf[self.pos]
        self.pos += 1
        return float(v)


@dataclass
class SimState:
    X: np.ndarray
    residual_work: np.ndarray
    A: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    T_cum: np.ndarray
    clock: float = 0.0


@dataclass
class Trace:
    t: np.ndarray
    Xhat: np.ndarray
    w: np.ndarray
    idle: np.ndarray  # (t - sum T_cum) / sqrt(n)


@dataclass
class SimResult:
    J_n: float
    trace: Trace
    ssc_max: float
    ssc: np.ndarray
    policy_rejections: np.ndarray
    forced_rejections: np.ndarray
    n: int
    seed: int
    horizon: float
    events: int
    state: SimState = field(repr=False)

    @property
    def total_rejections(self) -> int:
        return int(self.policy_rejections.sum() + self.forced_rejections.sum())

    @property
    def forced_share(self) -> float:
        tot = self.total_rejections
        return float(self.forced_rejections.sum()) / tot if tot else float("nan")


def buffer_capacity(b: float, n: int) -> int:
    """Largest integer content with content/sqrt(n) <= b."""
    return int(math.floor(b * math.sqrt(n) * (1.0 + 1e-12)))


def run(
    spec: SystemSpec,
    cfg: PolicyConfig,
    n: int,
    T: float,
    seed: int,
    sample_dt: float | None = None,
    *,
    x0: np.ndarray | None = None,
    arrival_rates: np.ndarray | None = None,
    h: np.ndarray | None = None,
    r: np.ndarray | None = None,
    check: bool = True,
    derived: DerivedParams | None = None,
) -> SimResult:
    """Simulate [0, T] of the n-th system and return cost, trace and the collapse metric.

    ``arrival_rates`` overrides the n-th system arrival rates outright (use
    zeros to switch arrivals off); ``h`` and ``r`` override the cost vectors.
    ``x0`` is an unscaled integer start; anything but the empty system is
    allowed but not corrected toward the curve.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not T > 0:
        raise ValueError("horizon must be positive")
    derived = derive(spec) if derived is None else derived
    if cfg.I != spec.I or not np.allclose(cfg.theta, derived.theta):
        raise ValueError("policy was built for a different instance")
    I = spec.I
    sq = math.sqrt(n)
    lam_n = n * spec.vec("lam") + sq * spec.vec("lambda_hat")
    mu_n = n * spec.vec("mu") + sq * spec.vec("mu_hat")
    if arrival_rates is not None:
        lam_n = np.asarray(arrival_rates, dtype=float)
    if np.any(mu_n <= 0) or np.any(lam_n < 0):
        raise ValueError("n too small for the second-order rate terms")
    theta_n = n / mu_n  # n * theta^n, tends to theta
    h = spec.vec("h") if h is None else np.asarray(h, dtype=float)
    r = spec.vec("r") if r is None else np.asarray(r, dtype=float)
    alpha = spec.alpha
    cap = buffer_capacity(spec.b, n)
    sample_dt = T / 1000.0 if sample_dt is None else float(sample_dt)

    ss = np.random.SeedSequence([int(seed), int(n)])
    streams = [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2 * I)]
    ia = [_Sampler(streams[i], c.ia_family, c.ia_scv) for i, c in enumerate(spec.classes)]
    st = [_Sampler(streams[I + i], c.st_family, c.st_scv) for i, c in enumerate(spec.classes)]

    X = np.zeros(I, dtype=np.int64) if x0 is None else np.asarray(x0, dtype=np.int64).copy()
    if np.any(X < 0) or X.sum() > cap:
        raise ValueError("initial state outside the buffer")
    if X.any():
        log.warning("non-empty start: no initial jump toward the curve is applied")
    X0 = X.copy()
    A = np.zeros(I, dtype=np.int64)
    D = np.zeros(I, dtype=np.int64)
    Z = np.zeros(I, dtype=np.int64)
    Zp = np.zeros(I, dtype=np.int64)
    Zf = np.zeros(I, dtype=np.int64)
    Tc = np.zeros(I)
    R = np.array([st[i]() / mu_n[i] if X[i] > 0 else 0.0 for i in range(I)])

    heap: list[tuple[float, int]] = []
    for i in range(I):
        if lam_n[i] > 0:
            heapq.heappush(heap, (ia[i]() / lam_n[i], i))

    n_samples = int(math.floor(T / sample_dt + 1e-9)) + 1
    tr_t = sample_dt * np.arange(n_samples)
    tr_X = np.empty((n_samples, I))
    tr_w = np.empty(n_samples)
    tr_idle = np.empty(n_samples)
    k_s = 0

    def scaled():
        x = X / sq
        return x, float(theta_n @ x)

    x, w = scaled()
    B = allocate(cfg, x, w)
    now = 0.0
    cost = 0.0
    hx = float(h @ x)
    events = 0
    while True:
        t_arr = heap[0][0] if heap else math.inf
        t_dep, i_dep = math.inf, -1
        for i in range(I):
            if B[i] > 0.0:
                td = now + R[i] / B[i]
                if td < t_dep:
                    t_dep, i_dep = td, i
        t_next = min(t_arr, t_dep, T)
        # samples strictly before the next event see the current state
        while k_s < n_samples and tr_t[k_s] < t_next:
            tr_X[k_s] = x
            tr_w[k_s] = w
            tr_idle[k_s] = (tr_t[k_s] - (Tc.sum() + B.sum() * (tr_t[k_s] - now))) / sq
            k_s += 1
        dt = t_next - now
        if dt > 0:
            cost += hx * (math.exp(-alpha * now) - math.exp(-alpha * t_next)) / alpha
            R -= B * dt
            Tc += B * dt
        now = t_next
        if now >= T:
            break
        events += 1
        if t_arr <= t_dep:
            _, i = heapq.heappop(heap)
            heapq.heappush(heap, (now + ia[i]() / lam_n[i], i))
            A[i] += 1
            d = admit(cfg, i, x, w, n)
            if d is Decision.ACCEPT:
                X[i] += 1
                if X[i] == 1:
                    R[i] = st[i]() / mu_n[i]
                if check and X.sum() > cap:
                    raise AssertionError("buffer constraint violated")
            else:
                Z[i] += 1
                (Zp if d is Decision.REJECT_POLICY else Zf)[i] += 1
                cost += r[i] / sq * math.exp(-alpha * now)
        else:
            i = i_dep
            D[i] += 1
            X[i] -= 1
            R[i] = st[i]() / mu_n[i] if X[i] > 0 else 0.0
        x, w = scaled()
        hx = float(h @ x)
        B = allocate(cfg, x, w)
        if check:
            if not np.array_equal(X, X0 + A - D - Z):
                raise AssertionError("flow conservation violated")
            if np.any(B[X == 0] != 0.0):
                raise AssertionError("effort given to an empty class")
            if X.any() and abs(B.sum() - 1.0) > 1e-12:
                raise AssertionError("server idles with work present")
    while k_s < n_samples:
        tr_X[k_s] = x
        tr_w[k_s] = w
        tr_idle[k_s] = (tr_t[k_s] - Tc.sum()) / sq
        k_s += 1

    trace = Trace(t=tr_t, Xhat=tr_X, w=tr_w, idle=tr_idle)
    if check and np.any(np.diff(trace.idle) < -1e-9):
        raise AssertionError("cumulative idleness decreased")
    ssc_max, ssc = ssc_metric(trace, cfg)
    state = SimState(X=X, residual_work=R, A=A, D=D, Z=Z, T_cum=Tc, clock=now)
    return SimResult(
        J_n=cost,
        trace=trace,
        ssc_max=ssc_max,
        ssc=ssc,
        policy_rejections=Zp,
        forced_rejections=Zf,
        n=n,
        seed=int(seed),
        horizon=float(T),
        events=events,
        state=state,
    )


def ssc_metric(trace: Trace, cfg: PolicyConfig) -> tuple[float, np.ndarray]:
    """L1 distance of the scaled queue vector from gamma_a(workload) at each sample."""
    w = np.asarray(trace.w, dtype=float)
    hi = cfg.gamma_a.domain[1]
    if np.any(w > hi * (1 + 1e-9)):
        log.warning("workload beyond the curve domain; clamped to %.6g", hi)
        w = np.minimum(w, hi)
    target = cfg.gamma_a.evaluate(w)
    dist = np.abs(np.asarray(trace.Xhat) - target).sum(axis=1)
    return float(dist.max()) if dist.size else 0.0, dist


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    se: float
    results: tuple[SimResult, ...]

    @property
    def ssc_mean(self) -> float:
        return float(np.mean([r.ssc_max for r in self.results]))

    @property
    def forced_share_mean(self) -> float:
        shares = [r.forced_share for r in self.results]
        shares = [s for s in shares if not math.isnan(s)]
        return float(np.mean(shares)) if shares else float("nan")


def _run_one(args):
    spec, cfg, n, T, seed, sample_dt, kw = args
    return run(spec, cfg, n, T, seed, sample_dt, **kw)


def cost_estimate(
    spec: SystemSpec,
    cfg: PolicyConfig,
    n: int,
    seeds: list[int],
    T: float,
    sample_dt: float | None = None,
    threads: int = 1,
    **kw,
) -> CostEstimate:
    """Mean and standard error of J_n over independent seeds, merged in seed order."""
    jobs = [(spec, cfg, n, T, s, sample_dt, kw) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    costs = np.array([r.J_n for r in results])
    se = float(costs.std(ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else float("nan")
    return CostEstimate(mean=float(costs.mean()), se=se, results=tuple(results))
