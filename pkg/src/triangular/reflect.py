"""Two-sided Skorokhod map, reflected Brownian motion paths and the workload control cost."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .holding_cost import PiecewiseLinear

NORMAL_METHOD = "numpy PCG64 ziggurat (Generator.standard_normal)"


@dataclass(frozen=True)
class Path:
    dt: float
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[-1])


@dataclass(frozen=True)
class ReflectionTriple:
    phi: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray


def skorokhod_map(psi: Path | np.ndarray, a: float, b: float) -> ReflectionTriple:
    """Constrain a piecewise-constant path to [a, b].

    Increments of ``psi`` are applied one at a time; whatever would leave the
    interval is credited to ``eta1`` (pushes up at ``a``) or ``eta2`` (pushes
    down at ``b``).  Works on a single path or along the last axis of a batch.
    """
    vals = psi.values if isinstance(psi, Path) else np.asarray(psi, dtype=float)
    if not a < b:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    if np.any(vals[..., 0] < a) or np.any(vals[..., 0] > b):
        raise ValueError("initial value outside [a, b]")
    inc = np.diff(vals, axis=-1)
    K = vals.shape[-1]
    phi = np.empty_like(vals)
    eta1 = np.zeros_like(vals)
    eta2 = np.zeros_like(vals)
    phi[..., 0] = vals[..., 0]
    cur = vals[..., 0].copy()
    e1 = np.zeros_like(cur)
    e2 = np.zeros_like(cur)
    for k in range(1, K):
        y = cur + inc[..., k - 1]
        lo = np.maximum(a - y, 0.0)
        hi = np.maximum(y - b, 0.0)
        cur = np.minimum(np.maximum(y, a), b)
        e1 = e1 + lo
        e2 = e2 + hi
        phi[..., k] = cur
        eta1[..., k] = e1
        eta2[..., k] = e2
    return ReflectionTriple(phi, eta1, eta2)


def replication_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def default_dt(sigma2_bar: float, x_star: float) -> float:
    if sigma2_bar <= 0:
        return 1e-3
    return 1e-3 * min(1.0, x_star**2 / sigma2_bar)


def horizon_for(alpha: float, tail: float = 1e-9) -> float:
    """Smallest T with exp(-alpha*T) <= tail."""
    return -math.log(tail) / alpha


def _bridge_step(x, y, e, s2dt, upper):
    """Exact reflected step at the nearer wall using the sampled bridge extremum."""
    root = np.sqrt(y * y + 2.0 * s2dt * e)
    near_low = x <= 0.5 * upper
    bmin = 0.5 * (y - root)
    bmax = 0.5 * (y + root)
    push_lo = np.where(near_low, np.maximum(0.0, -(x + bmin)), 0.0)
    push_hi = np.where(near_low, 0.0, np.maximum(0.0, x + bmax - upper))
    nxt = x + y + push_lo - push_hi
    # the far wall cannot be reached in one step at sane dt; clamp as plain Euler would
    extra_hi = np.maximum(nxt - upper, 0.0)
    extra_lo = np.maximum(-nxt, 0.0)
    nxt = nxt - extra_hi + extra_lo
    return nxt, push_lo + extra_lo, push_hi + extra_hi


def simulate_rbm_batch(
    x0: float,
    m_bar: float,
    sigma2_bar: float,
    x_star: float,
    T: float,
    dt: float,
    seed: int,
    replications: int,
    first_index: int = 0,
    scheme: str = "bridge",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reflected (m_bar, sigma2_bar)-Brownian motion on [0, x_star], one row per replication.

    Replication ``k`` draws from ``replication_rng(seed, first_index + k)`` so a
    batch can be split or reordered without changing any path.

    scheme="euler" feeds Gaussian increments to :func:`skorokhod_map`.
    scheme="bridge" additionally samples the extremum of the Brownian bridge
    over each step and reflects off it, which removes the O(sqrt(dt)) bias of
    discretely monitored reflection.

    Returns (X, Y, Z): state and cumulative pushes at 0 and at x_star.
    """
    if not 0.0 <= x0 <= x_star:
        raise ValueError("need 0 <= x0 <= x_star")
    if dt <= 0 or x_star <= 0:
        raise ValueError("need dt > 0 and x_star > 0")
    K = int(round(T / dt))
    sd = math.sqrt(max(sigma2_bar, 0.0) * dt)
    W = np.empty((replications, K))
    E = np.empty((replications, K)) if scheme == "bridge" else None
    for r in range(replications):
        rng = replication_rng(seed, first_index + r)
        W[r] = m_bar * dt + sd * rng.standard_normal(K)
        if E is not None:
            E[r] = rng.standard_exponential(K)
    if scheme == "euler":
        psi = np.empty((replications, K + 1))
        psi[:, 0] = x0
        np.cumsum(W, axis=1, out=psi[:, 1:])
        psi[:, 1:] += x0
        tri = skorokhod_map(psi, 0.0, x_star)
        return tri.phi, tri.eta1, tri.eta2
    if scheme != "bridge":
        raise ValueError(f"unknown scheme {scheme!r}")
    X = np.empty((replications, K + 1))
    Y = np.zeros((replications, K + 1))
    Z = np.zeros((replications, K + 1))
    X[:, 0] = x0
    s2dt = max(sigma2_bar, 0.0) * dt
    cur = X[:, 0].copy()
    for k in range(K):
        cur, lo, hi = _bridge_step(cur, W[:, k], E[:, k], s2dt, x_star)
        X[:, k + 1] = cur
        Y[:, k + 1] = Y[:, k] + lo
        Z[:, k + 1] = Z[:, k] + hi
    return X, Y, Z


def simulate_rbm(x0_bar, m_bar, sigma2_bar, x_star, T, dt, seed, scheme: str = "bridge"):
    """Single replication (index 0) as three :class:`Path` objects."""
    X, Y, Z = simulate_rbm_batch(x0_bar, m_bar, sigma2_bar, x_star, T, dt, seed, 1, scheme=scheme)
    return Path(dt, X[0]), Path(dt, Y[0]), Path(dt, Z[0])


def discount_weights(K: int, dt: float, alpha: float) -> np.ndarray:
    """Weights w_k with sum_k w_k f(t_k) = integral of exp(-alpha t) times the linear interpolant of f."""
    c = alpha * dt
    t = dt * np.arange(K)
    E0 = np.exp(-alpha * t[:-1])
    if c < 1e-8:
        right = E0 * dt / 2
        full = E0 * dt
    else:
        right = E0 * (1.0 - math.exp(-c) * (1.0 + c)) / (alpha * c)
        full = E0 * (-math.expm1(-c)) / alpha
    left = full - right
    w = np.zeros(K)
    w[:-1] += left
    w[1:] += right
    return w


def bcp_cost(X, Z, h_bar: PiecewiseLinear, r_bar: float, alpha: float, dt: float) -> np.ndarray | float:
    """Discounted h_bar(X) dt + r_bar dZ over the simulated horizon.

    Holding cost integrates the linear interpolant of the sampled path with
    exact discount weights; each rejection increment is discounted at the end
    of its step.  Accepts a single path or a (replications, steps) batch.
    """
    X = np.asarray(X.values if isinstance(X, Path) else X, dtype=float)
    Z = np.asarray(Z.values if isinstance(Z, Path) else Z, dtype=float)
    if X.shape != Z.shape:
        raise ValueError("mismatched grids")
    K = X.shape[-1]
    w = discount_weights(K, dt, alpha)
    # row-wise sums rather than BLAS so a replication's cost does not depend on batch size
    hold = (h_bar.evaluate(X.ravel()).reshape(X.shape) * w).sum(axis=-1)
    disc = np.exp(-alpha * dt * np.arange(1, K))
    rej = r_bar * (np.diff(Z, axis=-1) * disc).sum(axis=-1)
    out = hold + rej
    return float(out) if np.ndim(out) == 0 else out


def tail_bound(h_bar: PiecewiseLinear, x_star: float, r_bar: float, alpha: float, T: float, reject_rate: float = 0.0) -> float:
    """Upper bound on the cost left out by stopping at T."""
    return math.exp(-alpha * T) * (h_bar(min(x_star, h_bar.domain[1])) / alpha + r_bar * reject_rate / alpha)


@dataclass(frozen=True)
class MCResult:
    mean: float
    se: float
    replications: int
    costs: np.ndarray


def rbm_cost_mc(
    h_bar: PiecewiseLinear,
    r_bar: float,
    alpha: float,
    m_bar: float,
    sigma2_bar: float,
    x_star: float,
    x0: float = 0.0,
    replications: int = 10_000,
    dt: float = 1e-3,
    T: float | None = None,
    seed: int = 0,
    scheme: str = "bridge",
    chunk: int = 500,
    threads: int = 1,
) -> MCResult:
    """Monte Carlo mean and standard error of the workload control cost."""
    T = horizon_for(alpha) if T is None else T

    def run(start):
        n = min(chunk, replications - start)
        X, _, Z = simulate_rbm_batch(x0, m_bar, sigma2_bar, x_star, T, dt, seed, n, start, scheme)
        return bcp_cost(X, Z, h_bar, r_bar, alpha, dt)

    starts = list(range(0, replications, chunk))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    costs = np.concatenate([np.atleast_1d(p) for p in parts])
    return MCResult(
        mean=float(costs.mean()),
        se=float(costs.std(ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else float("nan"),
        replications=int(costs.size),
        costs=costs,
    )


def stationary_density(m_bar: float, sigma2_bar: float, x_star: float):
    """Density of two-sided reflected BM on [0, x_star]: proportional to exp(2 m w / s2)."""
    if m_bar == 0.0:
        return lambda w: np.full(np.shape(w), 1.0 / x_star)
    k = 2.0 * m_bar / sigma2_bar
    norm = math.expm1(k * x_star) / k
    return lambda w: np.exp(k * np.asarray(w)) / norm


def stationary_cdf(m_bar: float, sigma2_bar: float, x_star: float):
    if m_bar == 0.0:
        return lambda w: np.asarray(w) / x_star
    k = 2.0 * m_bar / sigma2_bar
    return lambda w: np.expm1(k * np.asarray(w)) / math.expm1(k * x_star)
