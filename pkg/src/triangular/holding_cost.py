"""Workload holding cost h_bar, the minimizing curve gamma, and the rejection index.

For a workload ``w`` the cheapest buffer content is the solution of the LP

    minimize h.x  subject to  theta.x = w,  sum(x) <= b,  x >= 0,

which is always attained with at most two classes present.  As ``w`` grows
from 0 to ``x_max`` the classes enter the buffer in a fixed *order of
accumulation*; the resulting h_bar is piecewise linear and convex with one
breakpoint per accumulated class, at ``b * theta[p(j)]``.
"""
from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .model import DerivedParams, SystemSpec

# relative drift above x_max that is silently clamped
CLAMP_RTOL = 1e-9


@dataclass(frozen=True)
class RejectionRule:
    i_star: int
    r_bar: float


@dataclass(frozen=True)
class AccumulationOrder:
    """Classes in the order they fill the buffer.

    ``p`` holds 0-based class indices; ``ratios[j]`` is the incremental cost
    per unit workload, (h[p(j)] - h[p(j-1)]) / (theta[p(j)] - theta[p(j-1)]),
    with the empty buffer (h = theta = 0) standing in for p(0).  ``table``
    keeps every candidate ratio examined at each step, keyed by class.
    """

    p: tuple[int, ...]
    D: frozenset[int]
    w_hat: np.ndarray  # length J + 1, w_hat[0] = 0
    ratios: np.ndarray  # length J
    table: tuple[dict[int, float], ...]

    @property
    def J(self) -> int:
        return len(self.p)

    @property
    def E(self) -> frozenset[int]:
        return frozenset(self.p)


@dataclass(frozen=True)
class PiecewiseLinear:
    """Linear interpolation through (breakpoints[k], values[k]).

    ``values`` is 1-d for a scalar function or (K, I) for a vector-valued one.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    def _locate(self, w: float) -> tuple[int, float]:
        bp = self.breakpoints
        lo, hi = bp[0], bp[-1]
        if w < lo or w > hi:
            if w > hi and w - hi <= CLAMP_RTOL * max(abs(hi), 1.0):
                w = hi
            elif w < lo and lo - w <= CLAMP_RTOL * max(abs(hi), 1.0):
                w = lo
            else:
                raise ValueError(f"w = {w!r} outside [{lo}, {hi}]")
        k = min(bisect.bisect_right(bp, w) - 1, len(bp) - 2)
        k = max(k, 0)
        t = (w - bp[k]) / (bp[k + 1] - bp[k])
        return k, t

    def __call__(self, w: float):
        k, t = self._locate(float(w))
        v0, v1 = self.values[k], self.values[k + 1]
        if self.values.ndim == 1:
            return float(v0 + t * (v1 - v0))
        return (1.0 - t) * v0 + t * v1

    def evaluate(self, w: np.ndarray) -> np.ndarray:
        """Vectorized evaluation of a scalar piecewise-linear function."""
        w = np.asarray(w, dtype=float)
        lo, hi = self.domain
        slack = CLAMP_RTOL * max(abs(hi), 1.0)
        if np.any(w < lo - slack) or np.any(w > hi + slack):
            raise ValueError("workload outside domain")
        w = np.clip(w, lo, hi)
        if self.values.ndim == 1:
            return np.interp(w, self.breakpoints, self.values)
        return np.stack([np.interp(w, self.breakpoints, col) for col in self.values.T], axis=-1)

    def slopes(self) -> np.ndarray:
        return np.diff(self.values, axis=0) / np.diff(self.breakpoints).reshape(
            (-1,) + (1,) * (self.values.ndim - 1)
        )


def rejection_rule(spec: SystemSpec, derived: DerivedParams) -> RejectionRule:
    rmu = spec.vec("r") * spec.vec("mu")
    i_star = int(np.argmin(rmu))  # first minimum: lowest index wins ties
    return RejectionRule(i_star=i_star, r_bar=float(rmu[i_star]))


def accumulation_order(spec: SystemSpec, derived: DerivedParams) -> AccumulationOrder:
    h, theta = spec.vec("h"), derived.theta
    I = spec.I
    p: list[int] = []
    ratios: list[float] = []
    table: list[dict[int, float]] = []
    h_prev, th_prev = 0.0, 0.0
    while True:
        cand = {
            i: (h[i] - h_prev) / (theta[i] - th_prev)
            for i in range(I)
            if h[i] > h_prev and theta[i] > th_prev
        }
        if not cand:
            break
        best = min(cand, key=lambda i: (cand[i], i))
        table.append(cand)
        p.append(best)
        ratios.append(cand[best])
        h_prev, th_prev = h[best], theta[best]
    w_hat = np.concatenate([[0.0], spec.b * theta[p]])
    return AccumulationOrder(
        p=tuple(p),
        D=frozenset(range(I)) - frozenset(p),
        w_hat=w_hat,
        ratios=np.array(ratios),
        table=tuple(table),
    )


def h_bar(spec: SystemSpec, derived: DerivedParams, order: AccumulationOrder) -> PiecewiseLinear:
    h = spec.vec("h")
    values = np.concatenate([[0.0], spec.b * h[list(order.p)]])
    return PiecewiseLinear(order.w_hat.copy(), values)


def gamma_curve(spec: SystemSpec, derived: DerivedParams, order: AccumulationOrder) -> PiecewiseLinear:
    """Minimizing curve as a vertex table: 0, then b * e(p(1)), ..., b * e(p(J))."""
    verts = np.zeros((order.J + 1, spec.I))
    for j, i in enumerate(order.p, start=1):
        verts[j, i] = spec.b
    return PiecewiseLinear(order.w_hat.copy(), verts)


def gamma(spec: SystemSpec, derived: DerivedParams, order: AccumulationOrder, w: float) -> np.ndarray:
    """Queue-length vector of least holding cost among those with workload ``w``."""
    return gamma_curve(spec, derived, order)(w)


def xi_pair(order: AccumulationOrder, theta: np.ndarray, size: float, w: float) -> tuple[int, float, float]:
    """Interval index j and the (low, high) class amounts of the curve for buffer ``size``.

    For j = 1 the low slot is the empty buffer and carries 0.  Valid for
    0 <= w <= size * theta[p(J)].
    """
    p = order.p
    if w < size * theta[p[0]]:
        return 1, 0.0, w / theta[p[0]]
    for j in range(2, order.J + 1):
        if w < size * theta[p[j - 1]]:
            th_l, th_h = theta[p[j - 2]], theta[p[j - 1]]
            hi = (w - size * th_l) / (th_h - th_l)
            return j, size - hi, hi
    if w <= size * theta[p[-1]] * (1.0 + CLAMP_RTOL):
        return order.J, 0.0, size
    raise ValueError(f"w = {w!r} beyond {size * theta[p[-1]]}")


def lp_oracle(spec: SystemSpec, derived: DerivedParams, w: float) -> tuple[float, np.ndarray]:
    """Minimize h.x over {theta.x = w, sum x <= b, x >= 0} by listing basic solutions.

    With two equality rows (slack added to the capacity row) every basis has
    two variables: a class with the slack, or two classes at full buffer.
    """
    h, theta, b = spec.vec("h"), derived.theta, spec.b
    I = spec.I
    tol = 1e-12 * max(1.0, b)
    if w < -tol or w > derived.x_max * (1.0 + CLAMP_RTOL):
        raise ValueError(f"infeasible workload {w!r}")
    w = min(max(w, 0.0), derived.x_max)
    best_val, best_x = math.inf, None
    if w == 0.0:
        return 0.0, np.zeros(I)
    for i in range(I):
        xi = w / theta[i]
        if xi <= b + tol:
            x = np.zeros(I)
            x[i] = xi
            v = float(h @ x)
            if v < best_val:
                best_val, best_x = v, x
    for i, k in itertools.combinations(range(I), 2):
        det = theta[k] - theta[i]
        if det == 0:
            continue
        xk = (w - b * theta[i]) / det
        xi = b - xk
        if xi >= -tol and xk >= -tol:
            x = np.zeros(I)
            x[i], x[k] = max(xi, 0.0), max(xk, 0.0)
            v = float(h @ x)
            if v < best_val:
                best_val, best_x = v, x
    if best_x is None:
        raise ValueError(f"no feasible vertex for w = {w!r}")
    return best_val, best_x
