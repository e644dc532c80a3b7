"""Harrison-Taksar free-boundary problem for the one-dimensional workload.

Finds f on [0, x_max] with

    min( 0.5*s2*f'' + m*f' - alpha*f + h_bar,  f',  r_bar - f' ) = 0,
    f'(0) = 0,  f'(x_max) = r_bar,

and the free boundary x* beyond which f' = r_bar (reject class i*).

The discrete problem uses central differences for the diffusion operator,
ghost nodes for the two Neumann conditions, a forward difference for the
f' >= 0 branch and a backward difference for the f' <= r_bar branch.  Each
branch row is an M-matrix row, so Howard's policy iteration converges in a
handful of tridiagonal solves.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .holding_cost import PiecewiseLinear
from .model import DerivedParams

log = logging.getLogger(__name__)

PDE, REFLECT, REJECT = 0, 1, 2
MAX_POLICY_ITER = 200


class HJBNonConvergence(RuntimeError):
    def __init__(self, msg: str, residual: float, iterations: int):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class HJBSolution:
    grid: np.ndarray
    V: np.ndarray
    Vp: np.ndarray
    x_star: float
    r_bar: float
    residual: float
    N: int
    tol: float
    policy: np.ndarray = field(repr=False)
    iterations: int = 0
    sigma2_bar: float = 0.0
    m_bar: float = 0.0
    alpha: float = 0.0
    warnings: tuple[str, ...] = ()

    @property
    def dw(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def x_max(self) -> float:
        return float(self.grid[-1])


def _check_domain(sol: HJBSolution, w: float) -> None:
    slack = 1e-9 * max(sol.x_max, 1.0)
    if w < -slack or w > sol.x_max + slack:
        raise ValueError(f"w = {w!r} outside [0, {sol.x_max}]")


def value_at(sol: HJBSolution, w: float) -> float:
    _check_domain(sol, w)
    return float(np.interp(w, sol.grid, sol.V))


def gradient_at(sol: HJBSolution, w: float) -> float:
    _check_domain(sol, w)
    return float(np.clip(np.interp(w, sol.grid, sol.Vp), 0.0, sol.r_bar))


def _branch_values(f, hb, A, B, alpha, dw, r_bar):
    """Branch residuals in max-form: G_PDE, G_REFLECT, G_REJECT (nan where undefined)."""
    n = f.size
    g = np.full((3, n), np.nan)
    d2 = np.empty(n)
    d1 = np.empty(n)
    d2[1:-1] = f[2:] - 2 * f[1:-1] + f[:-2]
    d1[1:-1] = f[2:] - f[:-2]
    d2[0] = 2 * (f[1] - f[0])
    d1[0] = 0.0
    d2[-1] = 2 * (f[-2] - f[-1]) + 2 * dw * r_bar
    d1[-1] = 2 * dw * r_bar
    g[PDE] = alpha * f - A * d2 - B * d1 - hb
    g[REFLECT, 1:-1] = (f[1:-1] - f[2:]) / dw
    g[REJECT, 1:] = (f[1:] - f[:-1]) / dw - r_bar
    return g


def _assemble(policy, hb, A, B, alpha, dw, r_bar):
    n = policy.size
    ab = np.zeros((3, n))  # rows: upper, diag, lower
    rhs = np.zeros(n)
    upper = np.zeros(n)
    diag = np.zeros(n)
    lower = np.zeros(n)

    pde = policy == PDE
    diag[pde] = alpha + 2 * A
    lower[pde] = -(A - B)
    upper[pde] = -(A + B)
    rhs[pde] = hb[pde]
    if pde[0]:
        upper[0], lower[0] = -2 * A, 0.0
    if pde[-1]:
        lower[-1], upper[-1] = -2 * A, 0.0
        rhs[-1] = hb[-1] + 2 * A * dw * r_bar + 2 * B * dw * r_bar

    refl = policy == REFLECT
    diag[refl], upper[refl] = 1.0 / dw, -1.0 / dw

    rej = policy == REJECT
    diag[rej], lower[rej] = 1.0 / dw, -1.0 / dw
    rhs[rej] = r_bar

    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return ab, rhs


def complementarity_residual(f, hb, A, B, alpha, dw, r_bar) -> float:
    g = _branch_values(f, hb, A, B, alpha, dw, r_bar)
    return float(np.max(np.abs(np.nanmax(g, axis=0))))


def solve_bellman(
    derived: DerivedParams,
    h_bar: PiecewiseLinear,
    r_bar: float,
    alpha: float,
    N: int = 4096,
    tol: float = 1e-8,
    *,
    sigma2_bar: float | None = None,
    m_bar: float | None = None,
    x_max: float | None = None,
) -> HJBSolution:
    """Solve the free-boundary problem on a uniform grid of N + 1 nodes.

    ``sigma2_bar``, ``m_bar`` and ``x_max`` default to the values in
    ``derived`` and may be overridden to reproduce published coefficients.
    ``tol`` is relative to ``r_bar * x_max``.
    """
    s2 = derived.sigma2_bar if sigma2_bar is None else float(sigma2_bar)
    m = derived.m_bar if m_bar is None else float(m_bar)
    xm = derived.x_max if x_max is None else float(x_max)
    if not s2 > 0:
        raise ValueError("sigma2_bar must be positive")
    if N < 100:
        raise ValueError("N must be at least 100")
    grid = np.linspace(0.0, xm, N + 1)
    dw = grid[1] - grid[0]
    hb = h_bar.evaluate(np.minimum(grid, h_bar.domain[1]))
    A = 0.5 * s2 / dw**2
    B = m / (2 * dw)
    if abs(B) > A:
        log.warning("drift dominates diffusion at this grid; central scheme not monotone (N=%d)", N)
    scale = r_bar * xm
    abs_tol = tol * scale

    policy = np.full(N + 1, PDE)
    f = np.zeros(N + 1)
    for it in range(1, MAX_POLICY_ITER + 1):
        ab, rhs = _assemble(policy, hb, A, B, alpha, dw, r_bar)
        f = solve_banded((1, 1), ab, rhs)
        g = _branch_values(f, hb, A, B, alpha, dw, r_bar)
        g_cur = g[policy, np.arange(N + 1)]
        best = np.nanargmax(np.where(np.isnan(g), -np.inf, g), axis=0)
        g_best = g[best, np.arange(N + 1)]
        # switch only on strict improvement to avoid cycling between tied branches
        improve = g_best > g_cur + abs_tol * 1e-3
        if not improve.any():
            break
        policy = np.where(improve, best, policy)
    else:
        res = complementarity_residual(f, hb, A, B, alpha, dw, r_bar)
        raise HJBNonConvergence(
            f"policy iteration did not settle in {MAX_POLICY_ITER} iterations", res, MAX_POLICY_ITER
        )

    residual = complementarity_residual(f, hb, A, B, alpha, dw, r_bar)
    Vp = np.empty(N + 1)
    Vp[1:-1] = (f[2:] - f[:-2]) / (2 * dw)
    Vp[0] = 0.0
    Vp[-1] = r_bar

    # trailing run of nodes where the backward slope equals r_bar
    back = np.full(N + 1, np.nan)
    back[1:] = (f[1:] - f[:-1]) / dw
    at_cap = np.abs(back - r_bar) <= tol * r_bar
    at_cap[0] = False
    k = N + 1
    while k - 1 >= 1 and at_cap[k - 1]:
        k -= 1
    x_star = float(grid[k - 1]) if k <= N else xm

    warnings = []
    if x_star >= xm - dw:
        warnings.append("free boundary touches x_max")
    if x_star <= dw:
        warnings.append("free boundary touches 0")
    if residual > abs_tol:
        warnings.append(f"complementarity residual {residual:.3g} above tol {abs_tol:.3g}")
    for msg in warnings:
        log.warning(msg)
    return HJBSolution(
        grid=grid,
        V=f,
        Vp=Vp,
        x_star=x_star,
        r_bar=float(r_bar),
        residual=residual,
        N=N,
        tol=tol,
        policy=policy,
        iterations=it,
        sigma2_bar=s2,
        m_bar=m,
        alpha=float(alpha),
        warnings=tuple(warnings),
    )


def value_iteration_oracle(
    h_bar: PiecewiseLinear,
    r_bar: float,
    alpha: float,
    sigma2_bar: float,
    m_bar: float,
    x_max: float,
    N: int = 1024,
    tol: float = 1e-10,
    max_iter: int = 500_000,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Markov-chain approximation solved by plain value iteration.

    Independent of :func:`solve_bellman`: upwind transition probabilities,
    explicit time step dt = dw**2 / (s2 + dw*|m|), and the two singular
    controls (push up for free, push down at cost r_bar per unit) as
    zero-time moves.  Returns (grid, V, x_star).
    """
    grid = np.linspace(0.0, x_max, N + 1)
    dw = grid[1] - grid[0]
    hb = h_bar.evaluate(np.minimum(grid, h_bar.domain[1]))
    q = sigma2_bar + dw * abs(m_bar)
    p_up = (0.5 * sigma2_bar + dw * max(m_bar, 0.0)) / q
    p_dn = (0.5 * sigma2_bar + dw * max(-m_bar, 0.0)) / q
    dt = dw**2 / q
    disc = np.exp(-alpha * dt)
    V = np.zeros(N + 1)
    scale = max(r_bar * x_max, 1.0)
    for _ in range(max_iter):
        up = np.empty_like(V)
        dn = np.empty_like(V)
        up[:-1] = V[1:]
        up[-1] = V[-1] + r_bar * dw  # forced push back from the top
        dn[1:] = V[:-1]
        dn[0] = V[1]  # reflection at 0
        cont = disc * (p_up * up + p_dn * dn) + hb * dt
        rej = np.full_like(V, np.inf)
        rej[1:] = V[:-1] + r_bar * dw
        idle = np.full_like(V, np.inf)
        idle[:-1] = V[1:]
        V_new = np.minimum(np.minimum(cont, rej), idle)
        if np.max(np.abs(V_new - V)) <= tol * scale:
            V = V_new
            break
        V = V_new
    slope = np.diff(V) / dw
    at_cap = np.abs(slope - r_bar) <= 1e-6 * r_bar
    k = N
    while k - 1 >= 0 and at_cap[k - 1]:
        k -= 1
    x_star = float(grid[k]) if k < N else float(x_max)
    return grid, V, x_star
