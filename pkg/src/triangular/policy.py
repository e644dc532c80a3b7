"""Admission and scheduling policy that keeps the queue vector near the minimizing curve.

The buffer is shrunk by a margin eps to a = b - eps.  For a workload w the
target queue vector gamma_a(w) is the cheapest configuration of workload w
in the shrunken buffer: at most two classes, adjacent in the order of
accumulation, holding chi_l and chi_h tasks.  Classes below their target are
left alone (low priority), everything else is served in proportion to its
traffic intensity.  Class i* is turned away once w reaches a*.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .holding_cost import AccumulationOrder, PiecewiseLinear, RejectionRule, xi_pair
from .model import DerivedParams, SystemSpec


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    REJECT_POLICY = "reject_policy"
    REJECT_FORCED = "reject_forced"


@dataclass(frozen=True)
class Representation:
    j: int
    chi_l: float
    chi_h: float
    low: int | None  # class index at position j-1, None for j = 1
    high: int


@dataclass(frozen=True)
class Margins:
    eps_l: float
    eps_h: float
    xi_l: float
    xi_h: float
    j: int


@dataclass(frozen=True)
class PolicyConfig:
    epsilon: float
    a: float
    b: float
    a_star: float
    x_star: float
    theta: np.ndarray
    rho: np.ndarray
    order: AccumulationOrder
    rejection: RejectionRule
    gamma_a: PiecewiseLinear

    @property
    def I(self) -> int:  # noqa: E743
        return self.theta.size

    @property
    def top_a(self) -> float:
        """Largest workload representable in the shrunken buffer."""
        return float(self.theta[self.order.p[-1]] * self.a)


def build_policy(
    spec: SystemSpec,
    derived: DerivedParams,
    order: AccumulationOrder,
    rejection: RejectionRule,
    x_star: float,
    epsilon: float | None = None,
) -> PolicyConfig:
    b = spec.b
    eps = b / 25.0 if epsilon is None else float(epsilon)
    if not 0.0 < eps < b:
        raise ValueError(f"epsilon must lie in (0, b), got {eps}")
    a = b - eps
    theta = derived.theta
    top = theta[order.p[-1]]
    a_star = min(float(x_star), float(top * a))
    bps = [0.0] + [float(theta[i] * a) for i in order.p] + [float(top * b)]
    verts = np.zeros((len(bps), spec.I))
    for k, i in enumerate(order.p, start=1):
        verts[k, i] = a
    verts[-1, order.p[-1]] = b
    return PolicyConfig(
        epsilon=eps,
        a=a,
        b=b,
        a_star=a_star,
        x_star=float(x_star),
        theta=theta.copy(),
        rho=derived.rho.copy(),
        order=order,
        rejection=rejection,
        gamma_a=PiecewiseLinear(np.array(bps), verts),
    )


def represent(cfg: PolicyConfig, w: float) -> Representation:
    """The unique (j, chi_l, chi_h) with w = theta[p(j-1)]*chi_l + theta[p(j)]*chi_h and chi_l + chi_h < a."""
    if not 0.0 <= w < cfg.top_a:
        raise ValueError(f"w = {w!r} outside [0, {cfg.top_a})")
    return _represent(cfg, w)


def _represent(cfg: PolicyConfig, w: float) -> Representation:
    p = cfg.order.p
    if w >= cfg.top_a:
        return Representation(cfg.order.J, 0.0, cfg.a, p[-2] if cfg.order.J > 1 else None, p[-1])
    j, lo, hi = xi_pair(cfg.order, cfg.theta, cfg.a, max(w, 0.0))
    return Representation(j, lo, hi, p[j - 2] if j > 1 else None, p[j - 1])


def margins(cfg: PolicyConfig, w: float) -> Margins:
    """Workload-dependent split of eps between the two active classes of the b-curve at w."""
    j, xi_l, xi_h = xi_pair(cfg.order, cfg.theta, cfg.b, w)
    eps = cfg.epsilon
    if xi_l < xi_h:
        eps_l = min(eps / 2.0, xi_l)
    elif xi_h > eps / 2.0:
        eps_l = eps / 2.0
    else:
        eps_l = eps - xi_h
    return Margins(eps_l=eps_l, eps_h=eps - eps_l, xi_l=xi_l, xi_h=xi_h, j=j)


def margin_vertex(cfg: PolicyConfig, w: float) -> np.ndarray:
    """b-curve point at w pulled back by its margins (chi = xi - eps), clipped at 0."""
    mg = margins(cfg, w)
    p = cfg.order.p
    x = np.zeros(cfg.I)
    x[p[mg.j - 1]] = max(mg.xi_h - mg.eps_h, 0.0)
    if mg.j > 1:
        x[p[mg.j - 2]] = max(mg.xi_l - mg.eps_l, 0.0)
    return x


def gamma_a(cfg: PolicyConfig, w: float) -> np.ndarray:
    """Target queue vector for workload w.

    Below theta[p(J)]*a this is chi_l e(p(j-1)) + chi_h e(p(j)).  Between
    theta[p(J)]*a and x_max the total is interpolated linearly from a up to b
    along class p(J), which keeps theta . gamma_a(w) = w on the whole domain.
    """
    return cfg.gamma_a(w)


def priority_sets(cfg: PolicyConfig, x: np.ndarray, w: float):
    """(L, H, L+, H+) as sorted tuples of class indices."""
    rep = _represent(cfg, w)
    low = set()
    if x[rep.high] < rep.chi_h:
        low.add(rep.high)
    if rep.low is not None and x[rep.low] < rep.chi_l:
        low.add(rep.low)
    L = tuple(sorted(low))
    H = tuple(i for i in range(cfg.I) if i not in low)
    Lp = tuple(i for i in L if x[i] > 0)
    Hp = tuple(i for i in H if x[i] > 0)
    return L, H, Lp, Hp


def allocate(cfg: PolicyConfig, x: np.ndarray, w: float) -> np.ndarray:
    """Effort fractions: H+ shares the server in proportion to rho; L+ only when H+ is empty."""
    _, _, Lp, Hp = priority_sets(cfg, x, w)
    served = Hp if Hp else Lp
    B = np.zeros(cfg.I)
    if served:
        idx = list(served)
        B[idx] = cfg.rho[idx] / cfg.rho[idx].sum()
    return B


def admit(cfg: PolicyConfig, i: int, x: np.ndarray, w: float, n: float) -> Decision:
    """Admission decision for a class-i arrival seen at scaled state (x, w) in the n-th system."""
    if i == cfg.rejection.i_star and w >= cfg.a_star:
        return Decision.REJECT_POLICY
    if float(np.sum(x)) * math.sqrt(n) + 1.0 > cfg.b * math.sqrt(n) * (1.0 + 1e-12):
        return Decision.REJECT_FORCED
    return Decision.ACCEPT
