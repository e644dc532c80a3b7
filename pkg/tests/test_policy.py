import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from triangular.holding_cost import accumulation_order, gamma_curve, rejection_rule
from triangular.model import ClassSpec, SystemSpec, derive
from triangular.policy import (
    Decision,
    admit,
    allocate,
    build_policy,
    gamma_a,
    margin_vertex,
    margins,
    priority_sets,
    represent,
)

I_, II, III = 0, 1, 2


def cfg_for(spec, eps=None, x_star=None):
    d = derive(spec)
    o = accumulation_order(spec, d)
    return build_policy(spec, d, o, rejection_rule(spec, d), d.x_max if x_star is None else x_star, eps), d, o


@pytest.fixture(scope="module")
def t1cfg(t1):
    return build_policy(t1["spec"], t1["derived"], t1["order"], t1["rule"], t1["derived"].x_max, 5.0)


def curve_bound(d, o, eps):
    """Largest L1 gap between the a-curve and the b-curve: eps * max(1 + 2 th_{j-1} / (th_j - th_{j-1}))."""
    th = np.concatenate([[0.0], d.theta[list(o.p)]])
    return eps * max(1 + 2 * th[j - 1] / (th[j] - th[j - 1]) for j in range(1, len(th)))


def test_config_fields(t1cfg, t1):
    assert t1cfg.a == 120.0 and t1cfg.epsilon == 5.0
    assert t1cfg.a_star == pytest.approx(120 / 1.8)
    assert t1cfg.a_star < t1["derived"].x_max
    default = build_policy(t1["spec"], t1["derived"], t1["order"], t1["rule"], 30.0)
    assert default.epsilon == 5.0 and default.a_star == 30.0


def test_bad_epsilon(t1):
    for eps in (0.0, 125.0, -1.0):
        with pytest.raises(ValueError):
            build_policy(t1["spec"], t1["derived"], t1["order"], t1["rule"], 50.0, eps)


def test_represent_zero(t1cfg):
    r = represent(t1cfg, 0.0)
    assert (r.j, r.chi_l, r.chi_h) == (1, 0.0, 0.0)


def test_represent_w50(t1cfg):
    r = represent(t1cfg, 50.0)
    chi_h = (50 - 120 / 2.8) / (1 / 2.2 - 1 / 2.8)
    assert r.j == 2 and (r.low, r.high) == (III, II)
    assert r.chi_h == pytest.approx(chi_h, rel=1e-12)
    assert r.chi_l == pytest.approx(120 - chi_h, rel=1e-12)
    # exact solve is 73.33 / 46.67; the two-decimal reference 73.30 is within 0.05
    assert r.chi_h == pytest.approx(73.30, abs=0.05)
    assert r.chi_l / 2.8 + r.chi_h / 2.2 == pytest.approx(50.0, rel=1e-14)


def test_represent_out_of_range(t1cfg):
    with pytest.raises(ValueError):
        represent(t1cfg, t1cfg.top_a)
    with pytest.raises(ValueError):
        represent(t1cfg, -0.1)


def test_represent_reconstruction(t1cfg):
    th = t1cfg.theta
    rng = np.random.default_rng(0)
    for w in rng.uniform(0, t1cfg.top_a, 1000):
        r = represent(t1cfg, w)
        lo = th[r.low] * r.chi_l if r.low is not None else 0.0
        assert lo + th[r.high] * r.chi_h == pytest.approx(w, rel=1e-12, abs=1e-12)
        # the full-buffer branch sits on sum = a; only j = 1 is strictly inside
        if r.j == 1:
            assert r.chi_l == 0.0 and r.chi_h < t1cfg.a
        else:
            assert r.chi_l + r.chi_h == pytest.approx(t1cfg.a, rel=1e-14)


def test_margins_w50(t1cfg):
    m = margins(t1cfg, 50.0)
    assert m.xi_l >= m.xi_h > 2.5
    assert (m.eps_l, m.eps_h) == (2.5, 2.5)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0.0, 1.0))
def test_margins_three_cases(t1cfg, u):
    w = u * t1cfg.b * t1cfg.theta[t1cfg.order.p[-1]]
    m = margins(t1cfg, w)
    e = t1cfg.epsilon
    if m.xi_l < m.xi_h:
        assert m.eps_l == min(e / 2, m.xi_l)
    elif m.xi_h > e / 2:
        assert m.eps_l == e / 2
    else:
        assert m.eps_l == e - m.xi_h
    assert m.eps_l + m.eps_h == pytest.approx(e)
    assert m.eps_l >= 0 and m.eps_h >= -1e-12
    v = margin_vertex(t1cfg, w)
    assert np.all(v >= 0) and v.sum() <= t1cfg.b


def test_gamma_a_workload_identity(t1cfg):
    w = np.linspace(0, t1cfg.a_star, 10_000)
    g = t1cfg.gamma_a.evaluate(w)
    np.testing.assert_allclose(g @ t1cfg.theta, w, rtol=1e-12, atol=1e-12)
    assert np.all(np.count_nonzero(g > 0, axis=1) <= 2)
    assert np.all(g.sum(axis=1) <= t1cfg.a * (1 + 1e-12))


def test_gamma_a_top_band(t1cfg, t1):
    # between theta_J a and x_max the total grows from a to b along class p(J)
    w = np.linspace(t1cfg.top_a, t1["derived"].x_max, 200)
    g = t1cfg.gamma_a.evaluate(w)
    np.testing.assert_allclose(g @ t1cfg.theta, w, rtol=1e-10)
    np.testing.assert_allclose(g[:, I_], g.sum(axis=1))
    assert g[0, I_] == pytest.approx(120.0) and g[-1, I_] == pytest.approx(125.0)


def test_gamma_a_vanishing_margin(t1):
    spec, d, o = t1["spec"], t1["derived"], t1["order"]
    cfg = build_policy(spec, d, o, t1["rule"], d.x_max, 1e-9)
    w = np.linspace(0, d.x_max, 1001)
    diff = np.abs(cfg.gamma_a.evaluate(w) - gamma_curve(spec, d, o).evaluate(w)).sum(axis=1)
    # the gap is linear in eps with the curve constant (10 here), not 1
    assert diff.max() <= curve_bound(d, o, 1e-9) + 1e-12 * spec.b
    assert curve_bound(d, o, 1.0) == pytest.approx(10.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.01, 0.2))
def test_gamma_a_close_to_gamma(seed, frac):
    spec = random_instance(np.random.default_rng(seed))
    cfg, d, o = cfg_for(spec, frac * spec.b)
    w = np.linspace(0, d.x_max, 2001)
    w = np.concatenate([w, cfg.theta[list(o.p)] * cfg.a, cfg.theta[list(o.p)] * cfg.b])
    w = np.minimum(w, d.x_max)
    gap = np.abs(cfg.gamma_a.evaluate(w) - gamma_curve(spec, d, o).evaluate(w)).sum(axis=1)
    assert gap.max() <= curve_bound(d, o, cfg.epsilon) * (1 + 1e-9) + 1e-9


@pytest.mark.xfail(strict=True, reason="3*eps bound does not hold for the literal a-curve; see ledger")
def test_gamma_a_within_three_eps(t1cfg, t1):
    spec, d, o = t1["spec"], t1["derived"], t1["order"]
    w = np.linspace(0, d.x_max, 20001)
    gap = np.abs(t1cfg.gamma_a.evaluate(w) - gamma_curve(spec, d, o).evaluate(w)).sum(axis=1)
    assert gap.max() <= 3 * t1cfg.epsilon


def test_priority_empty(t1cfg):
    L, H, Lp, Hp = priority_sets(t1cfg, np.zeros(3), 0.0)
    assert Lp == () and Hp == ()
    assert not allocate(t1cfg, np.zeros(3), 0.0).any()


def test_priority_below_targets(t1cfg):
    g = gamma_a(t1cfg, 50.0)
    x = g - np.array([0.0, 0.5, 0.5])
    L, H, Lp, Hp = priority_sets(t1cfg, x, 50.0)
    assert set(L) == {II, III} and H == (I_,)


def test_priority_tie_goes_high(t1cfg):
    g = gamma_a(t1cfg, 50.0)
    L, H, _, _ = priority_sets(t1cfg, g, 50.0)
    assert L == ()


def dominated():
    mus = [1.0, 1.5, 2.5, 4.0]
    hs = [900.0, 500.0, 300.0, 5000.0]
    cs = tuple(ClassSpec(l, 0.25 * m, m, h, 1.0 + k) for k, (l, m, h) in enumerate(zip("abcd", mus, hs)))
    return SystemSpec(cs, b=50.0, alpha=1.0)


def test_dominated_class_always_high():
    cfg, d, o = cfg_for(dominated())
    assert 3 in o.D
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.dirichlet(np.ones(5))[:4] * 50.0
        x[3] = max(x[3], 0.1)
        w = float(d.theta @ x)
        _, H, _, Hp = priority_sets(cfg, x, w)
        assert 3 in Hp


def test_allocate_table1_pair(t1cfg):
    x = np.array([1.0, 1.0, 0.0])
    B = allocate(t1cfg, x, float(t1cfg.theta @ x))
    rho = t1cfg.rho
    np.testing.assert_allclose(B, [rho[0] / (rho[0] + rho[1]), rho[1] / (rho[0] + rho[1]), 0.0], rtol=1e-14)
    np.testing.assert_allclose(B, [0.5011, 0.4989, 0.0], atol=1e-4)


@settings(max_examples=200, deadline=None)
@given(p=st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_allocation_invariants(t1cfg, p):
    x = np.array(p[:3]) / max(sum(p), 1e-9) * 125.0 * p[3]
    x[x < 1e-6] = 0.0
    w = float(t1cfg.theta @ x)
    B = allocate(t1cfg, x, w)
    assert np.all(B >= 0) and B.sum() <= 1 + 1e-12
    assert np.all(B[x == 0] == 0)
    if x.any():
        assert B.sum() == pytest.approx(1.0, abs=1e-12)
    _, _, _, Hp = priority_sets(t1cfg, x, w)
    if Hp:
        assert all(B[i] > t1cfg.rho[i] for i in Hp)


def test_allocate_depends_only_on_thresholds(t1cfg):
    w = 50.0
    x = gamma_a(t1cfg, w) + np.array([3.0, -1.0, 2.0])
    base = allocate(t1cfg, x, w)
    for bump in (0.5, 1.7, 10.0):
        y = x.copy()
        y[I_] += bump  # class I already above any threshold
        np.testing.assert_array_equal(allocate(t1cfg, y, w), base)


def test_admit(t1cfg):
    n = 400
    assert admit(t1cfg, I_, np.zeros(3), 0.0, n) is Decision.ACCEPT
    assert admit(t1cfg, II, np.zeros(3), t1cfg.a_star, n) is Decision.REJECT_POLICY
    full = np.array([125.0, 0.0, 0.0])
    assert admit(t1cfg, III, full, 10.0, n) is Decision.REJECT_FORCED
    assert admit(t1cfg, II, full, 10.0, n) is Decision.REJECT_FORCED
    one_short = np.array([125.0 - 1 / 20, 0.0, 0.0])
    assert admit(t1cfg, I_, one_short, 10.0, n) is Decision.ACCEPT
    assert Decision.REJECT_POLICY.value == "reject_policy"
