import numpy as np
import pytest

from triangular.holding_cost import accumulation_order, h_bar, rejection_rule
from triangular.model import ClassSpec, SystemSpec, derive, table1_spec

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def random_instance(rng: np.random.Generator, I: int | None = None, b: float | None = None) -> SystemSpec:
    """Critically loaded instance with distinct service rates."""
    I = int(rng.integers(1, 7)) if I is None else I
    mu = np.sort(rng.uniform(0.5, 5.0, I))
    while I > 1 and np.min(np.diff(mu)) < 1e-3:
        mu = np.sort(rng.uniform(0.5, 5.0, I))
    rng.shuffle(mu)
    rho = rng.dirichlet(np.ones(I))
    classes = tuple(
        ClassSpec(
            label=f"c{i}",
            lam=float(rho[i] * mu[i]),
            mu=float(mu[i]),
            h=float(rng.uniform(1.0, 2000.0)),
            r=float(rng.uniform(1.0, 2000.0)),
        )
        for i in range(I)
    )
    return SystemSpec(classes=classes, b=float(rng.uniform(10.0, 200.0)) if b is None else b, alpha=1.0)


@pytest.fixture(scope="session")
def t1():
    spec = table1_spec()
    d = derive(spec)
    order = accumulation_order(spec, d)
    return {
        "spec": spec,
        "derived": d,
        "order": order,
        "rule": rejection_rule(spec, d),
        "hbar": h_bar(spec, d, order),
    }
