"""Problem instance for the multiclass shared-buffer queue and its heavy-traffic parameters."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

FAMILIES = ("exponential", "deterministic", "uniform", "lognormal")


class InvalidSpec(ValueError):
    """Raised when an instance fails validation and cannot be used."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class ClassSpec:
    label: str
    lam: float
    mu: float
    h: float
    r: float
    lambda_hat: float = 0.0
    mu_hat: float = 0.0
    ia_scv: float = 1.0
    st_scv: float = 1.0
    ia_family: str = "exponential"
    st_family: str = "exponential"

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "lambda": self.lam,
            "mu": self.mu,
            "lambda_hat": self.lambda_hat,
            "mu_hat": self.mu_hat,
            "h": self.h,
            "r": self.r,
            "ia_scv": self.ia_scv,
            "st_scv": self.st_scv,
            "ia_family": self.ia_family,
            "st_family": self.st_family,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ClassSpec:
        return cls(
            label=str(d["label"]),
            lam=float(d["lambda"]),
            mu=float(d["mu"]),
            h=float(d["h"]),
            r=float(d["r"]),
            lambda_hat=float(d.get("lambda_hat", 0.0)),
            mu_hat=float(d.get("mu_hat", 0.0)),
            ia_scv=float(d.get("ia_scv", 1.0)),
            st_scv=float(d.get("st_scv", 1.0)),
            ia_family=str(d.get("ia_family", "exponential")),
            st_family=str(d.get("st_family", "exponential")),
        )


@dataclass(frozen=True)
class SystemSpec:
    classes: tuple[ClassSpec, ...]
    b: float
    alpha: float
    criticality_tol: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.classes)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]

    def vec(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.classes], dtype=float)

    def with_classes(self, **overrides) -> SystemSpec:
        """Copy with the named per-class attributes overridden (scalar or per-class sequence)."""
        classes = []
        for k, c in enumerate(self.classes):
            kw = {}
            for name, val in overrides.items():
                kw[name] = val[k] if isinstance(val, (list, tuple, np.ndarray)) else val
            classes.append(replace(c, **kw))
        return replace(self, classes=tuple(classes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "b": self.b,
            "alpha": self.alpha,
            "criticality_tol": self.criticality_tol,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SystemSpec:
        return cls(
            classes=tuple(ClassSpec.from_dict(c) for c in d.get("classes", [])),
            b=float(d["b"]),
            alpha=float(d["alpha"]),
            criticality_tol=float(d.get("criticality_tol", 0.01)),
        )


@dataclass(frozen=True)
class DerivedParams:
    theta: np.ndarray
    rho: np.ndarray
    m: np.ndarray
    sigma2: np.ndarray
    m_bar: float
    sigma2_bar: float
    x_max: float
    b: float = field(repr=False, default=0.0)


def load_spec(path: str | Path) -> SystemSpec:
    """Read an instance file. ``json.JSONDecodeError`` propagates with its line/column."""
    with open(path) as fh:
        return SystemSpec.from_dict(json.load(fh))


def dump_spec(spec: SystemSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")


def validate(spec: SystemSpec) -> list[str]:
    """Return the list of problems with ``spec``; an empty list means it is usable."""
    out: list[str] = []
    if spec.I < 1:
        out.append("no classes (I must be >= 1)")
    if not spec.b > 0:
        out.append(f"b must be positive, got {spec.b}")
    if not spec.alpha > 0:
        out.append(f"alpha must be positive, got {spec.alpha}")
    if not spec.criticality_tol >= 0:
        out.append("criticality_tol must be nonnegative")
    for c in spec.classes:
        for name in ("lam", "mu", "h", "r"):
            v = getattr(c, name)
            if not v > 0:
                out.append(f"class {c.label}: {name if name != 'lam' else 'lambda'} must be positive, got {v}")
        for fam_name, scv_name in (("ia_family", "ia_scv"), ("st_family", "st_scv")):
            fam, scv = getattr(c, fam_name), getattr(c, scv_name)
            if not scv >= 0:
                out.append(f"class {c.label}: {scv_name} must be nonnegative")
            if fam not in FAMILIES:
                out.append(f"class {c.label}: unknown {fam_name} {fam!r}")
            elif fam == "deterministic" and scv != 0:
                out.append(f"class {c.label}: deterministic {fam_name} requires {scv_name} = 0")
            elif fam == "exponential" and scv != 1:
                out.append(f"class {c.label}: exponential {fam_name} requires {scv_name} = 1")
            elif fam == "uniform" and scv > 1.0 / 3.0:
                out.append(f"class {c.label}: uniform {fam_name} supports {scv_name} <= 1/3")
    if out:
        return out
    rho_sum = float(np.sum(spec.vec("lam") / spec.vec("mu")))
    if abs(rho_sum - 1.0) > spec.criticality_tol:
        out.append(f"critical load violated: sum(rho) = {rho_sum:.6g}, tol = {spec.criticality_tol}")
    theta = 1.0 / spec.vec("mu")
    for i in range(spec.I):
        for k in range(i + 1, spec.I):
            if theta[i] == theta[k]:
                out.append(
                    f"theta not distinct: classes {spec.classes[i].label} and {spec.classes[k].label}"
                )
    return out


def derive(spec: SystemSpec) -> DerivedParams:
    problems = validate(spec)
    if problems:
        raise InvalidSpec(problems)
    lam, mu = spec.vec("lam"), spec.vec("mu")
    theta = 1.0 / mu
    rho = lam / mu
    m = spec.vec("lambda_hat") - rho * spec.vec("mu_hat")
    sigma2 = lam * (spec.vec("ia_scv") + spec.vec("st_scv"))
    return DerivedParams(
        theta=theta,
        rho=rho,
        m=m,
        sigma2=sigma2,
        m_bar=float(theta @ m),
        sigma2_bar=float(np.sum(theta**2 * sigma2)),
        x_max=float(spec.b * theta.max()),
        b=spec.b,
    )


def table1_spec() -> SystemSpec:
    """Three-class instance with b = 125, alpha = 10 and exponential clocks.

    Exponential inter-arrival and service times give sigma2_bar = 0.909, which
    is the 0.91 quoted alongside this instance.
    """
    rows = [
        ("I", 0.60, 1.80, 1390.0, 962.5),
        ("II", 0.73, 2.20, 1050.0, 700.0),
        ("III", 0.93, 2.80, 733.0, 875.0),
    ]
    classes = tuple(ClassSpec(label=l, lam=lam, mu=mu, h=h, r=r) for l, lam, mu, h, r in rows)
    return SystemSpec(classes=classes, b=125.0, alpha=10.0, criticality_tol=0.01)


def criticality_gap(spec: SystemSpec) -> float:
    return math.fsum(c.lam / c.mu for c in spec.classes) - 1.0
