#!/usr/bin/env python3
"""
Thinning-Dependence Risk Model

Declarative description of a multi-line insurance portfolio whose claim
arrivals share m independent Poisson event classes. Each event of class i
produces a claim in line z with probability p[i][z]; the portfolio is then a
single compound Poisson process with intensity beta_total and an aggregate
claim law built from subset weights.

Lines and classes are 0-indexed throughout the code base.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from band_reinsurance_errors import ModelError

logger = logging.getLogger(__name__)

# Subset enumeration is explicit over 2^n
MAX_LINES = 20


class SeverityKind(Enum):
    """Supported claim severity families"""
    EXPONENTIAL = "exp"
    EMPIRICAL_LATTICE = "lattice"
    GAMMA = "gamma"


@dataclass(frozen=True)
class SeverityLaw:
    """Claim severity law of one line (monetary units)"""
    kind: SeverityKind
    rate: float = 0.0
    step: float = 0.0
    masses: Tuple[float, ...] = ()
    shape: float = 0.0

    @classmethod
    def exponential(cls, rate: float) -> "SeverityLaw":
        return cls(kind=SeverityKind.EXPONENTIAL, rate=float(rate))

    @classmethod
    def empirical(cls, step: float, masses: Sequence[float]) -> "SeverityLaw":
        """Atoms at 0, step, 2*step, ... with the given probabilities"""
        return cls(kind=SeverityKind.EMPIRICAL_LATTICE, step=float(step),
                   masses=tuple(float(m) for m in masses))

    @classmethod
    def gamma(cls, shape: float, rate: float) -> "SeverityLaw":
        return cls(kind=SeverityKind.GAMMA, rate=float(rate), shape=float(shape))

    def problems(self) -> List[str]:
        """Return invariant violations of this law (empty when valid)"""
        issues = []
        if self.kind in (SeverityKind.EXPONENTIAL, SeverityKind.GAMMA):
            if not np.isfinite(self.rate) or self.rate <= 0:
                issues.append(f"{self.kind.value} rate must be positive (rate={self.rate})")
            if self.kind == SeverityKind.GAMMA and (not np.isfinite(self.shape) or self.shape <= 0):
                issues.append(f"gamma shape must be positive (shape={self.shape})")
        else:
            if self.step <= 0:
                issues.append(f"empirical lattice step must be positive (step={self.step})")
            if not self.masses:
                issues.append("empirical lattice has no masses")
            elif min(self.masses) < 0:
                issues.append("empirical lattice masses must be nonnegative")
            elif abs(sum(self.masses) - 1.0) > 1e-12:
                issues.append(f"empirical lattice masses sum to {sum(self.masses):.15f}, not 1")
        return issues

    @property
    def atoms(self) -> np.ndarray:
        return self.step * np.arange(len(self.masses), dtype=float)

    def cdf(self, x) -> np.ndarray:
        """Right-continuous CDF evaluated at x (scalar or array)"""
        x = np.asarray(x, dtype=float)
        if self.kind == SeverityKind.EXPONENTIAL:
            return stats.expon.cdf(x, scale=1.0 / self.rate)
        if self.kind == SeverityKind.GAMMA:
            return stats.gamma.cdf(x, self.shape, scale=1.0 / self.rate)
        cumulative = np.cumsum(self.masses)
        # atoms within float noise of x count as <= x
        idx = np.floor(x / self.step + 1e-9).astype(int)
        out = np.where(idx < 0, 0.0, cumulative[np.clip(idx, 0, len(cumulative) - 1)])
        return np.where(idx >= len(cumulative), 1.0, out)

    def mean(self) -> float:
        if self.kind == SeverityKind.EXPONENTIAL:
            return 1.0 / self.rate
        if self.kind == SeverityKind.GAMMA:
            return self.shape / self.rate
        return float(np.dot(self.atoms, self.masses))

    def partial_mean_above(self, threshold: float) -> float:
        """E[U * 1{U > threshold}]"""
        if self.kind == SeverityKind.EXPONENTIAL:
            return (threshold + 1.0 / self.rate) * float(np.exp(-self.rate * threshold))
        if self.kind == SeverityKind.GAMMA:
            # size-biased gamma is gamma with shape + 1
            return self.mean() * float(stats.gamma.sf(threshold, self.shape + 1.0, scale=1.0 / self.rate))
        atoms = self.atoms
        above = atoms > threshold + 1e-9 * self.step
        return float(np.dot(atoms[above], np.asarray(self.masses)[above]))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == SeverityKind.EXPONENTIAL:
            return rng.exponential(1.0 / self.rate, size=size)
        if self.kind == SeverityKind.GAMMA:
            return rng.gamma(self.shape, 1.0 / self.rate, size=size)
        return rng.choice(self.atoms, size=size, p=np.asarray(self.masses))

    def describe(self) -> str:
        if self.kind == SeverityKind.EXPONENTIAL:
            return f"exp:{self.rate!r}"
        if self.kind == SeverityKind.GAMMA:
            return f"gamma:{self.shape!r}:{self.rate!r}"
        return f"lattice:{self.step!r}:" + "|".join(repr(m) for m in self.masses)


@dataclass(frozen=True)
class ThinningModel:
    """
    Thinning-dependence risk model.

    beta[i]      intensity of event class i (events per unit time)
    p[i][z]      probability that a class-i event hits line z
    severities   one SeverityLaw per line
    eta, eta1    insurer / reinsurer safety loadings
    delta        discount rate
    """
    beta: Tuple[float, ...]
    p: Tuple[Tuple[float, ...], ...]
    severities: Tuple[SeverityLaw, ...]
    eta: float
    eta1: float
    delta: float
    label: str = "model"
    beta_total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'beta', tuple(float(b) for b in self.beta))
        object.__setattr__(self, 'p', tuple(tuple(float(v) for v in row) for row in self.p))
        object.__setattr__(self, 'severities', tuple(self.severities))
        if len(self.beta) == 0:
            raise ModelError("model needs at least one event class")
        if len(self.p) != len(self.beta):
            raise ModelError(f"thinning matrix has {len(self.p)} rows for {len(self.beta)} classes")
        widths = {len(row) for row in self.p}
        if widths != {len(self.severities)}:
            raise ModelError(f"thinning matrix rows must have one entry per line ({len(self.severities)})")
        object.__setattr__(self, 'beta_total', float(sum(self.beta)))

    @property
    def m(self) -> int:
        return len(self.beta)

    @property
    def n(self) -> int:
        return len(self.severities)

    @property
    def beta_array(self) -> np.ndarray:
        return np.array(self.beta, dtype=float)

    @property
    def p_matrix(self) -> np.ndarray:
        return np.array(self.p, dtype=float)

    def to_dict(self) -> Dict:
        return {
            'label': self.label,
            'beta': list(self.beta),
            'p': [list(row) for row in self.p],
            'severities': [law.describe() for law in self.severities],
            'eta': self.eta,
            'eta1': self.eta1,
            'delta': self.delta,
        }


def validate(model: ThinningModel) -> List[str]:
    """Return the list of violated model assumptions (empty when valid)"""
    violations = []

    for i, b in enumerate(model.beta):
        if not b > 0:
            violations.append(f"intensity must be positive (beta[{i}]={b})")

    for i, row in enumerate(model.p):
        for z, value in enumerate(row):
            if not 0.0 <= value <= 1.0:
                violations.append(f"thinning probability p[{i}][{z}]={value} outside [0, 1]")

    if not model.eta > 0:
        violations.append(f"insurer loading must be positive, η > 0 (eta={model.eta})")
    if model.eta1 < model.eta:
        violations.append(f"η₁ ≥ η required (eta1={model.eta1}, eta={model.eta})")
    if not model.delta > 0:
        violations.append(f"discount rate must be positive, δ > 0 (delta={model.delta})")

    for z, law in enumerate(model.severities):
        for issue in law.problems():
            violations.append(f"line {z}: {issue}")

    if not violations:
        # Identity contract: p_R = p = (1+η) β E(Y)
        gross = (1.0 + model.eta) * model.beta_total * gross_mean(model)
        if not gross > 0:
            violations.append("net profit condition fails: gross premium must be positive for the identity contract")

    if violations:
        logger.warning(f"Model '{model.label}' failed validation with {len(violations)} violation(s)")
    return violations


def line_claim_weights(model: ThinningModel) -> Dict[FrozenSet[int], float]:
    """
    Probability that one event (of the merged stream) hits exactly the
    lines in S, for every S ⊆ {0..n-1}, the empty set included.
    """
    if model.n > MAX_LINES:
        raise ModelError(f"subset enumeration supports at most {MAX_LINES} lines (got {model.n})")

    n = model.n
    codes = np.arange(2 ** n)
    mask = ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)

    p = model.p_matrix
    share = model.beta_array / model.beta_total
    weights = np.zeros(len(codes))
    for i in range(model.m):
        weights += share[i] * np.prod(np.where(mask, p[i][None, :], 1.0 - p[i][None, :]), axis=1)

    return {frozenset(np.flatnonzero(mask[c]).tolist()): float(weights[c]) for c in codes}


def line_claim_intensity(model: ThinningModel) -> np.ndarray:
    """Expected claims per unit time in each line, λ_z = Σ_i β_i p_iz"""
    return model.beta_array @ model.p_matrix


def gross_mean(model: ThinningModel) -> float:
    """E(Y), the mean aggregate claim of one event"""
    means = np.array([law.mean() for law in model.severities])
    return float(line_claim_intensity(model) @ means / model.beta_total)


def common_shock_model(beta_individual: Sequence[float],
                       beta_shocks: Sequence[float],
                       shock_sets: Sequence[Sequence[int]],
                       severities: Sequence[SeverityLaw],
                       eta: float, eta1: float, delta: float,
                       label: str = "common-shock") -> ThinningModel:
    """
    Common-shock model: one class per line hitting only that line, plus one
    class per shock set hitting every line in the set with probability 1.
    """
    n = len(severities)
    if len(beta_individual) != n:
        raise ModelError(f"need one individual intensity per line ({n})")
    if len(beta_shocks) != len(shock_sets):
        raise ModelError("need one shock intensity per shock set")

    rows = []
    for z in range(n):
        rows.append(tuple(1.0 if k == z else 0.0 for k in range(n)))
    for members in shock_sets:
        if any(z < 0 or z >= n for z in members):
            raise ModelError(f"shock set {list(members)} references an unknown line")
        rows.append(tuple(1.0 if k in members else 0.0 for k in range(n)))

    return ThinningModel(beta=tuple(beta_individual) + tuple(beta_shocks), p=tuple(rows),
                         severities=tuple(severities), eta=eta, eta1=eta1, delta=delta, label=label)


def model_fingerprint(model: ThinningModel) -> str:
    """Stable digest of the model content (label excluded)"""
    content = model.to_dict()
    content.pop('label', None)
    canonical = json.dumps(content, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def relabel_lines(model: ThinningModel, order: Sequence[int]) -> ThinningModel:
    """Model with lines permuted: new line k is old line order[k]"""
    order = list(order)
    if sorted(order) != list(range(model.n)):
        raise ModelError(f"{order} is not a permutation of the {model.n} lines")
    return ThinningModel(
        beta=model.beta,
        p=tuple(tuple(row[z] for z in order) for row in model.p),
        severities=tuple(model.severities[z] for z in order),
        eta=model.eta, eta1=model.eta1, delta=model.delta, label=model.label,
    )


def example1_model() -> ThinningModel:
    """Three-line thinning model with exponential severities used throughout the docs"""
    return ThinningModel(
        beta=(8.0, 4.0, 5.0),
        p=((1.0, 0.06, 0.05),
           (0.03, 1.0, 0.01),
           (0.007, 0.005, 1.0)),
        severities=(SeverityLaw.exponential(0.5), SeverityLaw.exponential(3.0), SeverityLaw.exponential(2.0)),
        eta=3.0, eta1=3.5, delta=0.3, label="example1",
    )


def classical_model(beta: float, rate: float, eta: float, delta: float,
                    eta1: Optional[float] = None, label: str = "classical") -> ThinningModel:
    """Single line, single class Cramér-Lundberg model with exponential claims"""
    return ThinningModel(beta=(beta,), p=((1.0,),), severities=(SeverityLaw.exponential(rate),),
                         eta=eta, eta1=eta if eta1 is None else eta1, delta=delta, label=label)
