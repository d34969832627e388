"""
Lattice distributions on {0, h, 2h, ..., K*h}.

Masses are bucketed left-open/right-closed: masses[j] = P((j-1)h < X <= jh)
for j >= 1 and masses[0] = P(X <= 0). Probability beyond K*h is kept in
tail_mass together with its first moment tail_mean, so means stay exact
under truncation.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import signal

from band_reinsurance_errors import LatticeError
from thinning_model import SeverityLaw

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-12
TAIL_REPORT_LEVEL = 1e-6
# Direct convolution below this many points, FFT above
FFT_THRESHOLD = 512

_tail_reported = set()


@dataclass(frozen=True, eq=False)
class LatticeDistribution:
    """Probability masses on the grid {0, h, ..., K*h} plus a tracked tail"""
    h: float
    masses: np.ndarray
    tail_mass: float = 0.0
    tail_mean: float = 0.0

    def __post_init__(self):
        masses = np.array(self.masses, dtype=float)
        if masses.ndim != 1 or masses.size == 0:
            raise LatticeError("masses must be a non-empty 1-D array")
        if not self.h > 0:
            raise LatticeError(f"grid step must be positive (h={self.h})")
        if np.any(masses < 0) or self.tail_mass < 0:
            raise LatticeError("lattice masses must be nonnegative")
        total = masses.sum() + self.tail_mass
        if abs(total - 1.0) > MASS_TOLERANCE:
            raise LatticeError(f"lattice masses sum to {total:.15f}, not 1")
        masses.setflags(write=False)
        object.__setattr__(self, 'masses', masses)
        object.__setattr__(self, 'h', float(self.h))
        object.__setattr__(self, 'tail_mass', float(self.tail_mass))
        object.__setattr__(self, 'tail_mean', float(self.tail_mean))

    @property
    def K(self) -> int:
        return self.masses.size - 1

    @property
    def grid(self) -> np.ndarray:
        return self.h * np.arange(self.masses.size)

    @property
    def p_zero(self) -> float:
        return float(self.masses[0])


def report_tail(dist: LatticeDistribution, operation: str) -> LatticeDistribution:
    if dist.tail_mass > TAIL_REPORT_LEVEL:
        if operation not in _tail_reported:
            _tail_reported.add(operation)
            logger.warning(f"{operation}: tail mass {dist.tail_mass:.3e} beyond x_max={dist.K * dist.h:g}; "
                           f"consider a larger x_max")
        else:
            logger.debug(f"{operation}: tail mass {dist.tail_mass:.3e}")
    return dist


def _same_step(a: LatticeDistribution, b: LatticeDistribution):
    if not np.isclose(a.h, b.h, rtol=1e-12, atol=0.0):
        raise LatticeError(f"grid step mismatch: {a.h} vs {b.h}")


def from_truncated(masses: np.ndarray, h: float, first_moment: float) -> LatticeDistribution:
    """Distribution from truncated masses; the remainder becomes the tail with the given total first moment"""
    masses = np.clip(masses, 0.0, None)
    inside = masses.sum()
    if inside > 1.0:
        masses = masses / inside
        inside = 1.0
    tail = max(1.0 - inside, 0.0)
    tail_mean = max(first_moment - float(np.dot(h * np.arange(masses.size), masses)), 0.0) if tail > 0 else 0.0
    return LatticeDistribution(h=h, masses=masses, tail_mass=tail, tail_mean=tail_mean)


def point_mass(h: float, K: int, index: int = 0) -> LatticeDistribution:
    """Degenerate law at index*h"""
    if not 0 <= index <= K:
        raise LatticeError(f"point mass index {index} outside 0..{K}")
    masses = np.zeros(K + 1)
    masses[index] = 1.0
    return LatticeDistribution(h=h, masses=masses)


def from_masses(h: float, masses: Sequence[float]) -> LatticeDistribution:
    """Distribution with the given masses and no tail"""
    return LatticeDistribution(h=h, masses=np.asarray(masses, dtype=float))


def from_severity(law: SeverityLaw, h: float, K: int) -> LatticeDistribution:
    """Bucket a severity law onto the grid: masses[j] = F(jh) - F((j-1)h)"""
    problems = law.problems()
    if problems:
        raise LatticeError(f"invalid severity law: {'; '.join(problems)}")
    if not h > 0 or K < 1:
        raise LatticeError(f"need h > 0 and K >= 1 (h={h}, K={K})")

    cdf = np.asarray(law.cdf(h * np.arange(K + 1)), dtype=float)
    masses = np.empty(K + 1)
    masses[0] = cdf[0]
    masses[1:] = np.diff(cdf)
    masses = np.clip(masses, 0.0, None)
    tail = max(1.0 - masses.sum(), 0.0)
    tail_mean = law.partial_mean_above(K * h) if tail > 0 else 0.0
    return report_tail(LatticeDistribution(h=h, masses=masses, tail_mass=tail, tail_mean=tail_mean),
                        "from_severity")


def pad(d: LatticeDistribution, K: int) -> LatticeDistribution:
    """Extend the grid to K with zero masses (never truncates)"""
    if K < d.K:
        raise LatticeError(f"cannot pad a K={d.K} lattice down to K={K}")
    if K == d.K:
        return d
    masses = np.zeros(K + 1)
    masses[:d.K + 1] = d.masses
    return LatticeDistribution(h=d.h, masses=masses, tail_mass=d.tail_mass, tail_mean=d.tail_mean)


def convolve_masses(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full linear convolution, direct for small inputs and FFT otherwise"""
    if max(a.size, b.size) <= FFT_THRESHOLD:
        return np.convolve(a, b)
    return np.clip(signal.fftconvolve(a, b), 0.0, None)


def convolve(a: LatticeDistribution, b: LatticeDistribution) -> LatticeDistribution:
    """Law of the sum of independent variables; overflow folds into the tail"""
    _same_step(a, b)
    K = max(a.K, b.K)
    a, b = pad(a, K), pad(b, K)
    full = convolve_masses(a.masses, b.masses)
    return report_tail(from_truncated(full[:K + 1], a.h, mean(a) + mean(b)), "convolve")


def mixture(components: Iterable[Tuple[float, LatticeDistribution]]) -> LatticeDistribution:
    """Pointwise weighted sum of masses, tails and tail moments"""
    components = list(components)
    if not components:
        raise LatticeError("mixture needs at least one component")
    weights = np.array([w for w, _ in components], dtype=float)
    if np.any(weights < 0):
        raise LatticeError("mixture weights must be nonnegative")
    total = weights.sum()
    if abs(total - 1.0) > 1e-9:
        raise LatticeError(f"mixture weights sum to {total:.12f}, not 1")
    weights = weights / total

    h = components[0][1].h
    for _, dist in components[1:]:
        _same_step(components[0][1], dist)
    K = max(dist.K for _, dist in components)

    masses = np.zeros(K + 1)
    tail = 0.0
    tail_mean = 0.0
    for w, (_, dist) in zip(weights, components):
        if w == 0.0:
            continue
        masses[:dist.K + 1] += w * dist.masses
        tail += w * dist.tail_mass
        tail_mean += w * dist.tail_mean
    # rounding in the weighted sum is absorbed by the tail
    tail = max(1.0 - masses.sum(), 0.0) if tail > 0 else 0.0
    if masses.sum() > 1.0:
        masses = masses / masses.sum()
    return LatticeDistribution(h=h, masses=masses, tail_mass=tail, tail_mean=tail_mean if tail > 0 else 0.0)


def mean(d: LatticeDistribution) -> float:
    return float(np.dot(d.grid, d.masses)) + d.tail_mean


def cdf(d: LatticeDistribution, x) -> np.ndarray:
    """Right-continuous step CDF; beyond K*h it equals 1 - tail_mass"""
    x = np.asarray(x, dtype=float)
    cumulative = np.cumsum(d.masses)
    idx = np.floor(x / d.h + 1e-9).astype(int)
    values = cumulative[np.clip(idx, 0, d.K)]
    return np.where(idx < 0, 0.0, values)


def survival(d: LatticeDistribution, x) -> np.ndarray:
    return 1.0 - cdf(d, x)


def to_frame(d: LatticeDistribution) -> pd.DataFrame:
    """Plot data for a lattice law"""
    return pd.DataFrame({'x': d.grid, 'mass': d.masses, 'cdf': np.cumsum(d.masses)})
