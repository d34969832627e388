"""
Retained-loss contracts.

Four families are supported, all expressed through one retention formula

    R(α) = min(bα, M) + (bα − M − L)⁺

with (b, M, L) = (1, ∞, ∞) for Identity, (b, ∞, ∞) for Proportional,
(1, M, ∞) for excess-of-loss and (1, M, L) for limited excess-of-loss.
Infinite M or L is the "no cap" sentinel.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from band_reinsurance_errors import ContractError
from lattice_distribution import LatticeDistribution, mean as lattice_mean, report_tail
from thinning_model import SeverityLaw

logger = logging.getLogger(__name__)

INF = math.inf
DEFAULT_CANDIDATE_CAP = 200_000


class Family(Enum):
    IDENTITY = "identity"
    PROPORTIONAL = "proportional"
    XL = "xl"
    LXL = "lxl"

    @classmethod
    def parse(cls, text: str) -> "Family":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ContractError(f"unknown contract family '{text}' "
                                f"(expected one of {', '.join(f.value for f in cls)})")


@dataclass(frozen=True)
class RetainedLossSpec:
    """One line's retained-loss function"""
    family: Family
    b: float = 1.0
    M: float = INF
    L: float = INF

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise ContractError(f"proportional share must lie in [0, 1] (b={self.b})")
        if not self.M >= 0 or not self.L >= 0:
            raise ContractError(f"priority and limit must be nonnegative (M={self.M}, L={self.L})")
        if self.family != Family.PROPORTIONAL and self.b != 1.0:
            raise ContractError(f"{self.family.value} contract cannot carry a share b={self.b}")
        if self.family in (Family.IDENTITY, Family.PROPORTIONAL) and (self.M != INF or self.L != INF):
            raise ContractError(f"{self.family.value} contract cannot carry a priority or limit")
        if self.family == Family.XL and self.L != INF:
            raise ContractError("excess-of-loss contract has no limit; use lxl")

    @classmethod
    def identity(cls) -> "RetainedLossSpec":
        return cls(Family.IDENTITY)

    @classmethod
    def proportional(cls, b: float) -> "RetainedLossSpec":
        return cls(Family.PROPORTIONAL, b=float(b))

    @classmethod
    def xl(cls, M: float) -> "RetainedLossSpec":
        return cls(Family.XL, M=float(M))

    @classmethod
    def lxl(cls, M: float, L: float) -> "RetainedLossSpec":
        return cls(Family.LXL, M=float(M), L=float(L))

    @property
    def params(self) -> Tuple[float, float, float]:
        return self.b, self.M, self.L

    @property
    def is_identity(self) -> bool:
        # proportional b=1 and uncapped XL/LXL retain everything
        return self.b == 1.0 and self.M == INF

    def apply(self, alpha: float) -> float:
        if alpha < 0:
            raise ContractError(f"claim size must be nonnegative (alpha={alpha})")
        return float(retained_amount(self.b, self.M, self.L, alpha))

    def to_dict(self) -> dict:
        return {'family': self.family.value, 'b': self.b, 'M': _encode(self.M), 'L': _encode(self.L)}

    @classmethod
    def from_dict(cls, data: dict) -> "RetainedLossSpec":
        return cls(Family.parse(data['family']), b=float(data.get('b', 1.0)),
                   M=_decode(data.get('M', 'inf')), L=_decode(data.get('L', 'inf')))

    def label(self) -> str:
        if self.family == Family.IDENTITY:
            return "identity"
        if self.family == Family.PROPORTIONAL:
            return f"prop(b={self.b:g})"
        if self.family == Family.XL:
            return f"xl(M={self.M:g})"
        return f"lxl(M={self.M:g},L={self.L:g})"


def _encode(value: float):
    return "inf" if value == INF else value


def _decode(value) -> float:
    return INF if str(value).strip().lower() in ("inf", "infinity") else float(value)


@dataclass(frozen=True)
class ReinsuranceVector:
    """One retained-loss spec per line; shared means one contract for every line"""
    specs: Tuple[RetainedLossSpec, ...]
    shared: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'specs', tuple(self.specs))
        if not self.specs:
            raise ContractError("reinsurance vector needs at least one line")
        if self.shared and len(set(self.specs)) != 1:
            raise ContractError("shared reinsurance vector must use identical specs on every line")

    @classmethod
    def identity(cls, n: int, shared: bool = False) -> "ReinsuranceVector":
        return cls(tuple(RetainedLossSpec.identity() for _ in range(n)), shared=shared)

    @property
    def n(self) -> int:
        return len(self.specs)

    @property
    def is_identity(self) -> bool:
        return all(s.is_identity for s in self.specs)

    def replace(self, line: int, spec: RetainedLossSpec) -> "ReinsuranceVector":
        if self.shared:
            return ReinsuranceVector(tuple(spec for _ in self.specs), shared=True)
        specs = list(self.specs)
        specs[line] = spec
        return ReinsuranceVector(tuple(specs))

    def params_array(self) -> np.ndarray:
        """(n, 3) array of (b, M, L) per line"""
        return np.array([s.params for s in self.specs], dtype=float)

    def to_dict(self) -> dict:
        return {'shared': self.shared, 'specs': [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, data: dict) -> "ReinsuranceVector":
        return cls(tuple(RetainedLossSpec.from_dict(s) for s in data['specs']), shared=bool(data.get('shared')))

    def label(self) -> str:
        if self.shared:
            return f"shared {self.specs[0].label()}"
        return ", ".join(s.label() for s in self.specs)


@dataclass(frozen=True)
class ParameterGrid:
    """Candidate parameter values for one line (or for every line)"""
    b_values: Tuple[float, ...] = (1.0,)
    M_values: Tuple[float, ...] = (INF,)
    L_values: Tuple[float, ...] = (INF,)

    def __post_init__(self):
        for name in ('b_values', 'M_values', 'L_values'):
            values = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ContractError(f"{name} grid is empty")
            if list(values) != sorted(values):
                raise ContractError(f"{name} grid must be sorted ascending")
            if any(math.isnan(v) for v in values) or INF in values[:-1]:
                raise ContractError(f"{name} grid must be finite apart from a trailing inf")
        if not all(0.0 <= b <= 1.0 for b in self.b_values):
            raise ContractError("b grid must lie in [0, 1]")
        if self.M_values[0] < 0 or self.L_values[0] < 0:
            raise ContractError("M and L grids must be nonnegative")

    def spacing(self, name: str) -> float:
        """Typical spacing of a grid (0 for single-point grids)"""
        finite = [v for v in getattr(self, name) if v != INF]
        if len(finite) < 2:
            return 0.0
        return float(np.min(np.diff(finite)))


def retained_amount(b, M, L, alpha):
    """Vectorized retention min(bα, M) + (bα − M − L)⁺ for every family"""
    scaled = np.multiply(b, alpha)
    with np.errstate(invalid='ignore'):
        excess = np.subtract(np.subtract(scaled, M), L)
    excess = np.where(np.isnan(excess), 0.0, excess)
    return np.minimum(scaled, M) + np.maximum(excess, 0.0)


def _retained_mean_above(spec: RetainedLossSpec, law: SeverityLaw, t: float) -> float:
    """E[R(U)·1{R(U) > t}] in closed form from the severity law"""
    pm = law.partial_mean_above

    def survival(x):
        return float(1.0 - law.cdf(x))

    b, M, L = spec.params
    if b == 0.0:
        return 0.0
    if M == INF:
        return b * pm(t / b)
    if L == INF:
        if t >= M:
            return 0.0
        return pm(t) - pm(M) + M * survival(M)
    if t >= M:
        return pm(t + L) - L * survival(t + L)
    return (pm(t) - pm(M) + M * (survival(M) - survival(M + L))
            + pm(M + L) - L * survival(M + L))


def retained_mean(spec: RetainedLossSpec, base: Union[SeverityLaw, LatticeDistribution]) -> float:
    """
    E(R(U)). Exact for a severity law; for a lattice base the mean of the
    lattice pushforward.
    """
    if isinstance(base, SeverityLaw):
        return max(_retained_mean_above(spec, base, 0.0), 0.0)
    return lattice_mean(pushforward(spec, base, base.h, base.K))


def _snap(value: float, h: float) -> float:
    return value if value == INF else round(value / h) * h


def _inverse_retention(spec: RetainedLossSpec, t: np.ndarray) -> np.ndarray:
    """Largest α with R(α) ≤ t (inf where every α qualifies)"""
    b, M, L = spec.params
    if b == 0.0:
        return np.full_like(t, INF)
    if M == INF:
        return t / b
    above = t + 1e-12 * max(M, 1.0) >= M
    if L == INF:
        return np.where(above, INF, t)
    return np.where(above, t + L, t)


def _pushforward_law(spec: RetainedLossSpec, law: SeverityLaw, h: float, K: int) -> LatticeDistribution:
    snapped = RetainedLossSpec(spec.family, b=spec.b, M=_snap(spec.M, h), L=_snap(spec.L, h))
    grid = h * np.arange(K + 1)
    inverse = _inverse_retention(snapped, grid)
    finite = np.isfinite(inverse)
    cdf = np.ones(K + 1)
    cdf[finite] = law.cdf(inverse[finite])
    masses = np.empty(K + 1)
    masses[0] = cdf[0]
    masses[1:] = np.diff(cdf)
    masses = np.clip(masses, 0.0, None)
    tail = max(1.0 - masses.sum(), 0.0)
    tail_mean = _retained_mean_above(snapped, law, K * h) if tail > 0 else 0.0
    return LatticeDistribution(h=h, masses=masses, tail_mass=tail, tail_mean=max(tail_mean, 0.0))


def _pushforward_lattice(spec: RetainedLossSpec, base: LatticeDistribution, K: int) -> LatticeDistribution:
    h = base.h
    j = np.arange(base.K + 1)
    b, M, L = spec.params
    tail, tail_mean = base.tail_mass, base.tail_mean

    if b == 0.0:
        target = np.zeros_like(j)
        target_tail = 0
    elif M == INF:
        target = np.ceil(b * j - 1e-9).astype(int)
        tail_mean *= b
        target_tail = None
    else:
        m = int(round(M / h))
        if L == INF:
            target = np.minimum(j, m)
            target_tail = m if m <= K else None
            if target_tail is None:
                tail_mean = min(tail_mean, m * h * tail)
        else:
            l = int(round(L / h))
            target = np.where(j <= m, j, np.where(j <= m + l, m, j - l))
            # tail stays above (K - l) * h; its first moment shifts down by L
            tail_mean = max(tail_mean - l * h * tail, 0.0)
            target_tail = None

    masses = np.bincount(target, weights=base.masses, minlength=K + 1)
    if target_tail is not None and tail > 0:
        masses[target_tail] += tail
        tail, tail_mean = 0.0, 0.0

    if masses.size > K + 1:
        overflow = masses[K + 1:]
        tail_mean += float(np.dot(h * np.arange(K + 1, masses.size), overflow))
        tail += float(overflow.sum())
        masses = masses[:K + 1]

    return LatticeDistribution(h=h, masses=masses, tail_mass=tail, tail_mean=tail_mean if tail > 0 else 0.0)


def pushforward(spec: RetainedLossSpec, base: Union[SeverityLaw, LatticeDistribution],
                h: float, K: int) -> LatticeDistribution:
    """
    Law of R(U) on the lattice {0, h, ..., K*h}.

    A severity law is pushed forward through its exact CDF; a lattice base
    is remapped index by index. Priorities and limits are snapped to the
    nearest lattice point so every candidate shares one lattice.
    """
    if isinstance(base, SeverityLaw):
        result = _pushforward_law(spec, base, h, K)
    else:
        if not np.isclose(base.h, h, rtol=1e-12, atol=0.0):
            raise ContractError(f"pushforward step {h} differs from base step {base.h}")
        if spec.is_identity and base.K == K:
            return base
        result = _pushforward_lattice(spec, base, K)
    return report_tail(result, "pushforward")


def line_candidates(grid: Union[ParameterGrid, Sequence[ParameterGrid]],
                    families: Sequence[Family]) -> List[List[RetainedLossSpec]]:
    """Per-line candidate specs, identity always first"""
    grids = list(grid) if isinstance(grid, (list, tuple)) else [grid] * len(families)
    if len(grids) != len(families):
        raise ContractError(f"got {len(grids)} parameter grids for {len(families)} lines")

    lines = []
    for family, g in zip(families, grids):
        if family == Family.IDENTITY:
            specs = []
        elif family == Family.PROPORTIONAL:
            specs = [RetainedLossSpec.proportional(b) for b in g.b_values]
        elif family == Family.XL:
            specs = [RetainedLossSpec.xl(M) for M in g.M_values]
        else:
            specs = [RetainedLossSpec.lxl(M, L) for M in g.M_values for L in g.L_values]
        identity = RetainedLossSpec.identity()
        # proportional b=1 and XL M=inf duplicate the identity contract
        specs = [s for s in specs if not s.is_identity]
        lines.append([identity] + list(dict.fromkeys(specs)))
    return lines


def count_candidates(per_line: Sequence[Sequence[RetainedLossSpec]], shared: bool) -> int:
    if shared:
        return len(per_line[0])
    return int(np.prod([len(specs) for specs in per_line], dtype=float))


def enumerate_candidates(grid: Union[ParameterGrid, Sequence[ParameterGrid]],
                         families: Sequence[Family], shared: bool,
                         cap: int = DEFAULT_CANDIDATE_CAP) -> List[ReinsuranceVector]:
    """
    Cartesian product of per-line candidates (or the common list when
    shared), always including the all-identity vector.
    """
    if shared and len(set(families)) != 1:
        raise ContractError("shared contract mode needs the same family on every line")
    per_line = line_candidates(grid, families)
    total = count_candidates(per_line, shared)
    if total > cap:
        raise ContractError(f"{total} candidates exceed the cap of {cap}; use coordinate search")

    n = len(families)
    if shared:
        vectors = [ReinsuranceVector(tuple(spec for _ in range(n)), shared=True) for spec in per_line[0]]
    else:
        vectors = [ReinsuranceVector(tuple(combo)) for combo in itertools.product(*per_line)]
    logger.debug(f"Enumerated {len(vectors)} reinsurance candidates ({'shared' if shared else 'per-line'})")
    return vectors


def refine_candidates(spec: RetainedLossSpec, spacing: float, level: int = 1) -> List[RetainedLossSpec]:
    """
    Neighbours of an incumbent at spacing / 2**level along each free
    parameter, clipped to the admissible range. Uncapped parameters are
    not refined.
    """
    if spacing <= 0 or spec.family == Family.IDENTITY:
        return []
    step = spacing / (2 ** level)
    out = []
    if spec.family == Family.PROPORTIONAL:
        for b in (spec.b - step, spec.b + step):
            out.append(RetainedLossSpec.proportional(min(max(b, 0.0), 1.0)))
    else:
        if spec.M != INF:
            for M in (spec.M - step, spec.M + step):
                M = max(M, 0.0)
                out.append(RetainedLossSpec.xl(M) if spec.family == Family.XL else RetainedLossSpec.lxl(M, spec.L))
        if spec.family == Family.LXL and spec.L != INF:
            for L in (spec.L - step, spec.L + step):
                out.append(RetainedLossSpec.lxl(spec.M, max(L, 0.0)))
    return [s for s in dict.fromkeys(out) if s != spec]


def parse_grid(text: str) -> Tuple[float, ...]:
    """
    Parse a grid definition: `linspace:start,stop,count` or a comma list
    that may end in `inf`.
    """
    text = (text or "").strip()
    if not text:
        raise ContractError("empty parameter grid")
    values: List[float] = []
    for part in text.split(';'):
        part = part.strip()
        if part.lower().startswith('linspace:'):
            try:
                start, stop, count = part.split(':', 1)[1].split(',')
                values.extend(np.linspace(float(start), float(stop), int(count)).tolist())
            except ValueError:
                raise ContractError(f"malformed linspace grid '{part}' (expected linspace:start,stop,count)")
        else:
            try:
                values.extend(_decode(v) for v in part.split(',') if v.strip())
            except ValueError:
                raise ContractError(f"malformed grid value in '{part}'")
    values = sorted(set(values))
    if not values:
        raise ContractError(f"grid '{text}' has no values")
    return tuple(values)


def grid_from_strings(b_grid: Optional[str] = None, M_grid: Optional[str] = None,
                      L_grid: Optional[str] = None) -> ParameterGrid:
    return ParameterGrid(
        b_values=parse_grid(b_grid) if b_grid else (1.0,),
        M_values=parse_grid(M_grid) if M_grid else (INF,),
        L_values=parse_grid(L_grid) if L_grid else (INF,),
    )
