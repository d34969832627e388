"""
HJB operators on lattice functions.

For a candidate with net premium p_R and aggregate masses g:

    L(u)(x_i) = p_R·u'(x_i) − (δ+β)·u(x_i) + β·Σ_{j=0..i} u(x_{i−j})·g[j]
    Λ(u)(x_i) = p_R        − (δ+β)·u(x_i) + β·Σ_{j=0..i} u(x_{i−j})·g[j]

u'(x_i) is the difference (u(x_i) − u(x_{i−1}))/h. Sup over candidates
goes through a CandidatePool; single-candidate versions take a Candidate.
Report functions return dicts and never raise.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from band_reinsurance_errors import BandReinsuranceError
from candidate_search import Candidate, CandidatePool
from reinsurance_contracts import ReinsuranceVector
from thinning_model import ThinningModel, gross_mean

logger = logging.getLogger(__name__)

DEFAULT_RESIDUAL_TOL = 5e-3
SLOPE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values u(0), u(h), ..., u(Kh)"""
    h: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise BandReinsuranceError("grid function needs at least two values")
        if not np.all(np.isfinite(values)):
            raise BandReinsuranceError("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def K(self) -> int:
        return self.values.size - 1

    @property
    def x(self) -> np.ndarray:
        return self.h * np.arange(self.values.size)

    def derivative(self) -> np.ndarray:
        """Backward differences; index 0 repeats index 1"""
        d = np.empty_like(self.values)
        d[1:] = np.diff(self.values) / self.h
        d[0] = d[1]
        return d

    def slope(self, i: int) -> float:
        if i < 1:
            raise IndexError("derivative needs a point to the left (index >= 1)")
        return (self.values[i] - self.values[i - 1]) / self.h

    def history(self, i: int) -> np.ndarray:
        """Weights u(x_i), u(x_{i-1}), ..., u(0)"""
        return self.values[i::-1]


def _check_index(u: GridFunction, i: int, lowest: int):
    if not lowest <= i <= u.K:
        raise IndexError(f"grid index {i} outside {lowest}..{u.K}")


def L_apply(u: GridFunction, i: int, candidate: Candidate, model: ThinningModel) -> float:
    _check_index(u, i, 1)
    conv = float(candidate.masses[:i + 1] @ u.history(i))
    return (candidate.p_net * u.slope(i) - (model.delta + model.beta_total) * u.values[i]
            + model.beta_total * conv)


def Lambda_apply(u: GridFunction, i: int, candidate: Candidate, model: ThinningModel) -> float:
    _check_index(u, i, 0)
    conv = float(candidate.masses[:i + 1] @ u.history(i))
    return candidate.p_net - (model.delta + model.beta_total) * u.values[i] + model.beta_total * conv


def sup_L(u: GridFunction, i: int, pool: CandidatePool, model: ThinningModel,
          start: Optional[ReinsuranceVector] = None) -> Tuple[float, ReinsuranceVector]:
    _check_index(u, i, 1)
    slope = u.slope(i)
    level = (model.delta + model.beta_total) * u.values[i]
    beta = model.beta_total

    def score(p_net, conv, p_zero):
        return p_net * slope - level + beta * conv

    return pool.optimize(u.history(i), score, maximize=True, start=start)


def sup_Lambda(u: GridFunction, i: int, pool: CandidatePool, model: ThinningModel,
               start: Optional[ReinsuranceVector] = None) -> Tuple[float, ReinsuranceVector]:
    _check_index(u, i, 0)
    level = (model.delta + model.beta_total) * u.values[i]
    beta = model.beta_total

    def score(p_net, conv, p_zero):
        return p_net - level + beta * conv

    return pool.optimize(u.history(i), score, maximize=True, start=start)


def Lambda_sup_profile(u: GridFunction, pool: CandidatePool, model: ThinningModel,
                       indices: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, List[Optional[ReinsuranceVector]]]:
    """sup Λ and its argmax at each requested index (NaN elsewhere)"""
    indices = range(u.K + 1) if indices is None else indices
    values = np.full(u.K + 1, np.nan)
    vectors: List[Optional[ReinsuranceVector]] = [None] * (u.K + 1)
    for i in indices:
        values[i], vectors[i] = sup_Lambda(u, i, pool, model, start=vectors[i - 1] if i > 0 else None)
    return values, vectors


def residual_scale(u: GridFunction, model: ThinningModel) -> float:
    """(δ+β)·max|u|, the scale residual tolerances are relative to"""
    return (model.delta + model.beta_total) * float(np.max(np.abs(u.values)))


def hjb_residual(u: GridFunction, pool: CandidatePool, model: ThinningModel,
                 tol: float = DEFAULT_RESIDUAL_TOL) -> Dict:
    """
    max(1 − u'(x), sup L(u)(x)) at every grid point from index 1 on.
    Index 0 has no left neighbour and is covered by boundary_consistency.
    """
    residual = np.full(u.K + 1, np.nan)
    sup_values = np.full(u.K + 1, np.nan)
    vectors: List[Optional[ReinsuranceVector]] = [None] * (u.K + 1)
    slopes = u.derivative()
    for i in range(1, u.K + 1):
        sup_values[i], vectors[i] = sup_L(u, i, pool, model, start=vectors[i - 1])
        residual[i] = max(1.0 - slopes[i], sup_values[i])

    scale = residual_scale(u, model)
    limit = tol * scale
    abs_res = np.abs(residual[1:])
    worst = int(np.argmax(abs_res)) + 1
    violating = np.flatnonzero(np.abs(residual) > limit)
    report = {
        'residual': residual,
        'sup_L': sup_values,
        'argmax_vectors': vectors,
        'max_abs_residual': float(abs_res.max()),
        'worst_index': worst,
        'worst_x': worst * u.h,
        'tolerance': limit,
        'relative_tolerance': tol,
        'violating_indices': violating.tolist(),
        'violating_intervals': index_runs(violating, u.h),
        'passed': bool(abs_res.max() <= limit),
    }
    logger.debug(f"HJB residual: max {report['max_abs_residual']:.3e} (tolerance {limit:.3e}) at x={report['worst_x']:g}")
    return report


def index_runs(indices: Sequence[int], h: float) -> List[Tuple[float, float]]:
    """Contiguous index runs as (x_start, x_end) pairs"""
    runs = []
    indices = list(indices)
    if not indices:
        return runs
    start = prev = indices[0]
    for i in indices[1:]:
        if i != prev + 1:
            runs.append((start * h, prev * h))
            start = i
        prev = i
    runs.append((start * h, prev * h))
    return runs


def v0_closed_form(model: ThinningModel, pool: CandidatePool) -> Tuple[float, ReinsuranceVector]:
    """sup over candidates of p_R / (δ + β − β·P(R(Z)=0))"""
    delta, beta = model.delta, model.beta_total

    def score(p_net, conv, p_zero):
        return p_net / (delta + beta - beta * p_zero)

    return pool.optimize(np.zeros(1), score, maximize=True)


def boundary_consistency(V0: float, v0: float, first_barrier_index: int, rel_tol: float = 0.01) -> Dict:
    """
    Compare the solved V(0) with the closed form v0.

    With the first barrier at 0, paying the premium from the start is
    optimal and V(0) = v0 within rel_tol. The march's step at x_1 sees
    the first claim bucket a step before the level term grows, so a
    barrier at 0 shows up at index 0 or 1. Higher barriers only need
    V(0) ≥ v0.
    """
    ratio = V0 / v0 if v0 > 0 else np.inf
    gap = abs(V0 - v0) / v0 if v0 > 0 else np.inf
    at_zero = first_barrier_index <= 1
    passed = gap <= rel_tol if at_zero else ratio >= 1.0 - rel_tol
    return {
        'V0': V0,
        'v0_closed_form': v0,
        'relative_gap': gap,
        'ratio': ratio,
        'mode': 'equality' if at_zero else 'lower_bound',
        'margin': rel_tol - gap if at_zero else ratio - (1.0 - rel_tol),
        'passed': bool(passed),
    }


def check_bounds(u: GridFunction, model: ThinningModel, slack: Optional[float] = None) -> Dict:
    """
    x + (1+η)μβ/(β+δ) ≤ u(x) ≤ x + (1+η)μβ/δ with μ = E(Y), and
    u(y) − u(x) ≥ y − x, reported with 2h slack on the envelopes.
    """
    slack = 2.0 * u.h if slack is None else slack
    x = u.x
    premium = (1.0 + model.eta) * gross_mean(model) * model.beta_total
    lower = x + premium / (model.beta_total + model.delta)
    upper = x + premium / model.delta
    below = np.flatnonzero(u.values < lower - slack)
    above = np.flatnonzero(u.values > upper + slack)
    steps = np.diff(u.values) / u.h
    flat = np.flatnonzero(steps < 1.0 - SLOPE_TOL) + 1
    return {
        'lower_bound_violations': below.tolist(),
        'upper_bound_violations': above.tolist(),
        'slope_violations': flat.tolist(),
        'lower_margin': float(np.min(u.values - lower)),
        'upper_margin': float(np.min(upper - u.values)),
        'min_slope': float(steps.min()),
        'passed': bool(below.size == 0 and above.size == 0 and flat.size == 0),
    }
