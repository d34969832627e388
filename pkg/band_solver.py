"""
Finite-difference band solver.

The scheme marches f on the lattice from f(0) = 1:

    f'(x_i) = inf_R [(δ+β)·f(x_{i−1}) − β·G_R(x_i)] / p_R
    G_R(x_i) = Σ_{j=1..i} f(x_{i−j})·g_R[j] + g_R[0]·f(x_{i−1})
    f(x_i)  = f(x_{i−1}) + h·f'(x_i)

(at i = 0 the same formula with f(x_{−1}) read as f(0)). The first
barrier is the grid argmin of f'; V = f / f'(a₁) below it and grows with
slope 1 above. When the one-band V fails the HJB residual, further bands
are spliced in above the last barrier.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, optimize

from band_reinsurance_errors import ArtifactError, PartitionStructureError, SolverError
from candidate_search import CandidatePool
from hjb_operators import (DEFAULT_RESIDUAL_TOL, GridFunction, boundary_consistency, check_bounds, hjb_residual,
                           index_runs, residual_scale, sup_L, sup_Lambda, v0_closed_form)
from reinsurance_contracts import INF, ReinsuranceVector
from thinning_model import ThinningModel, gross_mean, model_fingerprint

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
DEFAULT_BAND_CAP = 8
UNIT_SLOPE_TOL = 1e-8
OVERFLOW_LEVEL = 1e250

REGION_C, REGION_A, REGION_B = 0, 1, 2
REGION_NAMES = {REGION_C: 'C', REGION_A: 'A', REGION_B: 'B'}


def default_x_max(model: ThinningModel) -> float:
    """4·(1+η)μβ/δ, four times the upper estimate of the last barrier"""
    return 4.0 * (1.0 + model.eta) * gross_mean(model) * model.beta_total / model.delta


@dataclass
class BandPolicy:
    """
    Band partition on the lattice plus the contract in force at each point.

    regions[i] is A, B or C for the point x_i; B points lump down to
    anchors[i]; beyond the grid the last B band continues.
    """
    h: float
    regions: np.ndarray
    anchors: np.ndarray
    vectors: List[ReinsuranceVector]
    vector_index: np.ndarray
    p_net: np.ndarray
    model_fingerprint: str = ""
    config_hash: str = ""
    diagnostics: Dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.regions.size - 1

    @property
    def x_max(self) -> float:
        return self.K * self.h

    @property
    def a_indices(self) -> np.ndarray:
        return np.flatnonzero(self.regions == REGION_A)

    @property
    def levels(self) -> List[float]:
        return [float(i * self.h) for i in self.a_indices]

    @property
    def b_intervals(self) -> List[Tuple[float, float]]:
        """Left-open intervals (anchor, end]; the last one ends at infinity"""
        out = []
        for start, end in _runs(np.flatnonzero(self.regions == REGION_B)):
            upper = INF if end == self.K else end * self.h
            out.append((float(self.anchors[start] * self.h), upper))
        return out

    @property
    def c_intervals(self) -> List[Tuple[float, float]]:
        """Intervals [start, end) of accumulation"""
        return [(float(start * self.h), float((end + 1) * self.h))
                for start, end in _runs(np.flatnonzero(self.regions == REGION_C))]

    def vector_at(self, i: int) -> ReinsuranceVector:
        return self.vectors[int(self.vector_index[i])]

    def params(self) -> np.ndarray:
        """(K+1, n, 3) array of (b, M, L) per point and line"""
        table = np.stack([v.params_array() for v in self.vectors])
        return table[self.vector_index]

    def point_p_net(self) -> np.ndarray:
        return self.p_net[self.vector_index]

    def to_dict(self) -> Dict:
        return {
            'tool_version': TOOL_VERSION,
            'model_fingerprint': self.model_fingerprint,
            'config_hash': self.config_hash,
            'h': self.h,
            'x_max': self.x_max,
            'levels': self.levels,
            'b_intervals': [[lo, "inf" if hi == INF else hi] for lo, hi in self.b_intervals],
            'c_intervals': [list(iv) for iv in self.c_intervals],
            'regions': "".join(REGION_NAMES[int(r)] for r in self.regions),
            'anchors': self.anchors.tolist(),
            'vectors': [v.to_dict() for v in self.vectors],
            'p_net': self.p_net.tolist(),
            'vector_index': self.vector_index.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict) -> "BandPolicy":
        try:
            codes = {name: code for code, name in REGION_NAMES.items()}
            return cls(
                h=float(data['h']),
                regions=np.array([codes[c] for c in data['regions']], dtype=np.int8),
                anchors=np.array(data['anchors'], dtype=int),
                vectors=[ReinsuranceVector.from_dict(v) for v in data['vectors']],
                vector_index=np.array(data['vector_index'], dtype=int),
                p_net=np.array(data['p_net'], dtype=float),
                model_fingerprint=data.get('model_fingerprint', ''),
                config_hash=data.get('config_hash', ''),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"malformed policy data: {e}")

    @classmethod
    def from_json(cls, text: str) -> "BandPolicy":
        return cls.from_dict(json.loads(text))


@dataclass
class GridSolution:
    """
    f, fprime: the first-band march (f(0) = 1)
    V, slopes: the final value function and its derivative at each point
    """
    h: float
    f: GridFunction
    fprime: np.ndarray
    V: GridFunction
    slopes: np.ndarray
    argmin_vectors: List[ReinsuranceVector]
    barrier_index: int
    band_count: int = 1
    last_barrier_index: Optional[int] = None
    bands: Optional[BandPolicy] = None
    residual_report: Dict = field(default_factory=dict)
    verified: bool = False

    @property
    def K(self) -> int:
        return self.V.K

    @property
    def x(self) -> np.ndarray:
        return self.V.x

    @property
    def a1(self) -> float:
        return self.barrier_index * self.h

    def to_frame(self) -> pd.DataFrame:
        """value_function.csv columns: x, f, fprime, V, residual, line<k>_<param>"""
        frame = pd.DataFrame({
            'x': self.x,
            'f': self.f.values,
            'fprime': self.fprime,
            'V': self.V.values,
            'residual': self.residual_report.get('residual', np.full(self.K + 1, np.nan)),
        })
        if self.bands is not None:
            params = self.bands.params()
        else:
            params = np.stack([v.params_array() for v in self.argmin_vectors])
        for k in range(params.shape[1]):
            for j, name in enumerate(('b', 'M', 'L')):
                frame[f'line{k}_{name}'] = params[:, k, j]
        return frame


def _runs(indices: np.ndarray) -> List[Tuple[int, int]]:
    runs = []
    for lo, hi in index_runs(list(indices), 1.0):
        runs.append((int(lo), int(hi)))
    return runs


def _march_weights(history: np.ndarray, i: int) -> np.ndarray:
    """[f(x_{i−1}), f(x_{i−1}), f(x_{i−2}), ..., f(0)]: atom at 0 paired with the previous value"""
    if i == 0:
        return history[:1].copy()
    return np.concatenate((history[i - 1:i], history[i - 1::-1]))


def derivative_step(i: int, f_history: np.ndarray, pool: CandidatePool, model: ThinningModel,
                    start: Optional[ReinsuranceVector] = None) -> Tuple[float, ReinsuranceVector]:
    """One step of the march: f'(x_i) and the minimizing contract; start seeds coordinate search"""
    f_history = np.asarray(f_history, dtype=float)
    if i == 0 and f_history.size == 0:
        f_history = np.ones(1)
    if f_history.size < max(i, 1):
        raise SolverError(f"step {i} needs {i} history values, got {f_history.size}")
    prev = f_history[i - 1] if i > 0 else f_history[0]
    level = (model.delta + model.beta_total) * prev
    beta = model.beta_total

    def score(p_net, conv, p_zero):
        return (level - beta * conv) / p_net

    return pool.optimize(_march_weights(f_history, i), score, maximize=False, start=start)


def _march(values: np.ndarray, slopes: np.ndarray, vectors: List, start: int, stop: int,
           pool: CandidatePool, model: ThinningModel, h: float,
           until_slope: Optional[float] = None) -> int:
    """
    March values[start..stop] in place from the history below start.
    Returns the last index marched (earlier when until_slope is reached).
    """
    for i in range(start, stop + 1):
        slope, vector = derivative_step(i, values, pool, model, start=vectors[i - 1] if i > 0 else None)
        slopes[i] = slope
        vectors[i] = vector
        if i > 0:
            values[i] = values[i - 1] + h * slope
        if not np.isfinite(values[i]) or abs(values[i]) > OVERFLOW_LEVEL:
            raise SolverError(f"march overflowed at x={i * h:g}; reduce x_max")
        if until_slope is not None and slope <= until_slope:
            return i
    return stop


def grid_size(h: float, x_max: float) -> int:
    if not h > 0:
        raise SolverError(f"grid step must be positive (h={h})")
    if not x_max > h:
        raise SolverError(f"x_max must exceed h (x_max={x_max}, h={h})")
    return int(round(x_max / h))


def solve_first_band(model: ThinningModel, pool: CandidatePool, h: float,
                     x_max: Optional[float] = None) -> Tuple[float, GridSolution]:
    """March f' over the grid and build the one-band value function"""
    x_max = default_x_max(model) if x_max is None else x_max
    K = grid_size(h, x_max)
    if K > pool.K:
        raise SolverError(f"candidate lattice covers {pool.K} points, grid needs {K}")

    logger.info(f"Marching {K + 1} grid points (h={h:g}, x_max={K * h:g}) with {pool.describe()}")
    f = np.ones(K + 1)
    fprime = np.zeros(K + 1)
    vectors: List[Optional[ReinsuranceVector]] = [None] * (K + 1)
    _march(f, fprime, vectors, 0, K, pool, model, h)

    if np.any(fprime < 0):
        logger.warning(f"f' negative at {int(np.sum(fprime < 0))} grid point(s); min {fprime.min():.3e}")

    a1 = int(np.argmin(fprime))
    if a1 == K:
        raise SolverError(f"f' is minimal at the grid boundary x_max={K * h:g}; increase x_max")

    scale = fprime[a1]
    V = np.empty(K + 1)
    V[:a1 + 1] = f[:a1 + 1] / scale
    V[a1 + 1:] = V[a1] + h * np.arange(1, K - a1 + 1)
    slopes = np.ones(K + 1)
    slopes[:a1 + 1] = fprime[:a1 + 1] / scale
    logger.info(f"First barrier a1={a1 * h:g}, V(0)={V[0]:.6g}")

    solution = GridSolution(h=h, f=GridFunction(h, f), fprime=fprime, V=GridFunction(h, V), slopes=slopes,
                            argmin_vectors=vectors, barrier_index=a1)
    return a1 * h, solution


def _splice_candidates(solution: GridSolution, report: Dict, last: int, stride: int) -> range:
    """b₁ candidates: from just above the last barrier to the end of the first violating run"""
    violating = [i for i in report['violating_indices'] if i > last]
    if not violating:
        return range(0)
    end = violating[0]
    while end + 1 in report['violating_indices']:
        end += 1
    return range(last + 1, end + 1, max(stride, 1))


def extend_bands(partial: GridSolution, model: ThinningModel, pool: CandidatePool,
                 tol: float = DEFAULT_RESIDUAL_TOL, band_cap: int = DEFAULT_BAND_CAP,
                 b1_stride: int = 1, report: Optional[Dict] = None) -> GridSolution:
    """
    Add bands above the last barrier until the HJB residual passes.

    From each b₁ the march is restarted with f₂(b₁) = V(b₁) and V below b₁
    as history; the next barrier a₂ is where f₂' first drops to 1. The pair
    with the largest intercept f₂(a₂) − a₂ is spliced in.
    """
    solution = partial
    h, K = partial.h, partial.K
    report = report if report is not None else hjb_residual(partial.V, pool, model, tol)
    last = partial.last_barrier_index if partial.last_barrier_index is not None else partial.barrier_index

    while not report['passed']:
        if solution.band_count >= band_cap:
            logger.warning(f"Band cap {band_cap} reached with residual {report['max_abs_residual']:.3e}")
            break
        candidates = _splice_candidates(solution, report, last, b1_stride)
        if len(candidates) == 0:
            logger.warning("Residual fails below the last barrier; no band can be added")
            break

        best = None
        for b1 in candidates:
            values = solution.V.values.copy()
            slopes = solution.slopes.copy()
            vectors = list(solution.argmin_vectors)
            a2 = _march(values, slopes, vectors, b1 + 1, K, pool, model, h, until_slope=1.0)
            if slopes[a2] > 1.0:
                continue
            intercept = values[a2] - a2 * h
            if best is None or intercept > best[0]:
                best = (intercept, b1, a2, values, slopes, vectors)

        if best is None:
            logger.warning("No band start reaches unit slope before x_max; keeping the current solution")
            break

        _, b1, a2, values, slopes, vectors = best
        values[a2 + 1:] = values[a2] + h * np.arange(1, K - a2 + 1)
        slopes[a2 + 1:] = 1.0
        logger.info(f"Added band: b={b1 * h:g}, a={a2 * h:g}")
        solution = GridSolution(h=h, f=solution.f, fprime=solution.fprime, V=GridFunction(h, values),
                                slopes=slopes, argmin_vectors=vectors, barrier_index=solution.barrier_index,
                                band_count=solution.band_count + 1, last_barrier_index=a2)
        last = a2
        report = hjb_residual(solution.V, pool, model, tol)

    solution.residual_report = report
    solution.verified = bool(report['passed'])
    return solution


def extract_partition(sol, model: ThinningModel, pool: CandidatePool,
                      tol: float = DEFAULT_RESIDUAL_TOL, strict: bool = True) -> BandPolicy:
    """
    Classify grid points into A, B and C.

    Each maximal run of unit slope starts at an A point (sup Λ ≈ 0 there)
    and continues as B; everything else is C. A is the argmax of Λ at its
    points, C keeps the march's minimizers.

    With strict=False every unit-slope run starts an A point whatever the
    sign of sup Λ, and the failed structure checks are listed under
    diagnostics['structure_warnings'] instead of raised. Only a V with no
    unit-slope run at all still raises.
    """
    if isinstance(sol, GridSolution):
        u, slopes, vectors = sol.V, sol.slopes, list(sol.argmin_vectors)
    else:
        u, slopes, vectors = sol, sol.derivative(), [None] * (sol.K + 1)
    K = u.K
    limit = tol * residual_scale(u, model)

    unit = np.flatnonzero(np.abs(slopes - 1.0) <= UNIT_SLOPE_TOL)
    runs = _runs(unit)
    regions = np.full(K + 1, REGION_C, dtype=np.int8)
    anchors = np.full(K + 1, -1, dtype=int)
    diagnostics = {'runs': [(s * u.h, e * u.h) for s, e in runs], 'tolerance': limit, 'lambda_at_starts': {}}

    if not runs:
        raise PartitionStructureError("band partition invalid: V has no unit-slope run", diagnostics)

    orphans = []
    for start, end in runs:
        value, vector = sup_Lambda(u, start, pool, model)
        diagnostics['lambda_at_starts'][start * u.h] = value
        if value >= -limit or not strict:
            regions[start] = REGION_A
            vectors[start] = vector
            regions[start + 1:end + 1] = REGION_B
            anchors[start + 1:end + 1] = start
        if value < -limit:
            orphans.append(start)

    problems = []
    if len(orphans) == len(runs):
        problems.append("A is empty (sup Λ < 0 at every unit-slope start)")
    elif orphans:
        where = ", ".join(f"x={i * u.h:g}" for i in orphans)
        problems.append(f"payout band without A lower endpoint at {where}")
    if runs[-1][1] != K:
        problems.append("the last band does not reach x_max")
    if problems and strict:
        raise PartitionStructureError(f"band partition invalid: {problems[0]}", diagnostics)
    diagnostics['structure_warnings'] = problems
    diagnostics['best_effort'] = bool(problems)

    for i in np.flatnonzero(regions == REGION_C):
        if vectors[i] is None:
            vectors[i] = sup_Lambda(u, i, pool, model)[1] if i == 0 else sup_L(u, i, pool, model)[1]
    for i in np.flatnonzero(regions == REGION_B):
        vectors[i] = vectors[anchors[i]]

    table: Dict[ReinsuranceVector, int] = {}
    index = np.array([table.setdefault(v, len(table)) for v in vectors], dtype=int)
    distinct = list(table)
    p_net = np.array([pool.builder.premiums_for(v).p_net for v in distinct])
    policy = BandPolicy(h=u.h, regions=regions, anchors=anchors, vectors=distinct, vector_index=index,
                        p_net=p_net, model_fingerprint=model_fingerprint(model), diagnostics=diagnostics)
    logger.info(f"Partition: A={policy.levels}, {len(policy.b_intervals)} payout band(s), "
                f"{len(distinct)} distinct contract(s)")
    return policy


def solve(model: ThinningModel, pool: CandidatePool, h: float, x_max: Optional[float] = None,
          tol: float = DEFAULT_RESIDUAL_TOL, band_cap: int = DEFAULT_BAND_CAP, b1_stride: int = 1) -> GridSolution:
    """First band, band extension, partition and checks"""
    _, partial = solve_first_band(model, pool, h, x_max)
    report = hjb_residual(partial.V, pool, model, tol)
    partial.residual_report = report
    partial.verified = bool(report['passed'])
    if report['passed']:
        solution = partial
    else:
        logger.info(f"One-band residual {report['max_abs_residual']:.3e} exceeds {report['tolerance']:.3e}; "
                    f"extending bands")
        solution = extend_bands(partial, model, pool, tol, band_cap, b1_stride, report)

    try:
        solution.bands = extract_partition(solution, model, pool, tol)
    except PartitionStructureError as e:
        if solution.verified:
            raise
        logger.warning(f"{e}; keeping the marched barriers as a best-effort partition")
        solution.bands = extract_partition(solution, model, pool, tol, strict=False)
    v0, _ = v0_closed_form(model, pool)
    solution.residual_report['boundary'] = boundary_consistency(solution.V.values[0], v0, solution.barrier_index)
    solution.residual_report['bounds'] = check_bounds(solution.V, model)
    solution.residual_report['fprime_nonnegative'] = bool(np.all(solution.fprime >= 0))
    if not solution.verified:
        logger.warning("Solution is best-effort: HJB residual above tolerance")
    return solution


def policy_value(f: np.ndarray, fprime: np.ndarray, V: np.ndarray, policy: BandPolicy) -> GridFunction:
    """
    Value of a stored band policy rebuilt from the march.

    Below the first A level V = f / f'(a₁); payout points then grow with
    slope 1 and accumulation points keep the increments of the solved V.
    """
    f, fprime, V = (np.asarray(a, dtype=float) for a in (f, fprime, V))
    if not f.size == fprime.size == V.size == policy.K + 1:
        raise ArtifactError(f"value function has {f.size} points, policy has {policy.K + 1}")
    if policy.a_indices.size == 0:
        raise ArtifactError("policy has no barrier level")
    first = int(policy.a_indices[0])
    if not fprime[first] > 0:
        raise ArtifactError(f"f' is not positive at the first barrier x={first * policy.h:g}")

    out = np.empty(policy.K + 1)
    out[:first + 1] = f[:first + 1] / fprime[first]
    for i in range(first + 1, policy.K + 1):
        step = policy.h if policy.regions[i] == REGION_B else V[i] - V[i - 1]
        out[i] = out[i - 1] + step
    return GridFunction(policy.h, out)


def refine_study(model: ThinningModel, pool_factory: Callable[[float, int], CandidatePool],
                 h_list: Sequence[float], x_max: float, tol: float = DEFAULT_RESIDUAL_TOL) -> pd.DataFrame:
    """
    Convergence table over decreasing steps: h, a₁, V(0), max residual
    and the change in a₁ from the previous step. The attrs carry the
    monotonicity verdict: each change may exceed the previous one by at most
    the step shared by the two pairs, since a₁ is only resolved to that step.
    """
    h_list = [float(h) for h in h_list]
    if len(h_list) < 2 or any(b > a for a, b in zip(h_list, h_list[1:])):
        raise SolverError(f"h_list must be nonincreasing with at least two entries (got {h_list})")

    rows = []
    for h in h_list:
        pool = pool_factory(h, grid_size(h, x_max))
        a1, solution = solve_first_band(model, pool, h, x_max)
        report = hjb_residual(solution.V, pool, model, tol)
        rows.append({'h': h, 'a1': a1, 'V0': float(solution.V.values[0]),
                     'max_residual': report['max_abs_residual']})
        logger.info(f"h={h:g}: a1={a1:g}, V(0)={rows[-1]['V0']:.6g}")

    table = pd.DataFrame(rows)
    table['a1_change'] = table['a1'].diff().abs()
    changes = table['a1_change'].dropna().to_numpy()
    slack = np.asarray(h_list[1:-1])
    table.attrs['monotone'] = bool(np.all(np.diff(changes) <= slack + 1e-9)) if changes.size > 1 else True
    table.attrs['slack'] = slack.tolist()
    if not table.attrs['monotone']:
        logger.warning("Barrier changes do not shrink monotonically across the h list")
    return table


def ode_oracle_classical(beta: float, delta: float, p: float, rate: float, x_grid) -> pd.DataFrame:
    """
    f and f' for one line with exponential claims and no reinsurance.

    p f' = (δ+β) f − β·I with I(x) = ∫₀ˣ f(y) λe^{−λ(x−y)} dy, which turns
    into the linear system I' = λ(f − I); integrated with f(0) = 1.
    """
    x_grid = np.asarray(x_grid, dtype=float)

    def rhs(x, y):
        f, conv = y
        return [((delta + beta) * f - beta * conv) / p, rate * (f - conv)]

    result = integrate.solve_ivp(rhs, (0.0, float(x_grid.max())), [1.0, 0.0], method='Radau',
                                 t_eval=x_grid, rtol=1e-11, atol=1e-13, dense_output=True)
    if not result.success:
        raise SolverError(f"ODE oracle failed: {result.message}")
    f, conv = result.y
    frame = pd.DataFrame({'x': x_grid, 'f': f, 'fprime': ((delta + beta) * f - beta * conv) / p})
    frame.attrs['dense'] = result.sol
    return frame


def classical_barrier_value(beta: float, delta: float, p: float, rate: float,
                            x_hi: float) -> Tuple[float, Callable[[float], float]]:
    """Optimal barrier a* and the barrier-strategy value V(x) from the ODE oracle"""
    frame = ode_oracle_classical(beta, delta, p, rate, np.linspace(0.0, x_hi, 2001))
    dense = frame.attrs['dense']

    def fprime(x):
        f, conv = dense(x)
        return ((delta + beta) * f - beta * conv) / p

    found = optimize.minimize_scalar(fprime, bounds=(0.0, x_hi), method='bounded', options={'xatol': 1e-10})
    a_star = float(found.x)
    if fprime(0.0) <= fprime(a_star):
        a_star = 0.0
    slope = fprime(a_star)

    def value(x):
        if x <= a_star:
            return float(dense(x)[0] / slope)
        return float(dense(a_star)[0] / slope + x - a_star)

    return a_star, value


def strategy_value_curves(solutions: Dict[str, GridSolution]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Value functions of several contract configurations on a common grid
    and the optimal per-line parameters below each one's last barrier.
    """
    if not solutions:
        raise SolverError("no solutions to tabulate")
    first = next(iter(solutions.values()))
    x = first.x
    values = pd.DataFrame({'x': x})
    rows = []
    for label, sol in solutions.items():
        values[label] = np.interp(x, sol.x, sol.V.values)
        policy = sol.bands
        params = policy.params() if policy is not None else np.stack([v.params_array() for v in sol.argmin_vectors])
        top = policy.a_indices.max() if policy is not None else sol.barrier_index
        for i in range(top + 1):
            for line in range(params.shape[1]):
                b, M, L = params[i, line]
                rows.append({'config': label, 'x': i * sol.h, 'line': line, 'b': b, 'M': M, 'L': L})
    return values, pd.DataFrame(rows)
