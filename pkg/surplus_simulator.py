"""
Monte Carlo estimate of expected discounted dividends under a band policy.

Claims are simulated event by event from the thinning model itself (class
draw, per-line Bernoulli hits, severities, retention per the contract of
the pre-claim cell); the aggregate law is never used, so the estimate is
independent of the lattice code.

Between claims the surplus drifts at the net premium of its cell on C,
sits on an A level paying dividends at the net premium rate, and a
surplus landing in B is lumped down to the band's anchor.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from band_reinsurance_errors import ArtifactError, ConfigError
from band_solver import REGION_A, REGION_B, BandPolicy
from reinsurance_contracts import retained_amount
from thinning_model import ThinningModel, gross_mean, model_fingerprint

logger = logging.getLogger(__name__)

INTEGRATORS = ("exact", "euler")
DEFAULT_BATCH = 20_000


@dataclass(frozen=True)
class SimulationConfig:
    paths: int = 10_000
    dt: float = 0.01
    t_max: Optional[float] = None
    seed: int = 0
    x0: float = 0.0
    integrator: str = "exact"
    batch_size: int = DEFAULT_BATCH
    threads: Optional[int] = None

    def __post_init__(self):
        if self.paths < 1:
            raise ConfigError(f"simulation needs at least one path (paths={self.paths})", key='SIM_PATHS')
        if not self.dt > 0:
            raise ConfigError(f"Euler step must be positive (dt={self.dt})", key='SIM_DT')
        if self.t_max is not None and not self.t_max > 0:
            raise ConfigError(f"horizon must be positive (t_max={self.t_max})", key='SIM_T_MAX')
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator '{self.integrator}' (expected {' or '.join(INTEGRATORS)})",
                              key='SIM_INTEGRATOR')
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive", key='SIM_BATCH')

    def horizon(self, model: ThinningModel) -> float:
        return self.t_max if self.t_max is not None else 40.0 / model.delta


@dataclass
class SimulationResult:
    x0: float
    mean_discounted_dividends: float
    std_error: float
    ruin_fraction: float
    mean_ruin_time_given_ruin: Optional[float]
    horizon_truncation_bound: float
    paths: int
    seed: int
    std_error_defined: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class _PolicyTables:
    """Per-grid-point arrays the path integrators read"""

    def __init__(self, policy: BandPolicy, model: ThinningModel):
        self.h = policy.h
        self.K = policy.K
        self.grid = self.h * np.arange(self.K + 1)
        self.regions = policy.regions
        self.anchors = policy.anchors.copy()
        a_indices = policy.a_indices
        self.last_a = int(a_indices.max())
        self.params = policy.params()
        self.rate = policy.point_p_net()
        if np.any(self.rate[self.regions != REGION_B] <= 0):
            raise ArtifactError("policy carries a non-positive net premium outside the payout bands")

        # clock[i]: drift time from 0 to x_i at the cell rates; cell (x_{i-1}, x_i] uses point i
        drift_rate = np.where(self.regions == REGION_B, np.inf, self.rate)
        self.clock = np.concatenate(([0.0], np.cumsum(self.h / drift_rate[1:])))
        # smallest A index at or above each point
        next_a = np.full(self.K + 1, self.last_a)
        upcoming = self.last_a
        for i in range(self.K, -1, -1):
            if self.regions[i] == REGION_A:
                upcoming = i
            next_a[i] = upcoming
        self.next_a = next_a

    def cell(self, x: np.ndarray) -> np.ndarray:
        return np.ceil(x / self.h - 1e-9).astype(int)

    def in_band(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Mask of surpluses inside a payout band and their anchor levels"""
        cell = self.cell(x)
        beyond = cell > self.K
        inside = np.clip(cell, 0, self.K)
        mask = beyond | (self.regions[inside] == REGION_B)
        anchor = np.where(beyond, self.last_a, self.anchors[inside])
        return mask, anchor * self.h

    def on_level(self, x: np.ndarray) -> np.ndarray:
        cell = np.clip(self.cell(x), 0, self.K)
        return (self.regions[cell] == REGION_A) & (np.abs(x - cell * self.h) <= 1e-9 * max(self.h, 1.0))


def _discounted_stream(rate: np.ndarray, t0: np.ndarray, t1: np.ndarray, delta: float) -> np.ndarray:
    """∫_{t0}^{t1} rate·e^{−δs} ds"""
    return rate * (np.exp(-delta * t0) - np.exp(-delta * t1)) / delta


def _lump(tables: _PolicyTables, x, t, paid, delta):
    mask, anchor = tables.in_band(x)
    if mask.any():
        paid[mask] += np.exp(-delta * t[mask]) * (x[mask] - anchor[mask])
        x[mask] = anchor[mask]


def _drift_exact(tables: _PolicyTables, x, t, t_end, paid, delta):
    """Advance every surplus to t_end along the cell rates; barrier time pays at the A rate"""
    cell = np.clip(tables.cell(x), 0, tables.K)
    target = tables.next_a[cell]
    start_clock = np.interp(x, tables.grid, tables.clock)
    t_reach = t + (tables.clock[target] - start_clock)
    reaches = t_reach < t_end

    moving = ~reaches
    x[moving] = np.interp(start_clock[moving] + (t_end[moving] - t[moving]), tables.clock, tables.grid)

    if reaches.any():
        level = target[reaches]
        x[reaches] = level * tables.h
        paid[reaches] += _discounted_stream(tables.rate[level], t_reach[reaches], t_end[reaches], delta)
    t[:] = t_end


def _drift_euler(tables: _PolicyTables, x, t, t_end, paid, delta, dt):
    """Euler steps of dt, snapped to cell boundaries and barrier levels"""
    active = np.flatnonzero(t < t_end)
    while active.size:
        xa, ta, te = x[active], t[active], t_end[active]
        on_level = tables.on_level(xa)

        # on a barrier the remaining time is spent paying dividends
        if on_level.any():
            idx = active[on_level]
            level = np.clip(tables.cell(xa[on_level]), 0, tables.K)
            paid[idx] += _discounted_stream(tables.rate[level], ta[on_level], te[on_level], delta)
            t[idx] = te[on_level]

        idx = active[~on_level]
        if idx.size:
            xm, tm, tem = x[idx], t[idx], t_end[idx]
            upper = np.minimum(np.floor(xm / tables.h + 1e-9).astype(int) + 1, tables.K)
            rate = tables.rate[upper]
            boundary = upper * tables.h
            to_boundary = (boundary - xm) / rate
            step = np.minimum(np.minimum(dt, to_boundary), tem - tm)
            snapped = step >= to_boundary
            x[idx] = np.where(snapped, boundary, xm + rate * step)
            t[idx] = tm + step
        active = active[t[active] < t_end[active]]


def _claims(model: ThinningModel, tables: _PolicyTables, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Retained claim of one event per path, with the contract of the pre-claim cell"""
    count = x.size
    classes = rng.choice(model.m, size=count, p=model.beta_array / model.beta_total)
    hits = rng.random((count, model.n)) < model.p_matrix[classes]
    params = tables.params[np.clip(tables.cell(x), 0, tables.K)]
    total = np.zeros(count)
    for z, law in enumerate(model.severities):
        claim = law.sample(rng, count)
        retained = retained_amount(params[:, z, 0], params[:, z, 1], params[:, z, 2], claim)
        total += np.where(hits[:, z], retained, 0.0)
    return total


def _simulate_batch(model: ThinningModel, tables: _PolicyTables, paths: int, x0: float, t_max: float,
                    integrator: str, dt: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    delta = model.delta
    paid = np.zeros(paths)
    ruin = np.full(paths, np.nan)
    x = np.full(paths, float(x0))
    t = np.zeros(paths)
    _lump(tables, x, t, paid, delta)

    active = np.arange(paths)
    while active.size:
        xa, ta, pa = x[active], t[active], paid[active]
        arrival = ta + rng.exponential(1.0 / model.beta_total, size=active.size)
        t_end = np.minimum(arrival, t_max)
        if integrator == "exact":
            _drift_exact(tables, xa, ta, t_end, pa, delta)
        else:
            _drift_euler(tables, xa, ta, t_end, pa, delta, dt)

        claimed = arrival <= t_max
        if claimed.any():
            xa[claimed] -= _claims(model, tables, xa[claimed], rng)
        ruined = claimed & (xa < 0)
        ruin[active[ruined]] = ta[ruined]

        survivors = claimed & ~ruined
        if survivors.any():
            xs, ts, ps = xa[survivors], ta[survivors], pa[survivors]
            _lump(tables, xs, ts, ps, delta)
            xa[survivors], pa[survivors] = xs, ps

        x[active], t[active], paid[active] = xa, ta, pa
        active = active[survivors]
    return paid, ruin


def _check_pairing(model: ThinningModel, policy: BandPolicy):
    digest = model_fingerprint(model)
    if policy.model_fingerprint and policy.model_fingerprint != digest:
        raise ArtifactError(f"policy was solved for model {policy.model_fingerprint}, not {digest}")
    if policy.params().shape[1] != model.n:
        raise ArtifactError(f"policy covers {policy.params().shape[1]} lines, model has {model.n}")


def simulate_path(model: ThinningModel, policy: BandPolicy, cfg: SimulationConfig,
                  rng: np.random.Generator) -> Tuple[float, Optional[float]]:
    """Discounted dividends of one path and its ruin time (None if it survives t_max)"""
    _check_pairing(model, policy)
    tables = _PolicyTables(policy, model)
    paid, ruin = _simulate_batch(model, tables, 1, cfg.x0, cfg.horizon(model), cfg.integrator, cfg.dt, rng)
    return float(paid[0]), (None if np.isnan(ruin[0]) else float(ruin[0]))


def _summarize(x0: float, paid: np.ndarray, ruin: np.ndarray, bound: float, seed: int) -> SimulationResult:
    paths = paid.size
    ruined = ~np.isnan(ruin)
    defined = paths > 1
    return SimulationResult(
        x0=float(x0),
        mean_discounted_dividends=float(np.sum(paid) / paths),
        std_error=float(np.std(paid, ddof=1) / math.sqrt(paths)) if defined else 0.0,
        ruin_fraction=float(ruined.mean()),
        mean_ruin_time_given_ruin=float(ruin[ruined].mean()) if ruined.any() else None,
        horizon_truncation_bound=bound,
        paths=paths,
        seed=seed,
        std_error_defined=defined,
    )


def estimate_value(model: ThinningModel, policy: BandPolicy, cfg: SimulationConfig,
                   x0_list: Optional[Sequence[float]] = None) -> List[SimulationResult]:
    """
    Mean discounted dividends per starting surplus.

    Paths run in batches, each with its own child of SeedSequence(seed), so
    results depend only on the seed and the batch size.
    """
    _check_pairing(model, policy)
    tables = _PolicyTables(policy, model)
    x0_list = [cfg.x0] if x0_list is None else list(x0_list)
    t_max = cfg.horizon(model)
    premium = (1.0 + model.eta) * gross_mean(model) * model.beta_total
    bound = math.exp(-model.delta * t_max) * (policy.x_max + premium / model.delta)
    threads = cfg.threads or int(os.getenv('BAND_THREADS', os.cpu_count() or 1))

    sizes = [cfg.batch_size] * (cfg.paths // cfg.batch_size)
    if cfg.paths % cfg.batch_size:
        sizes.append(cfg.paths % cfg.batch_size)

    results = []
    for k, x0 in enumerate(x0_list):
        if x0 < 0:
            raise ConfigError(f"initial surplus must be nonnegative (x0={x0})", key='SIM_X0')
        streams = np.random.SeedSequence([cfg.seed, k]).spawn(len(sizes))

        def run(args):
            size, stream = args
            return _simulate_batch(model, tables, size, x0, t_max, cfg.integrator, cfg.dt,
                                   np.random.default_rng(stream))

        with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            batches = list(executor.map(run, zip(sizes, streams)))
        paid = np.concatenate([b[0] for b in batches])
        ruin = np.concatenate([b[1] for b in batches])
        result = _summarize(x0, paid, ruin, bound, cfg.seed)
        logger.info(f"x0={x0:g}: {result.mean_discounted_dividends:.6g} ± {result.std_error:.3g} "
                    f"({cfg.paths} paths, ruin fraction {result.ruin_fraction:.3f})")
        results.append(result)
    return results
