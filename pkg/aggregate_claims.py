"""
Aggregate retained-claim law of one event and the premium quantities.

Every event of the merged Poisson stream hits the subset S of lines with
probability w_S; the retained claim of the event is the sum of the
retained claims of the lines in S. The law of that sum is the mixture
over subsets of the per-subset convolutions, with the empty subset an
atom at 0.
"""

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from band_reinsurance_errors import ModelError
from lattice_distribution import LatticeDistribution, convolve_masses, from_truncated, mean as lattice_mean
from reinsurance_contracts import ReinsuranceVector, RetainedLossSpec, pushforward, retained_amount, retained_mean
from thinning_model import ThinningModel, line_claim_intensity, line_claim_weights, validate

logger = logging.getLogger(__name__)

# Net premiums at or below this are treated as infeasible
NET_PREMIUM_EPSILON = 1e-9

# Bounded caches; each entry holds one array of K+1 masses
LAW_CACHE_SIZE = 4096
SUBSET_CACHE_SIZE = 16384


@dataclass(frozen=True, eq=False)
class AggregateLaw:
    """
    Law of Z, the retained claim of one event.

    mean is the exact E(Z) from the severity laws; the lattice mean of
    dist differs from it by at most one bucket.
    """
    dist: LatticeDistribution
    p_claim_zero: float
    mean: float
    beta_total: float

    @property
    def masses(self) -> np.ndarray:
        return self.dist.masses


@dataclass(frozen=True)
class PremiumTriple:
    p_gross: float
    q_R: float
    p_net: float

    @property
    def feasible(self) -> bool:
        return self.p_net > NET_PREMIUM_EPSILON


class AggregateBuilder:
    """
    Memoizing builder of aggregate laws for one model on one lattice.

    Pushforwards are cached per (line, spec) and subset convolutions per
    (subset, specs of the subset's lines), so candidates sharing a line's
    contract share its work. Subset and law caches are LRU maps of
    bounded size.
    """

    def __init__(self, model: ThinningModel, h: float, K: int,
                 law_cache_size: int = LAW_CACHE_SIZE, subset_cache_size: int = SUBSET_CACHE_SIZE):
        violations = validate(model)
        if violations:
            raise ModelError("invalid model: " + "; ".join(violations))
        self.model = model
        self.h = float(h)
        self.K = int(K)
        self.weights: Dict[FrozenSet[int], float] = line_claim_weights(model)
        self.intensity = line_claim_intensity(model)
        self.law_cache_size = int(law_cache_size)
        self.subset_cache_size = int(subset_cache_size)
        self._lock = threading.Lock()
        self._push: Dict[Tuple[int, RetainedLossSpec], LatticeDistribution] = {}
        self._line_means: Dict[Tuple[int, RetainedLossSpec], float] = {}
        self._subsets: "OrderedDict[Tuple[Tuple[int, ...], Tuple[RetainedLossSpec, ...]], np.ndarray]" = OrderedDict()
        self._laws: "OrderedDict[ReinsuranceVector, AggregateLaw]" = OrderedDict()
        self._delta = np.zeros(self.K + 1)
        self._delta[0] = 1.0
        self.gross_mean = self.expected_retained(ReinsuranceVector.identity(model.n))

    def cache_sizes(self) -> Dict[str, int]:
        return {'pushforwards': len(self._push), 'subsets': len(self._subsets), 'laws': len(self._laws)}

    def _lookup(self, cache: dict, key):
        with self._lock:
            value = cache.get(key)
            if value is not None and isinstance(cache, OrderedDict):
                cache.move_to_end(key)
            return value

    def _store(self, cache: dict, key, value, limit: Optional[int] = None):
        with self._lock:
            value = cache.setdefault(key, value)
            if limit is not None:
                cache.move_to_end(key)
                while len(cache) > limit:
                    cache.popitem(last=False)
            return value

    def pushforward(self, line: int, spec: RetainedLossSpec) -> LatticeDistribution:
        key = (line, spec)
        cached = self._push.get(key)
        if cached is None:
            cached = self._store(self._push, key,
                                 pushforward(spec, self.model.severities[line], self.h, self.K))
        return cached

    def line_mean(self, line: int, spec: RetainedLossSpec) -> float:
        """Exact E(R_z(U_z))"""
        key = (line, spec)
        cached = self._line_means.get(key)
        if cached is None:
            cached = self._store(self._line_means, key, retained_mean(spec, self.model.severities[line]))
        return cached

    def expected_retained(self, R: ReinsuranceVector) -> float:
        """E(Z) = Σ_z (λ_z/β)·E(R_z(U_z))"""
        self._check_width(R)
        means = np.array([self.line_mean(z, spec) for z, spec in enumerate(R.specs)])
        return float(self.intensity @ means / self.model.beta_total)

    def premiums_for(self, R: ReinsuranceVector) -> PremiumTriple:
        return _premium_triple(self.model, self.gross_mean, self.expected_retained(R))

    def subset_masses(self, subset: Sequence[int], R: ReinsuranceVector) -> np.ndarray:
        """Truncated masses of Σ_{z∈S} R_z(U_z)"""
        subset = tuple(sorted(subset))
        if not subset:
            return self._delta
        key = (subset, tuple(R.specs[z] for z in subset))
        cached = self._lookup(self._subsets, key)
        if cached is None:
            last = subset[-1]
            head = self.subset_masses(subset[:-1], R)
            tail = self.pushforward(last, R.specs[last]).masses
            if len(subset) == 1:
                result = np.array(tail[:self.K + 1])
            else:
                result = convolve_masses(head, tail)[:self.K + 1]
            result.setflags(write=False)
            if len(subset) == self.model.n:
                # the all-lines subset is never shared between vectors
                return result
            cached = self._store(self._subsets, key, result, self.subset_cache_size)
        return cached

    def law(self, R: ReinsuranceVector, cache: bool = True) -> AggregateLaw:
        """Aggregate law G^R of one event's retained claim; cache=False leaves the law cache untouched"""
        self._check_width(R)
        cached = self._lookup(self._laws, R)
        if cached is not None:
            return cached

        masses = np.zeros(self.K + 1)
        for subset, weight in self.weights.items():
            if weight > 0:
                masses += weight * self.subset_masses(subset, R)

        line_share = self.intensity / self.model.beta_total
        lattice_first_moment = float(sum(line_share[z] * lattice_mean(self.pushforward(z, spec))
                                         for z, spec in enumerate(R.specs)))
        dist = from_truncated(masses, self.h, lattice_first_moment)
        law = AggregateLaw(dist=dist, p_claim_zero=float(dist.masses[0]),
                           mean=self.expected_retained(R), beta_total=self.model.beta_total)
        if not cache:
            return law
        return self._store(self._laws, R, law, self.law_cache_size)

    def line_slice(self, line: int, others: ReinsuranceVector) -> Tuple[np.ndarray, np.ndarray]:
        """
        Split G^R = base + push_line(R_line) ∗ partner, where base and
        partner depend only on the other lines' contracts.
        """
        self._check_width(others)
        base = np.zeros(self.K + 1)
        partner = np.zeros(self.K + 1)
        for subset, weight in self.weights.items():
            if weight <= 0:
                continue
            if line in subset:
                partner += weight * self.subset_masses(subset - {line}, others)
            else:
                base += weight * self.subset_masses(subset, others)
        return base, partner

    def _check_width(self, R: ReinsuranceVector):
        if R.n != self.model.n:
            raise ModelError(f"reinsurance vector covers {R.n} lines, model has {self.model.n}")


def _premium_triple(model: ThinningModel, gross_mean: float, retained: float) -> PremiumTriple:
    p_gross = (1.0 + model.eta) * model.beta_total * gross_mean
    if retained == gross_mean:
        q_R = 0.0
    else:
        q_R = (1.0 + model.eta1) * model.beta_total * (gross_mean - retained)
    return PremiumTriple(p_gross=p_gross, q_R=q_R, p_net=p_gross - q_R)


def build_aggregate(model: ThinningModel, R: ReinsuranceVector, h: float, K: int,
                    builder: Optional[AggregateBuilder] = None) -> AggregateLaw:
    """G^R for one reinsurance vector; pass a builder to share caches across calls"""
    if builder is None:
        builder = AggregateBuilder(model, h, K)
    return builder.law(R)


def premiums(model: ThinningModel, gross: AggregateLaw, net_law: AggregateLaw) -> PremiumTriple:
    """
    Expected-value premiums: p = (1+η)β·E(Y), q_R = (1+η₁)β·(E(Y) − E(Z)),
    p_net = p − q_R.
    """
    if not np.isclose(gross.dist.h, net_law.dist.h, rtol=1e-12, atol=0.0):
        raise ModelError(f"gross and net laws use different steps ({gross.dist.h} vs {net_law.dist.h})")
    triple = _premium_triple(model, gross.mean, net_law.mean)
    if not triple.feasible:
        logger.debug(f"Infeasible candidate: p_net={triple.p_net:.6g} <= {NET_PREMIUM_EPSILON}")
    return triple


def line_slice(builder: AggregateBuilder, line: int, others: ReinsuranceVector) -> Tuple[np.ndarray, np.ndarray]:
    return builder.line_slice(line, others)


def sample_event_claims(model: ThinningModel, R: ReinsuranceVector, events: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Retained claim of independent thinned events, simulated class by class"""
    share = model.beta_array / model.beta_total
    classes = rng.choice(model.m, size=events, p=share)
    hits = rng.random((events, model.n)) < model.p_matrix[classes]
    total = np.zeros(events)
    for z, law in enumerate(model.severities):
        b, M, L = R.specs[z].params
        claims = law.sample(rng, events)
        total += np.where(hits[:, z], retained_amount(b, M, L, claims), 0.0)
    return total


def event_level_cdf(model: ThinningModel, R: ReinsuranceVector, xs, events: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Empirical CDF of one event's retained claim at xs"""
    samples = np.sort(sample_event_claims(model, R, events, rng))
    return np.searchsorted(samples, np.asarray(xs, dtype=float), side='right') / events
