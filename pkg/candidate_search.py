"""
Candidate pools for the inner optimization over reinsurance vectors.

Every operator in the scheme scores a candidate through three numbers:
its net premium, the dot product of its aggregate masses with a weight
vector built from the value history, and its atom at zero. A pool turns
a scoring function of those arrays into the best candidate.

DensePool scores every candidate, with the aggregate masses held in row
blocks. CoordinatePool handles product sets above the candidate cap,
optimizing one line at a time with the other lines held fixed.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from aggregate_claims import NET_PREMIUM_EPSILON, AggregateBuilder, AggregateLaw, PremiumTriple
from band_reinsurance_errors import ContractError, InfeasibleCandidatesError, ModelError
from reinsurance_contracts import (DEFAULT_CANDIDATE_CAP, Family, ParameterGrid, ReinsuranceVector,
                                   RetainedLossSpec, count_candidates, enumerate_candidates, line_candidates,
                                   refine_candidates)

logger = logging.getLogger(__name__)

# Rows per block of the dense mass matrix
DENSE_CHUNK_ROWS = 4096
COORDINATE_SWEEPS = 3
SLICE_CACHE_SIZE = 128
REFINED_CACHE_SIZE = 1024

# score(p_net, conv, p_zero) -> one score per candidate
ScoreFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Candidate:
    vector: ReinsuranceVector
    law: AggregateLaw
    premium: PremiumTriple

    @property
    def masses(self) -> np.ndarray:
        return self.law.masses

    @property
    def p_net(self) -> float:
        return self.premium.p_net

    @property
    def p_zero(self) -> float:
        return self.law.p_claim_zero


def make_candidate(builder: AggregateBuilder, vector: ReinsuranceVector) -> Candidate:
    return Candidate(vector=vector, law=builder.law(vector), premium=builder.premiums_for(vector))


def _pick(scores: np.ndarray, maximize: bool) -> int:
    # first index on ties
    return int(np.argmax(scores) if maximize else np.argmin(scores))


def _better(new: float, old: float, maximize: bool) -> bool:
    return new > old if maximize else new < old


class CandidatePool:
    """
    Shared refinement logic; subclasses provide the coarse search.

    A search depends only on its arguments: the optional start vector is
    where coordinate descent begins, and pools that search exhaustively
    ignore it.
    """

    def __init__(self, builder: AggregateBuilder, spacings: Optional[Dict[Family, float]] = None,
                 refine: bool = False, refined_cache_size: int = REFINED_CACHE_SIZE):
        self.builder = builder
        self.spacings = spacings or {}
        self.refine = refine
        self.refined_cache_size = int(refined_cache_size)
        self._refined: "OrderedDict[ReinsuranceVector, Optional[Candidate]]" = OrderedDict()

    @property
    def K(self) -> int:
        return self.builder.K

    @property
    def h(self) -> float:
        return self.builder.h

    def size(self) -> int:
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError

    def search(self, weights: np.ndarray, score: ScoreFunction, maximize: bool,
               start: Optional[ReinsuranceVector] = None) -> Tuple[float, ReinsuranceVector]:
        raise NotImplementedError

    def optimize(self, weights: np.ndarray, score: ScoreFunction, maximize: bool = False,
                 start: Optional[ReinsuranceVector] = None) -> Tuple[float, ReinsuranceVector]:
        """Best score and its vector; weights[j] multiplies the mass at j*h"""
        weights = np.asarray(weights, dtype=float)
        if start is not None and start.n != self.builder.model.n:
            raise ModelError(f"start vector covers {start.n} lines, model has {self.builder.model.n}")
        value, vector = self.search(weights, score, maximize, start)
        if self.refine:
            value, vector = self._refine(weights, score, maximize, value, vector)
        return value, vector

    def _candidate(self, vector: ReinsuranceVector) -> Optional[Candidate]:
        if vector in self._refined:
            self._refined.move_to_end(vector)
            return self._refined[vector]
        candidate = make_candidate(self.builder, vector)
        candidate = candidate if candidate.premium.feasible else None
        self._refined[vector] = candidate
        while len(self._refined) > self.refined_cache_size:
            self._refined.popitem(last=False)
        return candidate

    def evaluate(self, candidate: Candidate, weights: np.ndarray, score: ScoreFunction) -> float:
        conv = np.array([candidate.masses[:weights.size] @ weights])
        return float(score(np.array([candidate.p_net]), conv, np.array([candidate.p_zero]))[0])

    def _refine(self, weights, score, maximize, value, vector):
        """Two halvings of the grid spacing around the incumbent, one line at a time"""
        lines = [0] if vector.shared else range(vector.n)
        for level in (1, 2):
            for z in lines:
                spec = vector.specs[z]
                spacing = self.spacings.get(spec.family, 0.0)
                for neighbour in refine_candidates(spec, spacing, level):
                    trial = vector.replace(z, neighbour)
                    candidate = self._candidate(trial)
                    if candidate is None:
                        continue
                    trial_value = self.evaluate(candidate, weights, score)
                    if _better(trial_value, value, maximize):
                        value, vector = trial_value, trial
        return value, vector


class DensePool(CandidatePool):
    """
    Exhaustive search. Aggregate masses live in blocks of chunk_rows
    rows, built once without going through the builder's law cache.
    """

    def __init__(self, builder: AggregateBuilder, vectors: Sequence[ReinsuranceVector],
                 chunk_rows: int = DENSE_CHUNK_ROWS, **kwargs):
        super().__init__(builder, **kwargs)
        vectors = list(vectors)
        premiums = [builder.premiums_for(v) for v in vectors]
        keep = [k for k, premium in enumerate(premiums) if premium.feasible]
        dropped = len(vectors) - len(keep)
        if dropped:
            logger.info(f"Excluded {dropped} of {len(vectors)} candidates with p_net <= {NET_PREMIUM_EPSILON}")
        if not keep:
            raise InfeasibleCandidatesError("no reinsurance candidate has a positive net premium")

        self.vectors: List[ReinsuranceVector] = [vectors[k] for k in keep]
        self.p_net = np.array([premiums[k].p_net for k in keep])
        self.chunk_rows = max(int(chunk_rows), 1)
        self.blocks: List[np.ndarray] = []
        for first in range(0, len(self.vectors), self.chunk_rows):
            rows = self.vectors[first:first + self.chunk_rows]
            self.blocks.append(np.vstack([builder.law(v, cache=False).masses for v in rows]))
        self.p_zero = np.concatenate([block[:, 0] for block in self.blocks])
        megabytes = sum(block.nbytes for block in self.blocks) / 2 ** 20
        logger.debug(f"Dense candidate pool: {len(self.vectors)} candidates x {builder.K + 1} lattice points "
                     f"in {len(self.blocks)} block(s), {megabytes:.1f} MiB")

    def size(self) -> int:
        return len(self.vectors)

    def describe(self) -> str:
        return f"dense pool of {self.size()} candidates"

    def candidate(self, k: int) -> Candidate:
        return make_candidate(self.builder, self.vectors[k])

    def search(self, weights, score, maximize, start=None):
        conv = np.concatenate([block[:, :weights.size] @ weights for block in self.blocks])
        scores = score(self.p_net, conv, self.p_zero)
        best = _pick(scores, maximize)
        return float(scores[best]), self.vectors[best]


class CoordinatePool(CandidatePool):
    """
    Product candidate set searched by coordinate descent.

    For line z with the others fixed, G^R = base + push_z(R_z) ∗ partner,
    so all of line z's candidates are scored from one batched FFT. Each
    search starts from the given vector, or from full retention.
    """

    def __init__(self, builder: AggregateBuilder, per_line: Sequence[Sequence[RetainedLossSpec]],
                 sweeps: int = COORDINATE_SWEEPS, **kwargs):
        super().__init__(builder, **kwargs)
        self.per_line = [list(specs) for specs in per_line]
        self._index = [{spec: k for k, spec in enumerate(specs)} for specs in self.per_line]
        self.sweeps = sweeps
        model = builder.model
        self._loading = (1.0 + model.eta1) * model.beta_total
        self._p_gross = (1.0 + model.eta) * model.beta_total * builder.gross_mean
        self._share = builder.intensity / model.beta_total
        self._line_means = [np.array([builder.line_mean(z, s) for s in specs])
                            for z, specs in enumerate(self.per_line)]
        self._push = [np.vstack([builder.pushforward(z, s).masses for s in specs])
                      for z, specs in enumerate(self.per_line)]
        self._slices: "OrderedDict[Tuple, np.ndarray]" = OrderedDict()

    def size(self) -> int:
        return count_candidates(self.per_line, shared=False)

    def describe(self) -> str:
        return f"coordinate pool over {self.size()} product candidates ({self.sweeps} sweeps)"

    def _line_matrix(self, z: int, vector: ReinsuranceVector) -> np.ndarray:
        key = (z,) + tuple(s for k, s in enumerate(vector.specs) if k != z)
        cached = self._slices.get(key)
        if cached is not None:
            self._slices.move_to_end(key)
            return cached

        base, partner = self.builder.line_slice(z, vector)
        size = 2 * (self.K + 1)
        spectrum = fft.rfft(self._push[z], n=size, axis=1) * fft.rfft(partner, n=size)[None, :]
        matrix = np.clip(fft.irfft(spectrum, n=size, axis=1)[:, :self.K + 1], 0.0, None) + base[None, :]
        self._slices[key] = matrix
        if len(self._slices) > SLICE_CACHE_SIZE:
            self._slices.popitem(last=False)
        return matrix

    def _line_p_net(self, z: int, vector: ReinsuranceVector) -> np.ndarray:
        others = sum(self._share[k] * self.builder.line_mean(k, s)
                     for k, s in enumerate(vector.specs) if k != z)
        retained = others + self._share[z] * self._line_means[z]
        return self._p_gross - self._loading * (self.builder.gross_mean - retained)

    def search(self, weights, score, maximize, start=None):
        vector = start if start is not None else ReinsuranceVector.identity(self.builder.model.n)
        value = None
        for _ in range(self.sweeps):
            changed = False
            for z in range(len(self.per_line)):
                matrix = self._line_matrix(z, vector)
                p_net = self._line_p_net(z, vector)
                scores = score(p_net, matrix[:, :weights.size] @ weights, matrix[:, 0])
                scores = np.where(p_net > NET_PREMIUM_EPSILON, scores, -np.inf if maximize else np.inf)
                best = _pick(scores, maximize)
                if not np.isfinite(scores[best]):
                    continue
                # the current spec stays unless another is strictly better
                current = self._index[z].get(vector.specs[z])
                if current is not None and np.isfinite(scores[current]) \
                        and not _better(scores[best], scores[current], maximize):
                    best = current
                if self.per_line[z][best] != vector.specs[z]:
                    vector = vector.replace(z, self.per_line[z][best])
                    changed = True
                value = float(scores[best])
            if not changed:
                break

        if value is None:
            raise InfeasibleCandidatesError("no reinsurance candidate has a positive net premium")
        return value, vector


def make_pool(builder: AggregateBuilder, grid, families: Sequence[Family], shared: bool,
              cap: int = DEFAULT_CANDIDATE_CAP, refine: bool = False,
              chunk_rows: int = DENSE_CHUNK_ROWS) -> CandidatePool:
    """Dense pool whenever the candidate count fits the cap, coordinate search otherwise"""
    per_line = line_candidates(grid, families)
    total = count_candidates(per_line, shared)
    spacings = _family_spacings(grid)

    if total <= cap:
        vectors = enumerate_candidates(grid, families, shared, cap=cap)
        pool = DensePool(builder, vectors, chunk_rows=chunk_rows, spacings=spacings, refine=refine)
    else:
        if shared:
            raise ContractError(f"shared candidate list of {total} exceeds the candidate cap {cap}")
        logger.info(f"{total} product candidates exceed the cap {cap}; using coordinate descent")
        pool = CoordinatePool(builder, per_line, spacings=spacings, refine=refine)

    logger.info(f"Candidate search: {pool.describe()}")
    return pool


def _family_spacings(grid) -> Dict[Family, float]:
    first = grid[0] if isinstance(grid, (list, tuple)) else grid
    if not isinstance(first, ParameterGrid):
        return {}
    return {
        Family.PROPORTIONAL: first.spacing('b_values'),
        Family.XL: first.spacing('M_values'),
        Family.LXL: first.spacing('M_values'),
    }
