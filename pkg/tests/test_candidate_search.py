"""
Tests for dense and coordinate candidate pools
"""
import pytest
import numpy as np
from pathlib import Path
import sys

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from aggregate_claims import AggregateBuilder
from band_reinsurance_errors import ContractError, InfeasibleCandidatesError, ModelError
from candidate_search import CoordinatePool, DensePool, make_candidate, make_pool
from reinsurance_contracts import Family, ParameterGrid, ReinsuranceVector, RetainedLossSpec

H = 0.1
K = 200
GRID = ParameterGrid(b_values=(0.5, 0.75, 1.0))


def min_p_net(p_net, conv, p_zero):
    return p_net


def lambda_like(p_net, conv, p_zero):
    # p_R − (δ+β)·u(x) + β·Σ g·u with β = 1, δ = 0.1, u(x) = 3
    return p_net - 1.1 * 3.0 + conv


@pytest.fixture
def builder(example1):
    return AggregateBuilder(example1, H, K)


class TestMakePool:
    """Test pool selection"""

    def test_small_grid_is_dense(self, builder):
        """Test a small product set is scored densely"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False)
        assert isinstance(pool, DensePool)
        assert pool.size() == 27
        assert "dense" in pool.describe()

    def test_cap_switches_to_coordinate(self, builder):
        """Test exceeding the cap falls back to coordinate descent"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False, cap=5)
        assert isinstance(pool, CoordinatePool)
        assert pool.size() == 27

    def test_shared_over_cap_raises(self, builder):
        """Test shared lists above the candidate cap have no coordinate fallback"""
        with pytest.raises(ContractError):
            make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=True, cap=1)

    def test_infeasible_candidates_raise(self, builder):
        """Test a pool with no positive net premium is rejected"""
        ceded = ReinsuranceVector(tuple(RetainedLossSpec.proportional(0.0) for _ in range(3)))
        with pytest.raises(InfeasibleCandidatesError):
            DensePool(builder, [ceded])

    def test_infeasible_candidates_are_dropped(self, builder):
        """Test infeasible vectors are excluded, feasible ones kept"""
        ceded = ReinsuranceVector(tuple(RetainedLossSpec.proportional(0.0) for _ in range(3)))
        pool = DensePool(builder, [ceded, ReinsuranceVector.identity(3)])
        assert pool.size() == 1


class TestSearch:
    """Test dense and coordinate searches agree"""

    def test_separable_score_agrees(self, builder):
        """Test both searches find the smallest net premium"""
        families = [Family.PROPORTIONAL] * 3
        dense = make_pool(builder, GRID, families, shared=False)
        coordinate = make_pool(builder, GRID, families, shared=False, cap=5)
        d_value, d_vector = dense.optimize(np.ones(1), min_p_net, maximize=False)
        c_value, c_vector = coordinate.optimize(np.ones(1), min_p_net, maximize=False)
        assert d_vector == c_vector
        assert c_value == pytest.approx(d_value)
        assert all(s == RetainedLossSpec.proportional(0.5) for s in c_vector.specs)

    def test_coordinate_never_beats_dense(self, builder):
        """Test coordinate descent stays within the exhaustive optimum"""
        families = [Family.PROPORTIONAL] * 3
        weights = 3.0 + H * np.arange(K + 1)[::-1]
        dense = make_pool(builder, GRID, families, shared=False)
        coordinate = make_pool(builder, GRID, families, shared=False, cap=5)
        d_value, _ = dense.optimize(weights, lambda_like, maximize=True)
        c_value, c_vector = coordinate.optimize(weights, lambda_like, maximize=True)
        assert c_value <= d_value + 1e-9
        assert c_value == pytest.approx(dense.evaluate(make_candidate(builder, c_vector), weights, lambda_like))

    def test_single_line_coordinate_is_exhaustive(self, classical):
        """Test one line leaves coordinate descent nothing to miss"""
        builder = AggregateBuilder(classical, H, K)
        grid = ParameterGrid(b_values=(0.25, 0.5, 0.75, 1.0))
        weights = 2.0 + H * np.arange(50)[::-1]
        dense = make_pool(builder, grid, [Family.PROPORTIONAL], shared=False)
        coordinate = make_pool(builder, grid, [Family.PROPORTIONAL], shared=False, cap=1)
        d_value, d_vector = dense.optimize(weights, lambda_like, maximize=True)
        c_value, c_vector = coordinate.optimize(weights, lambda_like, maximize=True)
        assert c_vector == d_vector
        assert c_value == pytest.approx(d_value, rel=1e-9)

    def test_shared_search(self, builder):
        """Test shared candidates keep one contract on every line"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=True)
        assert pool.size() == 3
        _, vector = pool.optimize(np.ones(1), min_p_net, maximize=False)
        assert vector.shared
        assert vector.specs[0] == RetainedLossSpec.proportional(0.5)


class TestRefinement:
    """Test local refinement around the grid optimum"""

    def test_refine_leaves_the_grid(self, classical):
        """Test two halvings move a share below the coarse grid"""
        builder = AggregateBuilder(classical, H, K)
        grid = ParameterGrid(b_values=(0.5, 1.0))
        coarse = make_pool(builder, grid, [Family.PROPORTIONAL], shared=False)
        refined = make_pool(builder, grid, [Family.PROPORTIONAL], shared=False, refine=True)
        _, coarse_vector = coarse.optimize(np.ones(1), min_p_net, maximize=False)
        value, vector = refined.optimize(np.ones(1), min_p_net, maximize=False)
        assert coarse_vector.specs[0] == RetainedLossSpec.proportional(0.5)
        assert vector.specs[0] == RetainedLossSpec.proportional(0.125)
        # p_net = (1+η)·β·E(U)·b when η₁ = η
        assert value == pytest.approx(1.5 * 0.125)


class TestDenseBlocks:
    """Test the dense mass matrix split into row blocks"""

    def test_blocks_cover_every_candidate(self, builder):
        """Test 27 candidates in blocks of four rows"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False, chunk_rows=4)
        assert isinstance(pool, DensePool)
        assert len(pool.blocks) == 7
        assert sum(block.shape[0] for block in pool.blocks) == pool.size() == 27
        assert pool.p_zero.shape == (27,)

    def test_block_size_does_not_change_the_optimum(self, builder):
        """Test one-row blocks and a single block pick the same contract"""
        weights = 3.0 + H * np.arange(K + 1)[::-1]
        families = [Family.PROPORTIONAL] * 3
        whole = make_pool(builder, GRID, families, shared=False)
        rows = make_pool(builder, GRID, families, shared=False, chunk_rows=1)
        assert len(whole.blocks) == 1
        assert len(rows.blocks) == 27
        w_value, w_vector = whole.optimize(weights, lambda_like, maximize=True)
        r_value, r_vector = rows.optimize(weights, lambda_like, maximize=True)
        assert r_vector == w_vector
        assert r_value == pytest.approx(w_value, rel=1e-12)

    def test_dense_pool_leaves_law_cache_alone(self, builder):
        """Test building a dense pool does not fill the builder's law cache"""
        before = builder.cache_sizes()['laws']
        make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False)
        assert builder.cache_sizes()['laws'] == before

    @pytest.mark.slow
    def test_large_shared_grid_stays_dense(self, example1):
        """Test 22501 shared layered contracts on a 1501-point lattice are scored exhaustively"""
        h, K_fine = 0.02, 1500
        builder = AggregateBuilder(example1, h, K_fine)
        values = tuple(np.linspace(0.1, 15.0, 150))
        grid = ParameterGrid(M_values=values, L_values=values)
        pool = make_pool(builder, grid, [Family.LXL] * 3, shared=True, chunk_rows=1024)
        assert isinstance(pool, DensePool)
        assert len(pool.blocks) > 1
        _, vector = pool.optimize(np.ones(1), min_p_net, maximize=False)
        assert vector.shared


class TestSearchState:
    """Test searches depend only on their arguments"""

    def test_coordinate_search_ignores_call_history(self, builder):
        """Test an intervening search does not change the next result"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False, cap=5)
        weights = 3.0 + H * np.arange(K + 1)[::-1]
        first = pool.optimize(weights, lambda_like, maximize=True)
        pool.optimize(np.ones(1), min_p_net, maximize=False)
        again = pool.optimize(weights, lambda_like, maximize=True)
        assert again[1] == first[1]
        assert again[0] == pytest.approx(first[0], rel=1e-12)

    def test_explicit_start(self, builder):
        """Test a start already optimal on every line is kept"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False, cap=5)
        best = ReinsuranceVector(tuple(RetainedLossSpec.proportional(0.5) for _ in range(3)))
        value, vector = pool.optimize(np.ones(1), min_p_net, maximize=False, start=best)
        assert vector == best
        assert value == pytest.approx(builder.premiums_for(best).p_net)

    def test_start_width_is_checked(self, builder):
        """Test a start vector must cover every line"""
        pool = make_pool(builder, GRID, [Family.PROPORTIONAL] * 3, shared=False, cap=5)
        with pytest.raises(ModelError):
            pool.optimize(np.ones(1), min_p_net, maximize=False, start=ReinsuranceVector.identity(2))

    def test_refined_cache_is_bounded(self, classical):
        """Test refinement keeps at most refined_cache_size candidates"""
        builder = AggregateBuilder(classical, H, K)
        grid = ParameterGrid(b_values=(0.25, 0.5, 0.75, 1.0))
        pool = make_pool(builder, grid, [Family.PROPORTIONAL], shared=False, refine=True)
        pool.refined_cache_size = 2
        for scale in (1.0, 2.0, 3.0):
            pool.optimize(scale * (2.0 + H * np.arange(50)[::-1]), lambda_like, maximize=True)
        assert len(pool._refined) <= 2
