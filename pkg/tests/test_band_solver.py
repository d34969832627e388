"""
Tests for the band solver
"""
import pytest
import numpy as np
from pathlib import Path
import sys

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from aggregate_claims import AggregateBuilder
from band_reinsurance_errors import ArtifactError, PartitionStructureError, SolverError
from band_solver import (REGION_A, REGION_B, REGION_C, BandPolicy, classical_barrier_value, default_x_max,
                         derivative_step, extract_partition, grid_size, ode_oracle_classical, policy_value,
                         refine_study, solve, solve_first_band, strategy_value_curves)
from candidate_search import make_pool
from hjb_operators import GridFunction, boundary_consistency, check_bounds, hjb_residual, v0_closed_form
from reinsurance_contracts import INF, Family, ParameterGrid
from run_config import get_config
from thinning_model import SeverityLaw, ThinningModel, classical_model

from conftest import (CLASSICAL_BETA, CLASSICAL_DELTA, CLASSICAL_ETA, CLASSICAL_RATE, CONFIG_DIR)

H = 0.02
X_MAX = 15.0
# Barrier of the classical model with Exp(1) claims: ln(3.614)/(r₁ − r₂)
CLASSICAL_BARRIER = 2.21


def _identity_pool(model, h, x_max):
    builder = AggregateBuilder(model, h, grid_size(h, x_max))
    return make_pool(builder, ParameterGrid(), [Family.IDENTITY] * model.n, shared=False)


@pytest.fixture(scope="module")
def classical_setup():
    model = classical_model(CLASSICAL_BETA, CLASSICAL_RATE, CLASSICAL_ETA, CLASSICAL_DELTA)
    pool = _identity_pool(model, H, X_MAX)
    return model, pool, solve(model, pool, H, X_MAX)


class TestGrid:
    """Test grid helpers"""

    def test_grid_size(self):
        """Test K = round(x_max / h) and its argument checks"""
        assert grid_size(0.02, 15.0) == 750
        with pytest.raises(SolverError):
            grid_size(0.0, 15.0)
        with pytest.raises(SolverError):
            grid_size(1.0, 0.5)

    def test_default_x_max(self, classical):
        """Test 4(1+η)μβ/δ"""
        assert default_x_max(classical) == pytest.approx(4.0 * 1.5 / 0.1)

    def test_first_step(self, classical):
        """Test f'(0) = (δ+β)/p without an atom at zero"""
        pool = _identity_pool(classical, 0.1, 5.0)
        slope, vector = derivative_step(0, np.ones(1), pool, classical)
        assert slope == pytest.approx(1.1 / 1.5)
        assert vector.is_identity

    def test_lattice_too_short(self, classical):
        """Test the pool lattice must cover the grid"""
        pool = _identity_pool(classical, 0.1, 5.0)
        with pytest.raises(SolverError):
            solve_first_band(classical, pool, 0.1, 10.0)


class TestClassical:
    """Test the single-line exponential case against the ODE oracle"""

    def test_barrier_near_oracle(self, classical_setup):
        """Test a₁ lands near the analytic barrier"""
        _, _, solution = classical_setup
        a_star, _ = classical_barrier_value(1.0, 0.1, 1.5, 1.0, 10.0)
        assert a_star == pytest.approx(CLASSICAL_BARRIER, abs=0.01)
        assert solution.a1 == pytest.approx(a_star, abs=0.2)

    def test_zero_barrier_matches_closed_form(self):
        """Test V(0) = v0 within 1% when heavy discounting puts the barrier at 0"""
        model = classical_model(1.0, 1.0, 0.5, 2.0)
        pool = _identity_pool(model, H, 5.0)
        _, solution = solve_first_band(model, pool, H, 5.0)
        a_star, _ = classical_barrier_value(1.0, 2.0, 1.5, 1.0, 5.0)
        assert a_star == 0.0
        assert solution.barrier_index <= 1
        v0, _ = v0_closed_form(model, pool)
        assert v0 == pytest.approx(1.5 / 3.0)
        report = boundary_consistency(solution.V.values[0], v0, solution.barrier_index)
        assert report['mode'] == 'equality'
        assert report['passed']
        assert solution.V.values[0] == pytest.approx(v0, rel=0.01)

    def test_positive_barrier_uses_lower_bound(self, classical_setup):
        """Test a₁ > 0 reports V(0) ≥ v0"""
        _, _, solution = classical_setup
        boundary = solution.residual_report['boundary']
        assert boundary['mode'] == 'lower_bound'
        assert boundary['ratio'] > 1.0

    def test_value_near_oracle(self, classical_setup):
        """Test V(5) against the barrier-strategy value"""
        _, _, solution = classical_setup
        _, value = classical_barrier_value(1.0, 0.1, 1.5, 1.0, 10.0)
        assert solution.V.values[250] == pytest.approx(value(5.0), rel=0.05)

    def test_error_shrinks_with_h(self, classical):
        """Test a finer step brings V(4.8) closer to the oracle"""
        _, value = classical_barrier_value(1.0, 0.1, 1.5, 1.0, 10.0)
        errors = []
        for h in (0.08, 0.02):
            _, solution = solve_first_band(classical, _identity_pool(classical, h, 10.0), h, 10.0)
            errors.append(abs(solution.V.values[int(round(4.8 / h))] - value(4.8)))
        assert errors[1] < errors[0]

    def test_one_band_verified(self, classical_setup):
        """Test the single barrier passes the residual, bound and boundary checks"""
        _, _, solution = classical_setup
        assert solution.verified
        assert solution.band_count == 1
        report = solution.residual_report
        assert report['bounds']['passed']
        assert report['boundary']['passed']
        assert report['fprime_nonnegative']

    def test_value_slope_one_above_barrier(self, classical_setup):
        """Test V grows with slope 1 above a₁"""
        _, _, solution = classical_setup
        steps = np.diff(solution.V.values[solution.barrier_index:]) / H
        np.testing.assert_allclose(steps, 1.0, atol=1e-9)

    def test_shifted_value_fails_residual(self, classical_setup):
        """Test V + 1 keeps slope ≥ 1 but no longer solves the equation"""
        model, pool, solution = classical_setup
        shifted = GridFunction(H, solution.V.values + 1.0)
        assert check_bounds(shifted, model)['slope_violations'] == []
        assert not hjb_residual(shifted, pool, model)['passed']

    @pytest.mark.slow
    def test_fine_grid_matches_ode(self, classical):
        """Test f/f'(a₁) at x=5 with h=5e-4 against the ODE oracle"""
        h = 5e-4
        _, solution = solve_first_band(classical, _identity_pool(classical, h, 6.0), h, 6.0)
        a_star, value = classical_barrier_value(1.0, 0.1, 1.5, 1.0, 10.0)
        assert solution.a1 == pytest.approx(a_star, abs=0.02)
        assert solution.V.values[10000] == pytest.approx(value(5.0), rel=1e-3)

    def test_ode_oracle_initial_slope(self):
        """Test the oracle starts from f(0)=1, f'(0)=(δ+β)/p"""
        frame = ode_oracle_classical(1.0, 0.1, 1.5, 1.0, np.linspace(0.0, 3.0, 31))
        assert frame['f'].iloc[0] == pytest.approx(1.0)
        assert frame['fprime'].iloc[0] == pytest.approx(1.1 / 1.5)


class TestPartition:
    """Test band partition extraction"""

    def test_single_barrier_partition(self, classical_setup):
        """Test C below a₁, A at a₁ and B above"""
        _, _, solution = classical_setup
        policy = solution.bands
        a1 = solution.barrier_index
        assert policy.levels == [pytest.approx(solution.a1)]
        assert policy.regions[a1] == REGION_A
        assert np.all(policy.regions[:a1] == REGION_C)
        assert np.all(policy.regions[a1 + 1:] == REGION_B)
        assert policy.c_intervals == [(0.0, pytest.approx(solution.a1))]
        assert policy.b_intervals == [(pytest.approx(solution.a1), INF)]

    def test_no_barrier_raises(self, classical_setup):
        """Test a unit-slope run without sup Λ ≈ 0 at its start"""
        model, pool, _ = classical_setup
        u = GridFunction(H, 5.0 + H * np.arange(grid_size(H, X_MAX) + 1))
        with pytest.raises(PartitionStructureError) as excinfo:
            extract_partition(u, model, pool)
        assert 'runs' in excinfo.value.diagnostics

    def test_band_must_reach_x_max(self, classical_setup):
        """Test a value function ending in accumulation is rejected"""
        model, pool, solution = classical_setup
        values = solution.V.values.copy()
        values[-5:] = values[-6] + 2.0 * H * np.arange(1, 6)
        with pytest.raises(PartitionStructureError):
            extract_partition(GridFunction(H, values), model, pool)

    def test_best_effort_strict_false(self, classical_setup):
        """Test strict=False keeps an A point and records what failed"""
        model, pool, _ = classical_setup
        u = GridFunction(H, 5.0 + H * np.arange(grid_size(H, X_MAX) + 1))
        policy = extract_partition(u, model, pool, strict=False)
        assert policy.levels == [0.0]
        assert policy.diagnostics['best_effort']
        assert policy.diagnostics['structure_warnings']

    def test_coarse_grid_keeps_best_effort_partition(self, classical):
        """Test h=0.1 fails the residual but still returns the first barrier as A"""
        pool = _identity_pool(classical, 0.1, 10.0)
        solution = solve(classical, pool, 0.1, 10.0)
        assert not solution.verified
        assert solution.bands is not None
        assert solution.a1 in solution.bands.levels
        assert solution.bands.regions[solution.barrier_index] == REGION_A
        assert np.all(solution.bands.regions[solution.barrier_index + 1:] == REGION_B)

    def test_policy_json_round_trip(self, classical_setup):
        """Test policy.json keeps levels, regions and contracts"""
        _, _, solution = classical_setup
        policy = solution.bands
        restored = BandPolicy.from_json(policy.to_json())
        assert restored.levels == policy.levels
        np.testing.assert_array_equal(restored.regions, policy.regions)
        assert restored.vectors == policy.vectors
        assert restored.model_fingerprint == policy.model_fingerprint
        assert policy.to_dict()['b_intervals'][-1][1] == "inf"

    def test_malformed_policy_raises(self):
        """Test a policy missing fields is an artifact error"""
        with pytest.raises(ArtifactError):
            BandPolicy.from_dict({'h': 0.1})

    def test_to_frame_columns(self, classical_setup):
        """Test value_function.csv columns"""
        _, _, solution = classical_setup
        frame = solution.to_frame()
        assert list(frame.columns) == ['x', 'f', 'fprime', 'V', 'residual', 'line0_b', 'line0_M', 'line0_L']
        assert len(frame) == grid_size(H, X_MAX) + 1


class TestPolicyValue:
    """Test rebuilding V from a stored policy"""

    def test_reproduces_solved_value(self, classical_setup):
        """Test the stored columns and regions give back V"""
        _, _, solution = classical_setup
        rebuilt = policy_value(solution.f.values, solution.fprime, solution.V.values, solution.bands)
        np.testing.assert_allclose(rebuilt.values, solution.V.values, rtol=1e-10)

    def test_moved_barrier_breaks_residual(self, classical_setup):
        """Test a barrier moved five units up no longer solves the equation"""
        model, pool, solution = classical_setup
        data = solution.bands.to_dict()
        a1 = solution.barrier_index
        shift = int(round(5.0 / H))
        data['regions'] = 'C' * (a1 + shift) + 'A' + 'B' * (len(data['regions']) - a1 - shift - 1)
        data['anchors'] = [-1] * (a1 + shift + 1) + [a1 + shift] * (len(data['anchors']) - a1 - shift - 1)
        moved = BandPolicy.from_dict(data)
        u = policy_value(solution.f.values, solution.fprime, solution.V.values, moved)
        assert not hjb_residual(u, pool, model)['passed']

    def test_size_mismatch_raises(self, classical_setup):
        """Test columns must match the policy grid"""
        _, _, solution = classical_setup
        with pytest.raises(ArtifactError):
            policy_value(solution.f.values[:-1], solution.fprime[:-1], solution.V.values[:-1], solution.bands)


class TestStudies:
    """Test convergence and plot tables"""

    def test_refine_study(self, classical, identity_pool_factory):
        """Test one row per step and the change column"""
        table = refine_study(classical, lambda h, K: identity_pool_factory(classical, h, K), [0.08, 0.04, 0.02], 8.0)
        assert list(table.columns) == ['h', 'a1', 'V0', 'max_residual', 'a1_change']
        assert len(table) == 3
        assert np.isnan(table['a1_change'].iloc[0])
        assert table.attrs['slack'] == pytest.approx([0.04])
        # a₁ = 2.48, 2.36, 2.28
        assert table.attrs['monotone']
        assert table['a1_change'].iloc[2] < table['a1_change'].iloc[1]

    def test_refine_study_needs_decreasing_steps(self, classical, identity_pool_factory):
        """Test the h list is validated"""
        with pytest.raises(SolverError):
            refine_study(classical, lambda h, K: identity_pool_factory(classical, h, K), [0.02, 0.04], 8.0)

    def test_strategy_value_curves(self, classical_setup):
        """Test value and contract tables for several solutions"""
        _, _, solution = classical_setup
        values, strategies = strategy_value_curves({'first': solution, 'second': solution})
        assert list(values.columns) == ['x', 'first', 'second']
        assert set(strategies['config']) == {'first', 'second'}
        assert strategies['x'].max() == pytest.approx(solution.a1)
        with pytest.raises(SolverError):
            strategy_value_curves({})


def _two_point_model():
    return ThinningModel(beta=(5.0,), p=((1.0,),), severities=(SeverityLaw.empirical(1.0, (0.0, 0.8, 0.0, 0.2)),),
                         eta=0.1, eta1=0.1, delta=0.1, label="two_point")


@pytest.fixture(scope="module")
def two_point_setup():
    model = _two_point_model()
    pool = _identity_pool(model, 0.05, 30.0)
    return model, pool, solve(model, pool, 0.05, 30.0, tol=5e-3, band_cap=3)


class TestBandExtension:
    """Test a second band on claims of 1 or 3"""

    def test_one_band_fails_residual(self, two_point_setup):
        """Test the barrier at zero alone leaves a residual above tolerance"""
        model, pool, _ = two_point_setup
        _, partial = solve_first_band(model, pool, 0.05, 30.0)
        report = hjb_residual(partial.V, pool, model, 5e-3)
        assert partial.barrier_index == 0
        assert not report['passed']
        assert report['violating_intervals']

    def test_two_bands_pass(self, two_point_setup):
        """Test the splice adds one band and the residual then passes"""
        _, _, solution = two_point_setup
        assert solution.band_count == 2
        assert solution.verified
        levels = solution.bands.levels
        assert levels[0] == pytest.approx(0.0, abs=0.1)
        assert levels[1] == pytest.approx(5.95, abs=0.1)
        b_lo, b_hi = solution.bands.b_intervals[0]
        assert b_lo == pytest.approx(0.0, abs=0.1)
        assert b_hi == pytest.approx(0.45, abs=0.1)

    def test_value_is_v0_at_zero(self, two_point_setup):
        """Test V(0) equals p/(δ+β) when the first barrier sits at 0"""
        model, pool, solution = two_point_setup
        boundary = solution.residual_report['boundary']
        assert boundary['mode'] == 'equality'
        assert boundary['passed']
        v0, _ = v0_closed_form(model, pool)
        assert v0 == pytest.approx(1.1 * 5.0 * 1.4 / 5.1)
        assert solution.V.values[0] == pytest.approx(v0, rel=0.01)

    def test_value_slope_one_above_last_barrier(self, two_point_setup):
        """Test V has slope 1 above the last barrier"""
        _, _, solution = two_point_setup
        slopes = solution.V.derivative()
        upper = solution.bands.a_indices[-1]
        np.testing.assert_allclose(slopes[upper + 1:], 1.0, atol=1e-8)

    def test_config_file_solves_the_same(self, two_point_setup):
        """Test the bundled config reproduces the fixture"""
        _, _, expected = two_point_setup
        config = get_config(CONFIG_DIR / "two_point_bands.env")
        model = config.load_model()
        builder = AggregateBuilder(model, config.h, grid_size(config.h, config.x_max))
        pool = make_pool(builder, config.grid, config.families, config.shared, config.candidate_cap, config.refine)
        solution = solve(model, pool, config.h, config.x_max, config.residual_tol, config.band_cap)
        assert solution.bands.levels == pytest.approx(expected.bands.levels)


@pytest.mark.slow
class TestAcceptance:
    """Full solves of the bundled fixtures"""

    def test_gerber_two_bands(self):
        """Test Gamma(2,1) claims need a second band once the tolerance is tight"""
        config = get_config(CONFIG_DIR / "gerber_two_band.env")
        model = config.load_model()
        pool = _identity_pool(model, config.h, config.x_max)
        solution = solve(model, pool, config.h, config.x_max, config.residual_tol, config.band_cap,
                         config.b1_stride)
        levels = solution.bands.levels
        assert solution.band_count == 2
        assert solution.verified
        assert levels[0] == pytest.approx(0.0, abs=0.02)
        assert levels[1] == pytest.approx(10.22, abs=0.1)
        # b1 converges at first order in h (1.34 at h=0.02, 1.57 at h=0.01)
        assert solution.bands.b_intervals[0][1] == pytest.approx(1.80, abs=0.3)

    def test_gerber_default_tolerance_keeps_one_band(self):
        """Test the default tolerance accepts the single barrier at 0"""
        model = ThinningModel(beta=(10.0,), p=((1.0,),), severities=(SeverityLaw.gamma(2.0, 1.0),),
                              eta=0.07, eta1=0.07, delta=0.1, label="gerber")
        pool = _identity_pool(model, 0.02, 20.0)
        solution = solve(model, pool, 0.02, 20.0)
        assert solution.band_count == 1
        assert solution.residual_report['max_abs_residual'] < solution.residual_report['tolerance']

    @pytest.mark.parametrize("config_name, barrier", [
        ("example1_prop.env", 17.80),
        ("example1_xl.env", 16.24),
        ("example1_prop_shared.env", 18.10),
        ("example1_xl_shared.env", 16.26),
    ])
    def test_example1_barrier(self, config_name, barrier):
        """Test the first barrier of each contract configuration of the three-line example"""
        config = get_config(CONFIG_DIR / config_name)
        model = config.load_model()
        builder = AggregateBuilder(model, config.h, grid_size(config.h, config.x_max))
        pool = make_pool(builder, config.grid, config.families, config.shared, config.candidate_cap, config.refine)
        solution = solve(model, pool, config.h, config.x_max, config.residual_tol, config.band_cap)
        assert solution.a1 == pytest.approx(barrier, abs=0.1)

    def test_line_one_alone_matches_analytic_barrier(self):
        """Test line 1 of the example on its own against the exponential-claims barrier"""
        model = classical_model(8.0, 0.5, 3.0, 0.3, eta1=3.5)
        pool = _identity_pool(model, H, 30.0)
        solution = solve(model, pool, H, 30.0)
        a_star, _ = classical_barrier_value(8.0, 0.3, 64.0, 0.5, 30.0)
        assert a_star == pytest.approx(17.75, abs=0.05)
        assert solution.a1 == pytest.approx(a_star, abs=0.1)

    def test_example1_refine_study_is_monotone(self):
        """Test the barrier settles as h halves on the per-line proportional configuration"""
        config = get_config(CONFIG_DIR / "example1_prop.env")
        model = config.load_model()

        def pool_factory(h, K):
            builder = AggregateBuilder(model, h, K)
            return make_pool(builder, config.grid, config.families, config.shared, config.candidate_cap,
                             config.refine)

        table = refine_study(model, pool_factory, [0.08, 0.04, 0.02], config.x_max)
        assert table.attrs['monotone']
        assert table['a1'].iloc[-1] == pytest.approx(17.80, abs=0.1)

    @pytest.mark.parametrize("family, grid", [
        (Family.PROPORTIONAL, ParameterGrid(b_values=tuple(np.linspace(0.125, 1.0, 8)))),
        (Family.XL, ParameterGrid(M_values=tuple(np.linspace(0.5, 4.0, 7)) + (INF,))),
    ])
    def test_per_line_contracts_dominate_shared(self, example1, family, grid):
        """Test V with one contract per line is at least V with a shared contract"""
        h, x_max = 0.05, 30.0
        builder = AggregateBuilder(example1, h, grid_size(h, x_max))
        families = [family] * example1.n
        per_line = solve(example1, make_pool(builder, grid, families, shared=False), h, x_max)
        shared = solve(example1, make_pool(builder, grid, families, shared=True), h, x_max)
        assert np.all(per_line.V.values >= shared.V.values - 1e-9)
