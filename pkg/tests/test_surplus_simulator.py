"""
Tests for the Monte Carlo surplus simulator
"""
import pytest
import numpy as np
from pathlib import Path
import sys

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from aggregate_claims import AggregateBuilder
from band_reinsurance_errors import ArtifactError, ConfigError
from band_solver import grid_size, solve
from candidate_search import make_pool
from reinsurance_contracts import Family, ParameterGrid
from run_config import get_config
from surplus_simulator import SimulationConfig, estimate_value, simulate_path
from thinning_model import classical_model, example1_model

from conftest import CONFIG_DIR

H = 0.05
X_MAX = 15.0


@pytest.fixture(scope="module")
def solved():
    model = classical_model(1.0, 1.0, 0.5, 0.1)
    builder = AggregateBuilder(model, H, grid_size(H, X_MAX))
    pool = make_pool(builder, ParameterGrid(), [Family.IDENTITY], shared=False)
    return model, solve(model, pool, H, X_MAX)


class TestSimulationConfig:
    """Test simulation settings"""

    @pytest.mark.parametrize("kwargs,key", [
        ({'paths': 0}, 'SIM_PATHS'),
        ({'dt': 0.0}, 'SIM_DT'),
        ({'t_max': -1.0}, 'SIM_T_MAX'),
        ({'integrator': 'rk4'}, 'SIM_INTEGRATOR'),
    ])
    def test_invalid_settings(self, kwargs, key):
        """Test each invalid setting names its key"""
        with pytest.raises(ConfigError) as excinfo:
            SimulationConfig(**kwargs)
        assert excinfo.value.key == key

    def test_default_horizon(self, classical):
        """Test the horizon defaults to 40/δ"""
        assert SimulationConfig().horizon(classical) == pytest.approx(400.0)
        assert SimulationConfig(t_max=5.0).horizon(classical) == 5.0


class TestEstimateValue:
    """Test value estimates under a solved band policy"""

    def test_model_mismatch_raises(self, solved):
        """Test a policy solved for another model is refused"""
        _, solution = solved
        with pytest.raises(ArtifactError):
            estimate_value(example1_model(), solution.bands, SimulationConfig(paths=10))

    def test_same_seed_same_result(self, solved):
        """Test results depend only on the seed and batch size"""
        model, solution = solved
        cfg = SimulationConfig(paths=500, seed=3, batch_size=200, threads=1)
        first = estimate_value(model, solution.bands, cfg, [1.0])[0]
        again = estimate_value(model, solution.bands, SimulationConfig(paths=500, seed=3, batch_size=200, threads=4),
                               [1.0])[0]
        assert first.mean_discounted_dividends == again.mean_discounted_dividends
        other = estimate_value(model, solution.bands, SimulationConfig(paths=500, seed=4, batch_size=200), [1.0])[0]
        assert other.mean_discounted_dividends != first.mean_discounted_dividends

    def test_start_above_barrier_lumps(self, solved):
        """Test a start above a₁ pays the excess at once"""
        model, solution = solved
        cfg = SimulationConfig(paths=200, seed=1, t_max=1e-6)
        result = estimate_value(model, solution.bands, cfg, [solution.a1 + 3.0])[0]
        assert result.mean_discounted_dividends >= 3.0 - 1e-9

    def test_result_fields(self, solved):
        """Test summary statistics are well formed"""
        model, solution = solved
        result = estimate_value(model, solution.bands, SimulationConfig(paths=300, seed=2), [0.0])[0]
        assert result.mean_discounted_dividends > 0
        assert 0.0 <= result.ruin_fraction <= 1.0
        assert result.std_error > 0
        assert result.std_error_defined
        assert result.horizon_truncation_bound < 1e-10
        assert set(result.to_dict()) >= {'x0', 'mean_discounted_dividends', 'std_error', 'seed'}

    def test_single_path_has_no_std_error(self, solved):
        """Test one path reports an undefined standard error"""
        model, solution = solved
        result = estimate_value(model, solution.bands, SimulationConfig(paths=1, seed=2), [0.0])[0]
        assert not result.std_error_defined
        assert result.std_error == 0.0

    def test_negative_start_raises(self, solved):
        """Test starting surpluses must be nonnegative"""
        model, solution = solved
        with pytest.raises(ConfigError):
            estimate_value(model, solution.bands, SimulationConfig(paths=10), [-1.0])

    def test_simulate_path(self, solved):
        """Test one path returns its dividends and ruin time"""
        model, solution = solved
        paid, ruin_time = simulate_path(model, solution.bands, SimulationConfig(x0=1.0), np.random.default_rng(9))
        assert paid >= 0.0
        assert ruin_time is None or ruin_time > 0.0

    @pytest.mark.slow
    def test_matches_grid_value(self, solved):
        """Test the Monte Carlo mean at a₁ against V_h"""
        model, solution = solved
        cfg = SimulationConfig(paths=40_000, seed=20240611)
        result = estimate_value(model, solution.bands, cfg, [solution.a1])[0]
        v_h = solution.V.values[solution.barrier_index]
        assert abs(result.mean_discounted_dividends - v_h) <= 4 * result.std_error + 0.05 * v_h

    @pytest.mark.slow
    def test_euler_matches_exact(self, solved):
        """Test the Euler integrator against exact drift"""
        model, solution = solved
        exact = estimate_value(model, solution.bands, SimulationConfig(paths=20_000, seed=5), [1.0])[0]
        euler = estimate_value(model, solution.bands,
                               SimulationConfig(paths=20_000, seed=5, integrator="euler", dt=0.01), [1.0])[0]
        spread = 4 * np.hypot(exact.std_error, euler.std_error)
        assert abs(exact.mean_discounted_dividends - euler.mean_discounted_dividends) <= spread + 0.02


@pytest.mark.slow
class TestExample1Value:
    """Test the simulated value of the three-line example against the grid"""

    @pytest.fixture(scope="class")
    def example1_solved(self):
        config = get_config(CONFIG_DIR / "example1_prop.env")
        model = config.load_model()
        builder = AggregateBuilder(model, config.h, grid_size(config.h, config.x_max))
        pool = make_pool(builder, config.grid, config.families, config.shared, config.candidate_cap, config.refine)
        return model, solve(model, pool, config.h, config.x_max, config.residual_tol, config.band_cap)

    def test_matches_grid_value(self, example1_solved):
        """Test 100k paths at 0, a₁/2 and a₁ land within 3 standard errors plus 2% of V_h"""
        model, solution = example1_solved
        starts = [0.0, solution.a1 / 2, solution.a1]
        results = estimate_value(model, solution.bands, SimulationConfig(paths=100_000, seed=20240611), starts)
        for x0, result in zip(starts, results):
            v_h = solution.V.values[int(round(x0 / solution.h))]
            assert abs(result.mean_discounted_dividends - v_h) <= 3 * result.std_error + 0.02 * v_h
