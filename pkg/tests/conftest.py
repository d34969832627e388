"""
Pytest configuration and fixtures for Band Reinsurance Manager tests
"""
import pytest
import sys
import os
from pathlib import Path
import tempfile
import shutil

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from aggregate_claims import AggregateBuilder
from candidate_search import make_pool
from reinsurance_contracts import Family, ParameterGrid
from thinning_model import SeverityLaw, classical_model, common_shock_model, example1_model

REPO_ROOT = Path(__file__).parent.parent
CONFIG_DIR = REPO_ROOT / "configs"
MODEL_DIR = REPO_ROOT / "models"

# Single line, Exp(1) claims, β = 1, δ = 0.1, η = 0.5 -> p = 1.5
CLASSICAL_BETA = 1.0
CLASSICAL_RATE = 1.0
CLASSICAL_ETA = 0.5
CLASSICAL_DELTA = 0.1


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files"""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def example1():
    """Three-line thinning model with exponential severities"""
    return example1_model()


@pytest.fixture
def shock_model():
    """Two lines with a common shock (placeholder parameters)"""
    return common_shock_model(
        beta_individual=(8.0, 4.0), beta_shocks=(2.0,), shock_sets=((0, 1),),
        severities=(SeverityLaw.exponential(0.5), SeverityLaw.exponential(3.0)),
        eta=3.0, eta1=3.5, delta=0.3, label="shock",
    )


@pytest.fixture
def classical():
    """Single-line Cramér-Lundberg model with Exp(1) claims"""
    return classical_model(CLASSICAL_BETA, CLASSICAL_RATE, CLASSICAL_ETA, CLASSICAL_DELTA)


@pytest.fixture
def identity_pool_factory():
    """Builds an identity-only candidate pool for a model on a grid"""
    def factory(model, h, K):
        builder = AggregateBuilder(model, h, K)
        return make_pool(builder, ParameterGrid(), [Family.IDENTITY] * model.n, shared=False)
    return factory


@pytest.fixture
def small_config(temp_dir):
    """A quick single-line run config with its model file"""
    model_path = Path(temp_dir) / "classical.env"
    model_path.write_text(
        "LABEL=classical\n"
        "BETA=1\n"
        "P=1\n"
        "SEVERITIES=exp:1\n"
        "ETA=0.5\n"
        "ETA1=0.7\n"
        "DELTA=0.1\n"
    )
    config_path = Path(temp_dir) / "small.env"
    config_path.write_text(
        "MODEL_FILE=classical.env\n"
        "CONTRACT_MODE=independent\n"
        "LINE_FAMILIES=proportional\n"
        "B_GRID=0.5,0.75,1\n"
        "H=0.05\n"
        "X_MAX=15\n"
        "SIM_PATHS=400\n"
        "SIM_SEED=11\n"
        "SIM_X0=0,a1\n"
        f"OUTPUT_DIR={os.path.join(temp_dir, 'out')}\n"
    )
    return config_path
