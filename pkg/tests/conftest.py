import numpy as np
import pytest

from newtonpod.mesh_fem import PdeParams, assemble_operators, build_grid
from newtonpod.newton_pipeline import linearize
from newtonpod.snapshot_gen import SnapshotPipelineConfig, run_pipeline
from newtonpod.theta_stepper import TimeGrid, compute_steady_state


class Setup:
    """Operators, steady state and linearization for one grid."""

    def __init__(self, cells, K_steps, dimension=2, u_bar=2.0, pipeline=False, **params):
        self.grid = build_grid(dimension, cells)
        self.ops = assemble_operators(self.grid)
        self.params = PdeParams(K_steps=K_steps, **params)
        self.tg = TimeGrid.from_params(self.params)
        self.u_bar = u_bar
        self.ybar = compute_steady_state(self.ops, self.params, u_bar)
        self.lin = linearize(self.ops, self.params, self.ybar, self.tg)
        self.result = run_pipeline(self.lin, self.ybar, SnapshotPipelineConfig()) if pipeline else None


@pytest.fixture(scope="session")
def small():
    """8x8 cells (49 dofs), 16 steps, with the basis pipeline."""
    return Setup(8, 16, pipeline=True)


@pytest.fixture(scope="session")
def medium():
    """12x12 cells (121 dofs), 65 steps."""
    return Setup(12, 65, pipeline=True)


@pytest.fixture(scope="session")
def desk():
    """32x32 cells (961 dofs), 65 steps: the guiding example."""
    return Setup(32, 65, pipeline=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
