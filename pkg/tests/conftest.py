"""
Pytest configuration file.
"""
import os
import sys

import numpy as np
import pytest

# Add the project root directory to Python path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from app.config import RunConfig  # noqa: E402
from app.models.scene import SafetyField  # noqa: E402
from app.models.trajectory import Trajectory, TrajectorySet, Waypoint  # noqa: E402
from app.services.denoiser_service import DenoiserService  # noqa: E402
from app.services.diffusion_service import DiffusionService  # noqa: E402
from app.services.scene_service import SceneService, generate_anchors  # noqa: E402

CONFIG_RUN_ENV = os.path.join(project_root, 'app', 'data', 'run-config.env')


@pytest.fixture
def tiny_config():
    """Small network and scene extent so full passes stay fast."""
    return RunConfig(
        modes=2, horizon=3, k_ref=2, embed_dim=8, num_heads=2,
        num_steps=10, truncation_steps=3, batch_size=2, epochs=1, num_scenes=4,
        templates=('Straight', 'Obstacle'), cell_size=1.0,
        x_min=-5.0, x_max=30.0, y_min=-10.0, y_max=10.0,
    )


@pytest.fixture
def tiny_corpus(tiny_config):
    scenes = SceneService(tiny_config).generate_corpus(4)
    anchors = generate_anchors(scenes, tiny_config.modes, tiny_config.seed)
    return [scene.with_anchors(anchors) for scene in scenes]


@pytest.fixture
def tiny_scene(tiny_corpus):
    return tiny_corpus[0]


@pytest.fixture
def denoiser(tiny_config):
    return DenoiserService(tiny_config)


@pytest.fixture
def diffusion(tiny_config, denoiser):
    return DiffusionService(tiny_config, denoiser)


@pytest.fixture
def params(denoiser):
    return denoiser.init_params()


@pytest.fixture
def open_field():
    """5 x 5 field, 1 m cells, 10 m clearance everywhere."""
    return SafetyField(Waypoint(0.0, 0.0), 1.0, np.full((5, 5), 10.0))


def make_set(points, scene_id='scene'):
    """TrajectorySet from an (M, T, 2) nested list."""
    return TrajectorySet.from_array(np.asarray(points, dtype=np.float64), scene_id)


def make_traj(points, dt=0.5):
    return Trajectory(np.asarray(points, dtype=np.float64), dt)
