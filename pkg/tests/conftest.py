from dataclasses import dataclass

import numpy as np
import pytest

from emucal import lorenz96 as L


@dataclass
class DeskProblem:
    cfg: L.L96Config
    theta_true: np.ndarray
    y_obs: np.ndarray
    gamma_obs: np.ndarray


@pytest.fixture(scope="session")
def desk_problem():
    cfg = L.DESK_CONFIG
    theta = np.array(L.BASE_THETA)
    return DeskProblem(cfg, theta, L.forward(theta, cfg, 12345),
                       L.estimate_obs_covariance(theta, cfg, seed=54321))
