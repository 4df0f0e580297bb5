"""Batch forward maps with exact evaluation accounting.

Every point evaluated through :class:`CountingForward` receives a seed
derived from the run's root seed and the global call index, so results do
not depend on how points are batched. Blown-up integrations come back as
rows of NaN and are listed in ``blowups``.
"""

import logging

import numpy as np

from .errors import IntegrationBlowupError
from .lorenz96 import L96Config, LorenzForward
from .seeding import child_seed

log = logging.getLogger(__name__)


class CountingForward:
    """Wrap ``fn(theta, seed) -> (p,)`` as a counted batch map.

    Parameters
    ----------
    fn : callable
        Single-point forward model.
    p : int
        Output dimension (used for NaN rows).
    seed : int
        Root seed for per-call seeds.
    budget : int, optional
        Hard cap on evaluations; exceeding it raises ``RuntimeError``.
    """

    def __init__(self, fn, p=5, seed=0, budget=None):
        self.fn = fn
        self.p = int(p)
        self.seed = int(seed)
        self.budget = budget
        self.count = 0
        self.blowups = []

    def __call__(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        n = theta.shape[0]
        if self.budget is not None and self.count + n > self.budget:
            raise RuntimeError(f"evaluation budget {self.budget} exceeded ({self.count} + {n})")
        out = np.full((n, self.p), np.nan)
        for i, t in enumerate(theta):
            idx = self.count
            self.count += 1
            try:
                out[i] = self.fn(t, child_seed(self.seed, "forward", idx))
            except IntegrationBlowupError as exc:
                log.info("forward call %d blew up at t=%.3g: %s", idx, exc.time, t)
                self.blowups.append({"call": idx, "theta": t.tolist(), "time": exc.time})
        return out

    @property
    def remaining(self):
        return None if self.budget is None else self.budget - self.count


def lorenz_forward(cfg=None, seed=0, budget=None):
    """Counted batch forward map of the Lorenz '96 observables."""
    return CountingForward(LorenzForward(cfg or L96Config()), p=5, seed=seed, budget=budget)


def finite_rows(Y):
    return np.all(np.isfinite(np.atleast_2d(Y)), axis=1)
