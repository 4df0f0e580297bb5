"""Calibrate, emulate, sample.

EKS explores the prior and concentrates near the posterior; a thinned subset
of its evaluated ensembles trains the emulator, and ST-MCMC on the emulator
likelihood gives the posterior. The emulator's input standardization uses
the bounding box of its training inputs, widened by ``inflate``, since EKS
samples cover only a small part of the prior box.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .eks import stride_schedule, run_eks, thin_for_emulation
from .errors import CalibrationError, ConfigurationError
from .gp import fit_multi
from .mcmc import STMCMCConfig, emulator_log_target, stmcmc_sample
from .seeding import child_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CESConfig:
    """EKS ensemble size and iterations, thinning schedule and sampler settings.

    ``schedule`` lists 1-based EKS iterations whose ensembles train the
    emulator; ``None`` means every iteration.
    """

    n_ens: int = 20
    n_iter: int = 10
    schedule: tuple = None
    n_samples: int = 8192
    inflate: float = 0.1
    dt0: float = 2.0
    scheme: str = "cn"
    n_restarts: int = 8
    mcmc: STMCMCConfig = field(default_factory=STMCMCConfig)

    def __post_init__(self):
        if self.n_ens < 2 or self.n_iter < 1:
            raise ConfigurationError("CES needs n_ens >= 2 and n_iter >= 1")
        sched = tuple(range(1, self.n_iter + 1)) if self.schedule is None else tuple(self.schedule)
        if not sched or min(sched) < 1 or max(sched) > self.n_iter:
            raise ConfigurationError(f"thinning schedule must lie in 1..{self.n_iter}")
        object.__setattr__(self, "schedule", tuple(sorted(set(int(i) for i in sched))))
        if self.inflate < 0:
            raise ConfigurationError("inflate must be non-negative")

    @property
    def budget(self):
        return self.n_ens * self.n_iter

    @classmethod
    def ces5400(cls, **kw):
        return cls(n_ens=100, n_iter=54, schedule=tuple(stride_schedule(54)), **kw)

    @classmethod
    def ces200(cls, **kw):
        return cls(n_ens=20, n_iter=10, **kw)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("mcmc"), dict):
            m = dict(d["mcmc"])
            if "target_accept" in m:
                m["target_accept"] = tuple(m["target_accept"])
            d["mcmc"] = STMCMCConfig(**m)
        if isinstance(d.get("schedule"), str):
            if d["schedule"] == "all":
                d["schedule"] = None
            elif d["schedule"].startswith("stride:"):
                d["schedule"] = tuple(stride_schedule(d["n_iter"], int(d["schedule"][7:])))
            else:
                raise ConfigurationError(f"unknown schedule {d['schedule']!r}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown CES options: {sorted(unknown)}")
        return cls(**d)


def inflated_box(X, inflate, fallback):
    """Bounding box of ``X`` widened by ``inflate`` times its width (half on each side)."""
    lo, hi = X.min(axis=0), X.max(axis=0)
    w = hi - lo
    flat = w <= 0
    w = np.where(flat, np.asarray(fallback, float), w)
    centre = 0.5 * (lo + hi)
    half = 0.5 * w * (1.0 + inflate)
    return centre - half, centre + half


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if isinstance(exc, CalibrationError) and not getattr(exc, "stage", None):
            exc.stage = self.name
            if exc.args:
                exc.args = (f"{self.name}: {exc.args[0]}",) + exc.args[1:]
        return False


def run_ces(cfg, prior, forward, y_obs, gamma_obs, seed=0):
    """Run the three CES stages.

    Parameters
    ----------
    cfg : CESConfig
    prior : PriorSpec
    forward : callable
        Batch forward map; exactly ``cfg.n_ens * cfg.n_iter`` calls are made.
    y_obs, gamma_obs : array_like
    seed : int

    Returns
    -------
    PosteriorSamples
        ``info`` records the stage seeds, the emulator's input box, the EKS
        history and the fitted emulator. Errors raised inside a stage carry
        a ``stage`` attribute (``"calibrate"``, ``"emulate"`` or ``"sample"``).
    """
    seeds = {s: child_seed(seed, s) for s in ("calibrate", "emulate", "sample")}
    with _Stage("calibrate"):
        history = run_eks(prior, cfg.n_ens, cfg.n_iter, forward, y_obs, gamma_obs,
                          seed=seeds["calibrate"], dt0=cfg.dt0, scheme=cfg.scheme)
    with _Stage("emulate"):
        data = thin_for_emulation(history, cfg.schedule)
        box = inflated_box(data.X, cfg.inflate, prior.width)
        emulator = fit_multi(data, bounds=box, n_restarts=cfg.n_restarts, seed=seeds["emulate"])
    with _Stage("sample"):
        target = emulator_log_target(emulator, y_obs, gamma_obs)
        post = stmcmc_sample(target, prior, seed=seeds["sample"],
                             config=replace(cfg.mcmc, n=cfg.n_samples), method="ces",
                             n_evals=cfg.budget)
    replaced = sum(len(e.info.get("replaced", ())) for e in history)
    post.info.update({"stage_seeds": seeds, "n_train": data.m, "gp_box": [b.tolist() for b in box],
                      "gp_domain": f"training bounding box inflated by {cfg.inflate:g}",
                      "schedule": list(cfg.schedule), "replaced": replaced, "history": history,
                      "emulator": emulator})
    return post
