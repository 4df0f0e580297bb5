"""Wave-based history matching.

Each wave fits an emulator to fresh runs drawn from the current
not-ruled-out-yet (NROY) region, discards pool candidates whose
implausibility exceeds a threshold, and passes the survivors on. A final
tempered-MCMC run on the emulator likelihood gives the posterior.
"""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .design import maximin_lhs
from .errors import ConfigurationError, EmptyNROYError, InsufficientDataError
from .forward import finite_rows
from .gp import Dataset, fit_multi
from .mcmc import STMCMCConfig, emulator_log_target, stmcmc_sample
from .seeding import child_seed

log = logging.getLogger(__name__)

CHUNK = 65536


def implausibility(theta, emulator, y_obs, gamma_obs, norm="componentwise"):
    """Standardized distance between emulator predictions and the data.

    Parameters
    ----------
    theta : array_like, shape (d,) or (n, d)
    emulator : object with ``predict(X) -> (means, variances)``
    y_obs : array_like, shape (p,)
    gamma_obs : array_like, shape (p, p)
        Only the diagonal is used.
    norm : {"componentwise", "vector"}
        ``"componentwise"`` returns one value per output,
        ``|mu_i - y_i| / sqrt(Gamma_ii + s2_i)``. ``"vector"`` returns the
        single value ``||mu - y|| / sqrt(sum_i (Gamma_ii + s2_i))``.

    Returns
    -------
    ndarray
        Shape ``(n, p)`` (componentwise) or ``(n,)`` (vector); the leading
        axis is dropped for a single ``theta``.
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    mean, var = emulator.predict(np.atleast_2d(theta))
    y_obs = np.asarray(y_obs, dtype=float).ravel()
    obs_var = np.diag(np.atleast_2d(gamma_obs))
    if obs_var.size != y_obs.size or mean.shape[1] != y_obs.size:
        raise ConfigurationError("dimension mismatch between emulator outputs, y_obs and gamma_obs")
    total = obs_var + var
    if norm == "componentwise":
        out = np.abs(mean - y_obs) / np.sqrt(total)
    elif norm == "vector":
        out = np.linalg.norm(mean - y_obs, axis=1) / np.sqrt(total.sum(axis=1))
    else:
        raise ConfigurationError(f"unknown implausibility norm {norm!r}")
    return out[0] if single else out


@dataclass
class NROYSpace:
    """Candidate pool with one retention mask per completed wave.

    ``masks[0]`` is all true; ``masks[w]`` is the region surviving wave ``w``.
    """

    pool: np.ndarray
    masks: list = field(default_factory=list)
    summaries: list = field(default_factory=list)

    def __post_init__(self):
        self.pool = np.atleast_2d(np.asarray(self.pool, dtype=float))
        if self.pool.shape[0] == 0:
            raise ConfigurationError("candidate pool is empty")
        if not self.masks:
            self.masks = [np.ones(self.pool.shape[0], dtype=bool)]
        for prev, cur in zip(self.masks, self.masks[1:]):
            if np.any(cur & ~prev):
                raise ConfigurationError("NROY masks must be nested")

    @classmethod
    def uniform(cls, lower, upper, n, seed):
        rng = np.random.default_rng(seed)
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        return cls(lower + rng.random((n, lower.size)) * (upper - lower))

    @property
    def wave(self):
        return len(self.masks) - 1

    @property
    def mask(self):
        return self.masks[-1]

    @property
    def n_retained(self):
        return int(self.mask.sum())

    @property
    def retained_fraction(self):
        return self.n_retained / self.pool.shape[0]

    @property
    def fractions(self):
        return [float(m.mean()) for m in self.masks]

    def retained(self):
        return self.pool[self.mask]


def nroy_filter(space, emulator, y_obs, gamma_obs, threshold=3.0, norm="componentwise"):
    """Apply one wave of implausibility screening.

    A candidate survives if its largest per-output implausibility (or the
    vector implausibility) is at most ``threshold`` and it survived every
    earlier wave.

    Returns
    -------
    NROYSpace
        New space with one more mask. Raises :class:`EmptyNROYError` if
        nothing survives.
    """
    idx = np.flatnonzero(space.mask)
    worst = np.empty(idx.size)
    for s in range(0, idx.size, CHUNK):
        imp = implausibility(space.pool[idx[s:s + CHUNK]], emulator, y_obs, gamma_obs, norm)
        worst[s:s + CHUNK] = imp.max(axis=1) if imp.ndim == 2 else imp
    keep = worst <= threshold
    if not keep.any():
        raise EmptyNROYError(f"no candidates below implausibility {threshold} at wave {space.wave + 1}")
    mask = np.zeros_like(space.mask)
    mask[idx[keep]] = True
    summary = dict(zip(("imp_q05", "imp_q50", "imp_q95"),
                       map(float, np.quantile(worst, [0.05, 0.5, 0.95]))))
    return NROYSpace(space.pool, space.masks + [mask], space.summaries + [summary])


def sample_nroy(space, k, seed):
    """Draw ``k`` retained candidates uniformly without replacement."""
    idx = np.flatnonzero(space.mask)
    if k > idx.size:
        raise InsufficientDataError(f"asked for {k} NROY points, only {idx.size} retained")
    rng = np.random.default_rng(seed)
    return space.pool[rng.choice(idx, size=k, replace=False)]


@dataclass(frozen=True)
class HMConfig:
    waves: int = 5
    per_wave: int = 40
    pool_size: int = 1_000_000
    threshold: float = 3.0
    norm: str = "componentwise"
    cumulative: bool = False
    lhs_restarts: int = 100
    n_restarts: int = 8
    final_particles: int = 8192
    mcmc: STMCMCConfig = field(default_factory=STMCMCConfig)

    def __post_init__(self):
        if self.waves < 1 or self.per_wave < 2 or self.pool_size < self.per_wave:
            raise ConfigurationError("need waves >= 1, per_wave >= 2 and pool_size >= per_wave")
        if not self.threshold > 0:
            raise ConfigurationError("implausibility threshold must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("mcmc"), dict):
            m = dict(d["mcmc"])
            if "target_accept" in m:
                m["target_accept"] = tuple(m["target_accept"])
            d["mcmc"] = STMCMCConfig(**m)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown history-matching options: {sorted(unknown)}")
        return cls(**d)


def write_wave_log(rows, path):
    if not rows:
        return
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def run_hm(prior, forward, y_obs, gamma_obs, seed=0, config=None):
    """History matching in waves, then ST-MCMC with the last-wave emulator.

    Parameters
    ----------
    prior : PriorSpec
    forward : callable
        Batch map ``(n, d) -> (n, p)``; NaN rows mark blow-ups, which are
        counted but left out of the emulator fit.
    y_obs, gamma_obs : array_like
    seed : int
    config : HMConfig, optional

    Returns
    -------
    PosteriorSamples
        ``info`` holds the per-wave log, events and the final NROY space.
    """
    cfg = config or HMConfig()
    bounds = prior.bounds
    space = NROYSpace.uniform(*bounds, cfg.pool_size, child_seed(seed, "pool"))
    rows, events = [], []
    emulator, data, n_evals, blowups = None, None, 0, 0
    for w in range(1, cfg.waves + 1):
        if w == 1:
            X = maximin_lhs(cfg.per_wave, *bounds, child_seed(seed, "lhs"), cfg.lhs_restarts)
        else:
            X = sample_nroy(space, min(cfg.per_wave, space.n_retained), child_seed(seed, "wave", w))
        Y = forward(X)
        n_evals += X.shape[0]
        ok = finite_rows(Y)
        blowups += int((~ok).sum())
        wave_data = Dataset(X[ok], Y[ok])
        data = wave_data if not (cfg.cumulative and data is not None) else data.append(X[ok], Y[ok])
        wave_emulator = fit_multi(data, bounds=bounds, n_restarts=cfg.n_restarts,
                                  seed=child_seed(seed, "fit", w))
        try:
            new_space = nroy_filter(space, wave_emulator, y_obs, gamma_obs, cfg.threshold, cfg.norm)
        except EmptyNROYError as exc:
            log.warning("%s; stopping after wave %d", exc, w - 1)
            events.append({"wave": w, "event": "empty NROY; stopped early"})
            if emulator is None:
                emulator = wave_emulator
            break
        emulator, space = wave_emulator, new_space
        rows.append({"wave": w, "retained_fraction": space.retained_fraction,
                     "n_train": data.m, "n_evals": n_evals, **space.summaries[-1]})
        log.info("wave %d: retained fraction %.4g", w, space.retained_fraction)

    target = emulator_log_target(emulator, y_obs, gamma_obs)
    post = stmcmc_sample(target, prior, seed=child_seed(seed, "final"),
                         config=replace(cfg.mcmc, n=cfg.final_particles), method="hm",
                         n_evals=n_evals)
    post.info.update({"waves": rows, "events": events, "blowups": blowups, "space": space,
                      "emulator": emulator})
    return post
