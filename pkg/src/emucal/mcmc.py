"""Sequential tempered MCMC and the emulator-based calibration density.

The sampler moves a population of particles from the prior (``beta = 0``)
to the posterior (``beta = 1``). Each stage picks the next inverse
temperature by bisection on the effective sample size of the incremental
weights, resamples systematically, and rejuvenates with a few random-walk
Metropolis sweeps whose proposal is the scaled population covariance.

Log targets are *vectorized*: they take an ``(n, d)`` array and return an
``(n,)`` array of log-likelihood values. ``-inf`` is allowed and means
zero weight.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, DegenerateTargetError, IllConditionedError
from .lorenz96 import PARAM_NAMES

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

LORENZ_PRIOR_BOUNDS = (
    (0.3, 3.0, 0.6908, 3.0),
    (7.0, 17.0, 3.9144, 17.0),
)


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform prior on a box."""

    lower: np.ndarray
    upper: np.ndarray
    names: tuple = PARAM_NAMES

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("prior bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigurationError("prior bounds must be finite")
        if np.any(lo >= hi):
            raise ConfigurationError(f"prior needs lower < upper, got {lo} and {hi}")
        names = tuple(self.names)
        if len(names) != lo.size:
            names = tuple(f"x{i}" for i in range(lo.size))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "names", names)

    @classmethod
    def lorenz(cls):
        """Uniform box on ``(h, F, log c, b)`` used for the Lorenz '96 experiments."""
        return cls(np.array(LORENZ_PRIOR_BOUNDS[0]), np.array(LORENZ_PRIOR_BOUNDS[1]))

    @property
    def d(self):
        return self.lower.size

    @property
    def bounds(self):
        return self.lower, self.upper

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def mean(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def cov(self):
        return np.diag(self.width**2 / 12.0)

    def contains(self, theta):
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=1)

    def sample(self, rng, n):
        return self.lower + rng.random((n, self.d)) * self.width

    def log_density(self, theta):
        inside = self.contains(theta)
        return np.where(inside, -np.sum(np.log(self.width)), -np.inf)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lower"], float), np.asarray(d["upper"], float),
                   tuple(d.get("names", PARAM_NAMES)))


@dataclass
class PosteriorSamples:
    """Equally weighted posterior draws with provenance."""

    theta: np.ndarray
    method: str = "unknown"
    n_evals: int = 0
    seed: int = 0
    log_evidence: float = float("nan")
    names: tuple = PARAM_NAMES
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if not np.all(np.isfinite(self.theta)):
            raise ConfigurationError("posterior samples must be finite")
        if len(self.names) != self.theta.shape[1]:
            self.names = tuple(f"x{i}" for i in range(self.theta.shape[1]))

    @property
    def n(self):
        return self.theta.shape[0]

    def check_support(self, prior):
        if not np.all(prior.contains(self.theta)):
            raise ConfigurationError("posterior samples fall outside the prior box")

    def metadata(self):
        return {
            "method": self.method,
            "n_evals": int(self.n_evals),
            "seed": int(self.seed),
            "log_evidence": None if not np.isfinite(self.log_evidence) else float(self.log_evidence),
            "n_samples": self.n,
            "names": list(self.names),
            "info": {k: v for k, v in self.info.items() if _jsonable(v)},
        }

    def to_csv(self, path):
        """Write draws to ``path`` and metadata to ``path + '.json'``."""
        path = str(path)
        np.savetxt(path, self.theta, delimiter=",", header=",".join(self.names), comments="",
                   fmt="%.17g")
        with open(path + ".json", "w") as fh:
            json.dump(self.metadata(), fh, indent=2, default=_json_default)

    @classmethod
    def from_csv(cls, path):
        path = str(path)
        with open(path) as fh:
            names = tuple(fh.readline().strip().split(","))
        theta = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        try:
            with open(path + ".json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        le = meta.get("log_evidence")
        return cls(theta, meta.get("method", "unknown"), meta.get("n_evals", 0), meta.get("seed", 0),
                   float("nan") if le is None else le, names, meta.get("info", {}))


def _jsonable(obj):
    """True if ``obj`` serializes with :func:`_json_default`; live objects are skipped."""
    try:
        json.dumps(obj, default=_json_default)
    except (TypeError, ValueError):
        return False
    return True


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def calib_log_likelihood(theta, y_obs, emulator, gamma_obs):
    """Gaussian log density of ``y_obs`` under emulator mean and variance plus obs noise.

    Parameters
    ----------
    theta : array_like, shape (d,) or (n, d)
    y_obs : array_like, shape (p,)
    emulator : object with ``predict(X) -> (means (n, p), variances (n, p))``
    gamma_obs : array_like, shape (p, p)

    Returns
    -------
    float or ndarray of shape (n,)
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    mean, var = emulator.predict(np.atleast_2d(theta))
    out = gaussian_log_likelihood(mean, var, y_obs, gamma_obs)
    return float(out[0]) if single else out


def gaussian_log_likelihood(mean, var, y_obs, gamma_obs):
    """Batched ``log N(y_obs; mean_i, Gamma_obs + diag(var_i))``."""
    mean = np.atleast_2d(mean)
    var = np.atleast_2d(var)
    y_obs = np.asarray(y_obs, dtype=float).ravel()
    gamma_obs = np.asarray(gamma_obs, dtype=float)
    p = y_obs.size
    if mean.shape[1] != p or gamma_obs.shape != (p, p):
        raise ConfigurationError("dimension mismatch between emulator outputs, y_obs and gamma_obs")
    S = np.broadcast_to(gamma_obs, (mean.shape[0], p, p)).copy()
    S[:, np.arange(p), np.arange(p)] += var
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("combined covariance is not positive definite") from exc
    r = (y_obs - mean)[..., None]
    z = np.linalg.solve(L, r)[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    return -0.5 * (np.sum(z * z, axis=1) + logdet + p * LOG_2PI)


def emulator_log_target(emulator, y_obs, gamma_obs):
    """Vectorized log-likelihood closure suitable for :func:`stmcmc_sample`."""

    def target(theta):
        return calib_log_likelihood(np.atleast_2d(theta), y_obs, emulator, gamma_obs)

    return target


@dataclass(frozen=True)
class STMCMCConfig:
    n: int = 8192
    ess_fraction: float = 0.5
    n_mh: int = 5
    max_stages: int = 200
    target_accept: tuple = (0.2, 0.4)
    adapt_factor: float = 1.5

    def __post_init__(self):
        if self.n < 2:
            raise ConfigurationError("ST-MCMC needs at least 2 particles")
        if not 0.0 < self.ess_fraction < 1.0:
            raise ConfigurationError("ess_fraction must lie in (0, 1)")
        if self.n_mh < 0 or self.max_stages < 1:
            raise ConfigurationError("n_mh must be >= 0 and max_stages >= 1")
        lo, hi = self.target_accept
        if not 0.0 < lo < hi < 1.0:
            raise ConfigurationError("target_accept must be an increasing pair in (0, 1)")


def _ess(logw):
    finite = np.isfinite(logw)
    if not finite.any():
        return 0.0
    lw = logw[finite] - logw[finite].max()
    w = np.exp(lw)
    return float(w.sum() ** 2 / np.sum(w * w))


def _next_beta(ll, beta, threshold):
    """Largest ``beta' <= 1`` whose incremental weights keep ESS >= threshold."""
    def ess_at(b):
        return _ess(np.where(np.isfinite(ll), (b - beta) * ll, -np.inf))

    if ess_at(1.0) >= threshold:
        return 1.0
    lo, hi = beta, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ess_at(mid) >= threshold:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    # never stall: a zero-length step would loop forever
    return max(lo, beta + 1e-12)


def systematic_resample(weights, rng):
    """Indices drawn by systematic resampling of normalized ``weights``."""
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="left")


def _eval_target(log_target, theta, prior):
    out = np.full(theta.shape[0], -np.inf)
    inside = prior.contains(theta)
    if inside.any():
        vals = np.asarray(log_target(theta[inside]), dtype=float).ravel()
        vals = np.where(np.isnan(vals), -np.inf, vals)
        out[inside] = vals
    return out


def stmcmc_sample(log_target, prior, n=None, seed=0, config=None, method="stmcmc", n_evals=0):
    """Draw ``n`` posterior samples of ``prior * exp(log_target)``.

    Parameters
    ----------
    log_target : callable
        Vectorized log-likelihood, ``(m, d) -> (m,)``.
    prior : PriorSpec
    n : int, optional
        Population size; overrides ``config.n``.
    seed : int
    config : STMCMCConfig, optional

    Returns
    -------
    PosteriorSamples
        ``info`` holds the tempering ladder, per-stage acceptance rates and
        evidence increments.
    """
    cfg = config or STMCMCConfig()
    if n is not None:
        cfg = STMCMCConfig(n, cfg.ess_fraction, cfg.n_mh, cfg.max_stages, cfg.target_accept,
                           cfg.adapt_factor)
    rng = np.random.default_rng(seed)
    d = prior.d
    theta = prior.sample(rng, cfg.n)
    ll = _eval_target(log_target, theta, prior)
    if not np.isfinite(ll).any():
        raise DegenerateTargetError("log target is -inf for every initial draw")

    scale = 2.38**2 / d
    beta = 0.0
    log_z = 0.0
    betas, accepts, increments = [0.0], [], []
    for stage in range(cfg.max_stages):
        threshold = cfg.ess_fraction * np.count_nonzero(np.isfinite(ll))
        new_beta = 1.0 if stage == cfg.max_stages - 1 else _next_beta(ll, beta, threshold)
        logw = np.where(np.isfinite(ll), (new_beta - beta) * ll, -np.inf)
        inc = float(logsumexp(logw) - np.log(cfg.n))
        if not np.isfinite(inc):
            raise DegenerateTargetError(f"evidence increment not finite at stage {stage}")
        log_z += inc
        increments.append(inc)
        w = np.exp(logw - logw.max())
        idx = systematic_resample(w / w.sum(), rng)
        theta, ll = theta[idx], ll[idx]
        beta = new_beta
        betas.append(beta)

        cov = np.atleast_2d(np.cov(theta, rowvar=False))
        cov += 1e-12 * np.diag(prior.width**2)
        chol = np.linalg.cholesky(cov)
        rates = []
        for _ in range(cfg.n_mh):
            prop = theta + np.sqrt(scale) * rng.standard_normal(theta.shape) @ chol.T
            ll_prop = _eval_target(log_target, prop, prior)
            with np.errstate(invalid="ignore"):
                log_alpha = np.where(np.isfinite(ll_prop), beta * (ll_prop - ll), -np.inf)
            accept = np.log(rng.random(cfg.n)) < log_alpha
            theta[accept] = prop[accept]
            ll[accept] = ll_prop[accept]
            rate = float(accept.mean())
            rates.append(rate)
            if rate < cfg.target_accept[0]:
                scale /= cfg.adapt_factor
            elif rate > cfg.target_accept[1]:
                scale *= cfg.adapt_factor
        accepts.append(float(np.mean(rates)) if rates else float("nan"))
        log.debug("stage %d beta=%.4g accept=%.3f", stage, beta, accepts[-1])
        if beta >= 1.0:
            break

    info = {"betas": betas, "acceptance": accepts, "log_evidence_increments": increments,
            "n_stages": len(increments), "final_scale": scale}
    return PosteriorSamples(theta, method, n_evals, seed, log_z, prior.names, info)
