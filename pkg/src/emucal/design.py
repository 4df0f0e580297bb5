"""Experimental design for GP emulators.

Information gain about the latent emulator at a target set ``X'`` has the
closed form ``0.5 * log(det K' / det Sigma')``. Adding one candidate ``x`` to
the design changes it by the exact rank-one gain

    -0.5 * log(1 - s^T Sigma'^{-1} s / v),

where ``s`` is the posterior cross-covariance between ``f(X')`` and a noisy
observation at ``x`` and ``v`` that observation's predictive variance. The
candidate sweep uses the rank-one form. Everything is computed in each
output's standardized input space, and gains of independent outputs add.

The BOED loop targets a fixed space-filling ``X'``. The goal-oriented loop
refreshes ``X'`` from the current emulator-based posterior.
"""

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import pdist
from scipy.special import logsumexp
from scipy.stats import qmc

from .errors import (
    ConfigurationError,
    DegenerateTargetError,
    DesignSaturationError,
    UnreliableEstimateError,
)
from .forward import finite_rows
from .gp import Dataset, cholesky_jitter, fit_multi, kernel_matrix
from .mcmc import STMCMCConfig, emulator_log_target, stmcmc_sample
from .seeding import child_seed

log = logging.getLogger(__name__)

XPRIME_JITTER = 1e-10
MIN_SEPARATION = 1e-9


# ---------------------------------------------------------------------------
# Space-filling designs


def sobol_design(n, lower, upper, seed):
    """Scrambled Sobol points in the box ``[lower, upper]``."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    sampler = qmc.Sobol(lower.size, scramble=True, seed=np.random.default_rng(seed))
    if n & (n - 1) == 0:
        U = sampler.random_base2(int(np.log2(n))) if n > 1 else sampler.random(1)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            U = sampler.random(n)
    return qmc.scale(U, lower, upper)


def maximin_lhs(n, lower, upper, seed, n_restarts=100):
    """Latin hypercube with the largest minimum pairwise distance among ``n_restarts`` draws."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    rng = np.random.default_rng(seed)
    best, best_score = None, -np.inf
    for _ in range(max(1, n_restarts)):
        U = qmc.LatinHypercube(lower.size, seed=rng).random(n)
        score = pdist(U).min() if n > 1 else 0.0
        if score > best_score:
            best, best_score = U, score
    return qmc.scale(best, lower, upper)


def grid_design(resolution, lower, upper):
    """Tensor grid of cell centres, ``resolution`` cells per dimension."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    axes = [lower[i] + (np.arange(resolution) + 0.5) / resolution * (upper[i] - lower[i])
            for i in range(lower.size)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lower.size)


def snap_to_grid(X, resolution, lower, upper):
    """Unique grid cell centres occupied by the rows of ``X``."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    idx = np.floor((np.atleast_2d(X) - lower) / (upper - lower) * resolution)
    idx = np.unique(np.clip(idx, 0, resolution - 1), axis=0)
    return lower + (idx + 0.5) / resolution * (upper - lower)


# ---------------------------------------------------------------------------
# Closed-form information gain


def _xprime_cov(Up, hp, include_nugget):
    K = kernel_matrix(Up, Up, hp)
    extra = hp.nugget if include_nugget else XPRIME_JITTER
    K[np.diag_indices_from(K)] += hp.signal_var * extra
    return K


def _chol(C, scale):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return cholesky_jitter(C, scale)[0]


def eig_closed(X, Xprime, hp, include_nugget=False):
    """Information gain on ``f(X')`` from noisy observations at ``X``.

    Parameters
    ----------
    X : ndarray, shape (m, d)
        Design in the GP's (standardized) input space.
    Xprime : ndarray, shape (n', d)
        Target set.
    hp : GPHyperparams
    include_nugget : bool
        Put the full nugget on the target diagonal instead of a ``1e-10``
        relative jitter.

    Returns
    -------
    float
        ``0.5 * log(det K' / det Sigma')``.

    Notes
    -----
    The value is evaluated through the equal Schur-complement form
    ``0.5 * log(det K_XX / det(K_XX - K_XX' K'^{-1} K_X'X))``. Forming
    ``Sigma'`` directly subtracts O(1) terms to leave eigenvalues near the
    1e-10 jitter, which costs about six digits; the observation-side
    complement is floored by the nugget instead.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Up = np.atleast_2d(np.asarray(Xprime, float))
    if X.shape[0] == 0 or X.shape[1] == 0:
        return 0.0
    Lp = _chol(_xprime_cov(Up, hp, include_nugget), hp.signal_var)
    K = kernel_matrix(X, X, hp)
    K[np.diag_indices_from(K)] += hp.signal_var * hp.nugget
    L, jitter = cholesky_jitter(K, hp.signal_var)
    W = solve_triangular(Lp, kernel_matrix(Up, X, hp), lower=True, check_finite=False)
    S = K - W.T @ W
    S[np.diag_indices_from(S)] += jitter
    Ly = _chol(0.5 * (S + S.T), hp.signal_var)
    return float(np.sum(np.log(np.diag(L))) - np.sum(np.log(np.diag(Ly))))


class IncrementalEIG:
    """Rank-one EIG gains for adding single candidates to a fixed design.

    ``U`` and ``Up`` are in the GP's standardized input space. The factor
    of ``K_UU`` is rebuilt per instance, since ``U`` also holds blown-up
    inputs that the emulator's own factor leaves out.
    """

    def __init__(self, U, Up, hp, include_nugget=False):
        self.hp = hp
        self.U = np.atleast_2d(U)
        self.Up = np.atleast_2d(Up)
        Kp = _xprime_cov(self.Up, hp, include_nugget)
        K = kernel_matrix(self.U, self.U, hp)
        K[np.diag_indices_from(K)] += hp.signal_var * hp.nugget
        self.L, self.jitter = cholesky_jitter(K, hp.signal_var)
        self.V = solve_triangular(self.L, kernel_matrix(self.U, self.Up, hp), lower=True,
                                  check_finite=False)
        Sigma = Kp - self.V.T @ self.V
        self.Ls = _chol(0.5 * (Sigma + Sigma.T), hp.signal_var)
        self.base = float(np.sum(np.log(np.diag(_chol(Kp, hp.signal_var))))
                          - np.sum(np.log(np.diag(self.Ls))))

    def gains(self, C):
        """Gain for each candidate row of ``C``; ``nan`` where numerically degenerate."""
        C = np.atleast_2d(C)
        hp = self.hp
        A = solve_triangular(self.L, kernel_matrix(self.U, C, hp), lower=True, check_finite=False)
        S = kernel_matrix(self.Up, C, hp) - self.V.T @ A
        # same diagonal jitter as the factor, so gains match eig_closed exactly
        v = hp.signal_var * (1.0 + hp.nugget) + self.jitter - np.sum(A * A, axis=0)
        Z = solve_triangular(self.Ls, S, lower=True, check_finite=False)
        ratio = np.sum(Z * Z, axis=0) / v
        with np.errstate(invalid="ignore", divide="ignore"):
            out = -0.5 * np.log1p(-ratio)
        out[~((v > 0) & (ratio >= 0) & (ratio < 1)) | ~np.isfinite(out)] = np.nan
        return out


# ---------------------------------------------------------------------------
# Design state and point selection


@dataclass(frozen=True)
class DesignConfig:
    n0: int = 64
    n_prime: int = 128
    n_sweep: int = 512
    n_polish: int = 4
    polish_step: float = 0.1
    polish_tol: float = 1e-3
    polish_max_evals: int = 200
    refit_every: int = 10
    n_restarts: int = 8
    refit_restarts: int = 2
    refresh_every: int = 10
    inner_particles: int = 2048
    final_particles: int = 8192
    snapshot_particles: int = 2048
    xprime_nugget: bool = False
    grid_resolution: int = None
    mcmc: STMCMCConfig = field(default_factory=STMCMCConfig)

    def __post_init__(self):
        if self.n0 < 2:
            raise ConfigurationError("n0 must be at least 2")
        for name in ("n_prime", "n_sweep", "n_polish", "refit_every", "refresh_every",
                     "inner_particles", "final_particles", "snapshot_particles"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "mcmc" in d and isinstance(d["mcmc"], dict):
            m = dict(d["mcmc"])
            if "target_accept" in m:
                m["target_accept"] = tuple(m["target_accept"])
            d["mcmc"] = STMCMCConfig(**m)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown design options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DesignState:
    """Training data, emulator and current target set of a design loop.

    ``X_all`` holds every evaluated input, including blown-up runs that are
    kept out of ``dataset``. Information gain conditions on ``X_all``, so a
    location that already failed is not proposed again.
    """

    dataset: Dataset
    emulator: object
    Xprime: np.ndarray
    tag: str = "space-filling"
    X_all: np.ndarray = None
    n_evals: int = 0

    def __post_init__(self):
        if self.X_all is None:
            self.X_all = self.dataset.X.copy()
        if self.n_evals == 0:
            self.n_evals = self.X_all.shape[0]
        if self.n_evals != self.X_all.shape[0]:
            raise ConfigurationError("evaluation counter must equal the number of evaluated points")


def _polish(evaluate, u0, f0, step, tol, max_evals):
    """Coordinate pattern search in the unit cube; first strict improvement wins."""
    u, f = u0.copy(), f0
    d = u.size
    evals = 0
    while step >= tol and evals < max_evals:
        improved = False
        for i in range(d):
            for sign in (1.0, -1.0):
                trial = u.copy()
                trial[i] = np.clip(trial[i] + sign * step, 0.0, 1.0)
                if trial[i] == u[i]:
                    continue
                val = evaluate(trial[None])[0]
                evals += 1
                if np.isfinite(val) and val > f:
                    u, f, improved = trial, val, True
                    break
        if not improved:
            step *= 0.5
    return u, f


def select_next(state, bounds, seed=0, config=None):
    """Maximize the summed EIG gain over the box.

    Returns
    -------
    x : ndarray, shape (d,)
        Selected point in raw units.
    gain : float
        Summed incremental EIG of the selection.
    """
    cfg = config or DesignConfig()
    lower, upper = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    width = upper - lower
    d = lower.size
    if state.Xprime is None or len(state.Xprime) == 0:
        raise ConfigurationError("target set X' is empty")
    models = state.emulator.models if hasattr(state.emulator, "models") else [state.emulator]
    evals = [IncrementalEIG(m.scaler.scale_x(state.X_all), m.scaler.scale_x(state.Xprime),
                            m.hyperparams, cfg.xprime_nugget) for m in models]
    existing = (state.X_all - lower) / width

    def objective(Ubox):
        Xraw = lower + Ubox * width
        total = np.zeros(Ubox.shape[0])
        for ev, m in zip(evals, models):
            total += ev.gains(m.scaler.scale_x(Xraw))
        dist = np.min(np.max(np.abs(Ubox[:, None, :] - existing[None]), axis=2), axis=1)
        total[dist < MIN_SEPARATION] = np.nan
        return total

    sweep = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed)).random(cfg.n_sweep)
    vals = objective(sweep)
    if not np.isfinite(vals).any():
        raise DesignSaturationError("every sweep candidate is ill-conditioned")
    order = np.argsort(np.where(np.isfinite(vals), -vals, np.inf), kind="stable")
    best_u, best_f = None, -np.inf
    for idx in order[: cfg.n_polish]:
        if not np.isfinite(vals[idx]):
            break
        u, f = _polish(objective, sweep[idx], vals[idx], cfg.polish_step, cfg.polish_tol,
                       cfg.polish_max_evals)
        if f > best_f:
            best_u, best_f = u, f
    return lower + best_u * width, float(best_f)


# ---------------------------------------------------------------------------
# Loops


def _evaluate(forward, X):
    Y = forward(np.atleast_2d(X))
    return Y, finite_rows(Y)


def _fit(dataset, bounds, cfg, seed, previous=None):
    inits = None
    restarts = cfg.n_restarts
    if previous is not None:
        inits = [m.hyperparams.to_log_vector() for m in previous.models]
        restarts = cfg.refit_restarts
    return fit_multi(dataset, bounds=bounds, n_restarts=restarts, seed=seed, inits=inits)


def _posterior(emulator, y_obs, gamma_obs, prior, n, mcmc_cfg, seed, method, n_evals):
    target = emulator_log_target(emulator, y_obs, gamma_obs)
    cfg = replace(mcmc_cfg, n=n)
    return stmcmc_sample(target, prior, seed=seed, config=cfg, method=method, n_evals=n_evals)


def write_design_log(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _design_loop(budget, prior, forward, y_obs, gamma_obs, seed, cfg, goal_oriented, snapshots,
                 method):
    if budget < cfg.n0:
        raise ConfigurationError(f"budget {budget} is smaller than n0 = {cfg.n0}")
    bounds = prior.bounds
    t0 = time.perf_counter()
    X0 = sobol_design(cfg.n0, *bounds, child_seed(seed, "init"))
    Y0, ok = _evaluate(forward, X0)
    if ok.sum() < 2:
        raise ConfigurationError("fewer than two initial design points evaluated successfully")
    dataset = Dataset(X0[ok], Y0[ok])
    emulator = _fit(dataset, bounds, cfg, child_seed(seed, "fit", 0))

    if cfg.grid_resolution:
        grid = grid_design(cfg.grid_resolution, *bounds)
    else:
        grid = sobol_design(cfg.n_prime, *bounds, child_seed(seed, "xprime"))
    state = DesignState(dataset, emulator, grid, "space-filling", X0.copy())
    rows, events, snaps = [], [], {}
    blowups = int((~ok).sum())
    snapshots = sorted(set(int(b) for b in (snapshots or ()) if cfg.n0 <= b <= budget))

    def snapshot(b):
        snaps[b] = _posterior(state.emulator, y_obs, gamma_obs, prior, cfg.snapshot_particles,
                              cfg.mcmc, child_seed(seed, "snapshot", b), method, b)

    if cfg.n0 in snapshots:
        snapshot(cfg.n0)
    for r in range(1, budget - cfg.n0 + 1):
        if goal_oriented and (r - 1) % cfg.refresh_every == 0:
            state.Xprime, state.tag, note = _refresh_xprime(state.emulator, y_obs, gamma_obs, prior,
                                                            cfg, child_seed(seed, "xprime", r))
            if note:
                events.append({"round": r, "event": note})
        x, gain = select_next(state, bounds, child_seed(seed, "sweep", r), cfg)
        y, good = _evaluate(forward, x)
        state.X_all = np.vstack([state.X_all, x])
        state.n_evals += 1
        if good[0]:
            state.dataset = state.dataset.append(x[None], y)
        else:
            blowups += 1
            events.append({"round": r, "event": "blowup excluded from training"})
        if r % cfg.refit_every == 0 or r == budget - cfg.n0:
            state.emulator = _fit(state.dataset, bounds, cfg, child_seed(seed, "fit", r),
                                  previous=state.emulator)
        elif good[0]:
            state.emulator = state.emulator.extended(x, y[0])
        rows.append({"round": r, **{f"x{i}": float(v) for i, v in enumerate(x)}, "eig": gain,
                     "n_evals": state.n_evals, "wall_time_s": time.perf_counter() - t0,
                     "xprime": state.tag})
        if cfg.n0 + r in snapshots:
            snapshot(cfg.n0 + r)

    post = _posterior(state.emulator, y_obs, gamma_obs, prior, cfg.final_particles, cfg.mcmc,
                      child_seed(seed, "final"), method, state.n_evals)
    post.info.update({"design_log": rows, "events": events, "blowups": blowups,
                      "n_train": state.dataset.m})
    post.info["snapshots"] = snaps
    post.info["state"] = state
    return post


def _refresh_xprime(emulator, y_obs, gamma_obs, prior, cfg, seed):
    rng = np.random.default_rng(seed)
    try:
        inner = _posterior(emulator, y_obs, gamma_obs, prior, cfg.inner_particles, cfg.mcmc,
                           child_seed(seed, "inner"), "inner", 0)
        pool, tag, note = inner.theta, "posterior", None
    except DegenerateTargetError:
        pool, tag, note = prior.sample(rng, cfg.inner_particles), "prior-fallback", \
            "intermediate MCMC degenerate; prior-drawn X'"
    if cfg.grid_resolution:
        return snap_to_grid(pool, cfg.grid_resolution, *prior.bounds), tag, note
    pool = np.unique(pool, axis=0)
    if pool.shape[0] > cfg.n_prime:
        pool = pool[np.sort(rng.choice(pool.shape[0], cfg.n_prime, replace=False))]
    return pool, tag, note


def run_boed(budget, prior, forward, y_obs, gamma_obs, seed=0, config=None, snapshots=None):
    """Sequential BOED with a fixed space-filling target set, then ST-MCMC.

    Exactly ``budget`` forward evaluations are made. The returned samples
    carry the design log, per-budget ``snapshots`` posteriors and the final
    :class:`DesignState` in ``info``.
    """
    return _design_loop(budget, prior, forward, y_obs, gamma_obs, seed, config or DesignConfig(),
                        False, snapshots, "boed")


def run_gboed(budget, prior, forward, y_obs, gamma_obs, seed=0, config=None, snapshots=None):
    """Goal-oriented BOED: the target set is refreshed from the emulator posterior."""
    return _design_loop(budget, prior, forward, y_obs, gamma_obs, seed, config or DesignConfig(),
                        True, snapshots, "gboed")


def run_lhs(budget, prior, forward, y_obs, gamma_obs, seed=0, config=None, n_lhs_restarts=100):
    """Space-filling baseline: maximin LHS, one GP fit, ST-MCMC."""
    cfg = config or DesignConfig()
    X = maximin_lhs(budget, *prior.bounds, child_seed(seed, "lhs"), n_lhs_restarts)
    Y, ok = _evaluate(forward, X)
    data = Dataset(X[ok], Y[ok])
    emulator = _fit(data, prior.bounds, cfg, child_seed(seed, "fit", 0))
    post = _posterior(emulator, y_obs, gamma_obs, prior, cfg.final_particles, cfg.mcmc,
                      child_seed(seed, "final"), "lhs", budget)
    post.info.update({"blowups": int((~ok).sum()), "n_train": data.m, "emulator": emulator})
    return post


# ---------------------------------------------------------------------------
# Idealized (nested Monte Carlo) information gain on toy problems


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    sd: float = 1.0

    def sample(self, rng, n):
        return self.mean + self.sd * rng.standard_normal((n, 1))


@dataclass(frozen=True)
class ToyCalibrationModel:
    """Scalar-output toy for the idealized EIG.

    ``kernel(A, B)`` is the GP prior covariance of the simulator output,
    ``sim_noise`` the noise variance of training runs and ``obs_var`` the
    observation noise of ``y_obs``.
    """

    kernel: object
    y_obs: float
    obs_var: float
    sim_noise: float = 0.0


def se_kernel_fn(hp):
    """Kernel callable built from GP hyperparameters (latent part only)."""
    return lambda A, B: kernel_matrix(np.atleast_2d(A), np.atleast_2d(B), hp)


def estimate_idealized_eig(X, prior, model, n_outer, n_inner, seed=0, min_ess=10.0):
    """Nested Monte Carlo estimate of the expected posterior-vs-prior KL.

    Outer loop: training outputs ``Y ~ GP prior`` at ``X``. Inner loop:
    self-normalized importance sampling from the prior for the KL of
    ``p(theta | y_obs, GP(X, Y))`` from ``p(theta)``.

    Returns
    -------
    estimate, standard_error : float
    """
    X = np.atleast_2d(np.asarray(X, float))
    rng = np.random.default_rng(seed)
    if not np.isfinite(model.obs_var):
        return 0.0, 0.0
    m = X.shape[0]
    K = model.kernel(X, X) + model.sim_noise * np.eye(m)
    L, _ = cholesky_jitter(K, max(float(np.max(np.diag(K))), 1e-300))
    kls = np.empty(n_outer)
    for j in range(n_outer):
        Y = L @ rng.standard_normal(m)
        theta = prior.sample(rng, n_inner)
        Ks = model.kernel(theta, X)
        A = solve_triangular(L, Ks.T, lower=True, check_finite=False)
        mean = A.T @ solve_triangular(L, Y, lower=True, check_finite=False)
        prior_var = _diag_kernel(model.kernel, theta)
        var = np.maximum(prior_var - np.sum(A * A, axis=0), 0.0) + model.sim_noise + model.obs_var
        ll = -0.5 * (np.log(2 * np.pi * var) + (model.y_obs - mean) ** 2 / var)
        logw = ll - logsumexp(ll)
        w = np.exp(logw)
        ess = 1.0 / np.sum(w * w)
        if ess < min_ess:
            raise UnreliableEstimateError(f"inner ESS {ess:.1f} < {min_ess}")
        kls[j] = float(np.sum(w * ll) - (logsumexp(ll) - np.log(n_inner)))
    return float(kls.mean()), float(kls.std(ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else float("nan")


def _diag_kernel(kernel, theta, chunk=256):
    out = np.empty(theta.shape[0])
    for s in range(0, theta.shape[0], chunk):
        blk = theta[s:s + chunk]
        out[s:s + chunk] = np.diag(kernel(blk, blk))
    return out
