"""Ensemble Kalman Sampler.

Interacting Langevin dynamics preconditioned by the ensemble covariance.
The data drift uses only forward outputs (no derivatives). Uniform priors
are handled through a moment-matched Gaussian surrogate in the drift, and
particles are reflected back into the prior box after each step.

Two time discretizations are offered. ``"cn"`` (default) linearizes the
full drift with the ensemble's statistical Jacobian ``B = C_Gtheta C^+`` and
takes a Crank-Nicolson step,

    M = I + (dt / 2) C (B^T Gamma^{-1} B + Sigma0^{-1}),
    theta' = theta + M^{-1} (-dt * drift + sqrt(2 dt) C^{1/2} xi),

which leaves the stationary law of a linear-Gaussian problem unbiased at
any step size. ``"semi-implicit"`` treats only the prior term implicitly,

    (I + dt C Sigma0^{-1}) theta* = theta - dt * data_drift + dt C Sigma0^{-1} m0,
    theta' = theta* + sqrt(2 dt) C^{1/2} xi.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .forward import finite_rows
from .gp import Dataset

log = logging.getLogger(__name__)


@dataclass
class Ensemble:
    """Particles, their forward outputs (if evaluated) and the iteration index."""

    theta: np.ndarray
    outputs: np.ndarray = None
    iteration: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if self.theta.shape[0] < 2:
            raise ConfigurationError("an ensemble needs at least 2 particles")
        if not np.all(np.isfinite(self.theta)):
            raise ConfigurationError("ensemble particles must be finite")
        if self.outputs is not None:
            self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
            if self.outputs.shape[0] != self.theta.shape[0]:
                raise ConfigurationError("outputs must have one row per particle")

    @property
    def n(self):
        return self.theta.shape[0]

    @property
    def evaluated(self):
        return self.outputs is not None

    def to_csv(self, path, names=None, output_names=None):
        d = self.theta.shape[1]
        names = list(names or [f"x{i}" for i in range(d)])
        cols = [self.theta]
        if self.evaluated:
            p = self.outputs.shape[1]
            names += list(output_names or [f"y{i}" for i in range(p)])
            cols.append(self.outputs)
        np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(names), comments="",
                   fmt="%.17g")


def reflect(theta, lower, upper):
    """Fold points back into ``[lower, upper]`` by mirror reflection."""
    w = upper - lower
    u = np.mod(theta - lower, 2.0 * w)
    return lower + np.where(u > w, 2.0 * w - u, u)


def _sqrt_psd(C):
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def eks_step(ens, y_obs, gamma_obs, prior_mean, prior_cov, rng, dt0=2.0, eps=1e-8, bounds=None,
             noise=None, scheme="cn"):
    """One EKS update of an evaluated ensemble.

    Parameters
    ----------
    ens : Ensemble
        Must carry forward outputs.
    y_obs, gamma_obs : array_like
        Data and observation covariance.
    prior_mean, prior_cov : array_like
        Gaussian (surrogate) prior used in the drift.
    rng : numpy.random.Generator
    dt0, eps : float
        Adaptive step ``dt = dt0 / (||D||_F + eps)``.
    bounds : tuple of arrays, optional
        Reflect the new particles into this box.
    noise : ndarray, shape (n, d), optional
        Standard normal draws, for reproducing a step exactly.
    scheme : {"cn", "semi-implicit"}

    Returns
    -------
    Ensemble
        Unevaluated ensemble at ``iteration + 1``; ``info`` has ``dt`` and
        whether the covariance was rank deficient.
    """
    if not ens.evaluated:
        raise ConfigurationError("eks_step needs forward outputs for every particle")
    if scheme not in ("cn", "semi-implicit"):
        raise ConfigurationError(f"unknown EKS scheme {scheme!r}")
    theta, G = ens.theta, ens.outputs
    n, d = theta.shape
    y_obs = np.asarray(y_obs, dtype=float).ravel()
    gamma_obs = np.atleast_2d(np.asarray(gamma_obs, dtype=float))
    m0 = np.asarray(prior_mean, dtype=float).ravel()
    P0_inv = np.linalg.inv(np.atleast_2d(np.asarray(prior_cov, dtype=float)))

    dG = G - G.mean(axis=0)
    misfit = np.linalg.solve(gamma_obs, (G - y_obs).T).T
    D = misfit @ dG.T / n  # D[j, k] = <G_k - Gbar, Gamma^{-1}(G_j - y)> / n
    dtheta = theta - theta.mean(axis=0)
    C = dtheta.T @ dtheta / n
    rank_deficient = n <= d
    if rank_deficient:
        warnings.warn(f"ensemble of {n} particles in {d} dimensions is rank deficient; "
                      "using a pseudo square root", RuntimeWarning, stacklevel=2)

    dt = dt0 / (np.linalg.norm(D) + eps)
    data_drift = D @ dtheta
    CP = C @ P0_inv
    xi = rng.standard_normal((n, d)) if noise is None else np.asarray(noise, dtype=float)
    diffusion = np.sqrt(2.0 * dt) * xi @ _sqrt_psd(C).T
    if scheme == "cn":
        C_tg = dtheta.T @ dG / n
        B = C_tg.T @ np.linalg.pinv(C)
        R = C_tg @ np.linalg.solve(gamma_obs, B) + CP
        drift = data_drift + (theta - m0) @ CP.T
        M = np.eye(d) + 0.5 * dt * R
        new = theta + np.linalg.solve(M, (diffusion - dt * drift).T).T
    else:
        rhs = theta - dt * data_drift + dt * (CP @ m0)
        new = np.linalg.solve(np.eye(d) + dt * CP, rhs.T).T + diffusion
    if bounds is not None:
        new = reflect(new, *bounds)
    info = {"dt": float(dt), "rank_deficient": bool(rank_deficient), "scheme": scheme}
    return Ensemble(new, None, ens.iteration + 1, info)


def _evaluate(ens, forward, rng, bounds, scale):
    """Run the forward map; replace blown-up particles near the ensemble mean.

    A replaced particle is not re-simulated: its output is imputed by the
    mean of the finite outputs, so the evaluation count stays exact.
    """
    Y = forward(ens.theta)
    ok = finite_rows(Y)
    replaced = []
    if not ok.all():
        if not ok.any():
            raise ConfigurationError("every particle in the ensemble blew up")
        good_mean = ens.theta[ok].mean(axis=0)
        for i in np.flatnonzero(~ok):
            t = good_mean + scale * rng.standard_normal(ens.theta.shape[1])
            if bounds is not None:
                t = reflect(t, *bounds)
            replaced.append({"index": int(i), "theta": ens.theta[i].tolist()})
            ens.theta[i] = t
        Y[~ok] = Y[ok].mean(axis=0)
        log.info("iteration %d: replaced %d blown-up particles", ens.iteration, len(replaced))
    ens.outputs = Y
    ens.info["replaced"] = replaced
    return ens


def run_eks(prior, n_ens, n_iter, forward, y_obs, gamma_obs, seed=0, dt0=2.0, eps=1e-8,
            replace_scale=0.01, scheme="cn"):
    """Run EKS for ``n_iter`` evaluated iterations.

    Parameters
    ----------
    prior : PriorSpec
        Uniform prior box; its mean and covariance define the Gaussian surrogate.
    n_ens, n_iter : int
    forward : callable
        Batch map ``(n, d) -> (n, p)``; NaN rows mark blow-ups.
    y_obs, gamma_obs : array_like
    seed : int

    Returns
    -------
    list of Ensemble
        ``n_iter`` evaluated ensembles followed by the final (unevaluated)
        update. Exactly ``n_ens * n_iter`` forward calls are made.
    """
    if n_ens < 2 or n_iter < 1:
        raise ConfigurationError("run_eks needs n_ens >= 2 and n_iter >= 1")
    rng = np.random.default_rng(seed)
    bounds = (prior.lower, prior.upper)
    scale = replace_scale * prior.width
    ens = Ensemble(prior.sample(rng, n_ens), None, 0)
    history = []
    for _ in range(n_iter):
        ens = _evaluate(ens, forward, rng, bounds, scale)
        history.append(ens)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ens = eks_step(ens, y_obs, gamma_obs, prior.mean, prior.cov, rng, dt0, eps, bounds,
                           scheme=scheme)
    history.append(ens)
    return history


def stride_schedule(n_iter, stride=6):
    """1-based iterations ``1, stride, 2*stride, ...`` up to ``n_iter``."""
    return sorted({1, *range(stride, n_iter + 1, stride)})


def thin_for_emulation(history, schedule):
    """Stack ``(theta, G(theta))`` from the 1-based evaluated iterations in ``schedule``.

    Duplicate parameter rows are merged. Particles whose output was imputed
    after a blow-up are left out.
    """
    schedule = list(schedule)
    if not schedule:
        raise ConfigurationError("thinning schedule is empty")
    evaluated = [e for e in history if e.evaluated]
    for i in schedule:
        if not 1 <= i <= len(evaluated):
            raise ConfigurationError(f"iteration {i} outside 1..{len(evaluated)}")
    X, Y = [], []
    for i in schedule:
        ens = evaluated[i - 1]
        keep = np.ones(ens.n, dtype=bool)
        keep[[r["index"] for r in ens.info.get("replaced", ())]] = False
        X.append(ens.theta[keep])
        Y.append(ens.outputs[keep])
    X, Y = np.vstack(X), np.vstack(Y)
    return Dataset(X, Y).merge_duplicates()
