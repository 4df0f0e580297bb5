"""Zero-mean Gaussian-process emulators.

Covariance between inputs ``x_k`` and ``x_l`` is

    tau2 * (k(q(x_k, x_l)) + g * [k == l]),    q = sqrt(sum_i (x_ki - x_li)**2 / gamma_i)

with the squared-exponential kernel ``k(q) = exp(-q**2 / 2)``.  Inputs are
mapped to the unit cube using fixed bounds and each output column is
standardized to zero mean and unit standard deviation before fitting, so
the default hyperprior is shared across problems.

One :class:`GPModel` emulates one output column; :class:`MultiGP` holds
independent models for every column of a :class:`Dataset`.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, IllConditionedError  # noqa: F401  (re-exported)

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_START = 1e-10
JITTER_MAX = 1e-4
_PREDICT_CHUNK = 16384


@dataclass(frozen=True)
class GPHyperparams:
    """Lengthscales ``gamma`` (squared input units), signal ``tau2``, nugget ``g``."""

    lengthscales: np.ndarray
    signal_var: float
    nugget: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if ls.ndim != 1 or not np.all(ls > 0):
            raise ConfigurationError(f"lengthscales must be positive, got {ls}")
        if not self.signal_var > 0:
            raise ConfigurationError(f"signal variance must be positive, got {self.signal_var}")
        if not self.nugget >= 0:
            raise ConfigurationError(f"nugget must be non-negative, got {self.nugget}")

    @property
    def dim(self):
        return self.lengthscales.shape[0]

    def to_log_vector(self):
        return np.concatenate(
            [np.log(self.lengthscales), [np.log(self.signal_var), np.log(self.nugget)]]
        )

    @classmethod
    def from_log_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(np.exp(v[:-2]), float(np.exp(v[-2])), float(np.exp(v[-1])))

    def to_dict(self):
        return {
            "lengthscales": self.lengthscales.tolist(),
            "signal_var": self.signal_var,
            "nugget": self.nugget,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lengthscales"]), d["signal_var"], d["nugget"])


@dataclass(frozen=True)
class HyperPrior:
    """Independent normal priors (and box bounds) on the log-hyperparameters.

    The defaults assume inputs on the unit cube and standardized outputs:
    ``log gamma ~ N(0, 1)`` (lengthscale of the order of the input range),
    ``tau2`` log-normal with median 1 and ``g`` log-normal with median 1e-4.
    """

    log_lengthscale_mean: float = 0.0
    log_lengthscale_sd: float = 1.0
    log_signal_mean: float = 0.0
    log_signal_sd: float = 2.0
    log_nugget_mean: float = float(np.log(1e-4))
    log_nugget_sd: float = 2.5
    log_lengthscale_bounds: tuple = (float(np.log(1e-4)), float(np.log(1e4)))
    log_signal_bounds: tuple = (float(np.log(1e-6)), float(np.log(1e4)))
    log_nugget_bounds: tuple = (float(np.log(1e-10)), 0.0)

    def means(self, d):
        return np.array(
            [self.log_lengthscale_mean] * d + [self.log_signal_mean, self.log_nugget_mean]
        )

    def sds(self, d):
        return np.array([self.log_lengthscale_sd] * d + [self.log_signal_sd, self.log_nugget_sd])

    def bounds(self, d):
        return [self.log_lengthscale_bounds] * d + [self.log_signal_bounds, self.log_nugget_bounds]

    def log_density(self, v):
        mu = self.means(len(v) - 2)
        sd = self.sds(len(v) - 2)
        z = (np.asarray(v) - mu) / sd
        return float(-0.5 * np.sum(z * z) - np.sum(np.log(sd)) - 0.5 * len(v) * LOG_2PI)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("log_lengthscale_bounds", "log_signal_bounds", "log_nugget_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# covariance construction


def scaled_distance(x_i, x_j, lengthscales):
    """Scaled Euclidean distance ``q`` between two input vectors."""
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    gamma = np.asarray(lengthscales, dtype=float)
    if x_i.shape != x_j.shape or x_i.shape[-1:] != gamma.shape:
        raise ConfigurationError("dimension mismatch in scaled_distance")
    if not np.all(gamma > 0):
        raise ConfigurationError("lengthscales must be positive")
    return float(np.sqrt(np.sum((x_i - x_j) ** 2 / gamma)))


def se_kernel(q):
    return np.exp(-0.5 * np.asarray(q) ** 2)


def kernel_matrix(A, B, hp):
    """``tau2 * k(q(a, b))`` for all pairs; no nugget."""
    w = 1.0 / np.sqrt(hp.lengthscales)
    A = np.atleast_2d(A) * w
    B = np.atleast_2d(B) * w
    return hp.signal_var * np.exp(-0.5 * cdist(A, B, "sqeuclidean"))


def build_covariance(X, hp):
    """Training covariance ``Gamma_GP`` including the nugget on the diagonal."""
    C = kernel_matrix(X, X, hp)
    C[np.diag_indices_from(C)] = hp.signal_var * (1.0 + hp.nugget)
    return C


def cholesky_jitter(C, scale):
    """Lower Cholesky factor of ``C + jitter * I`` with escalating jitter.

    Starts at ``1e-10 * scale`` and multiplies by ten up to ``1e-4 * scale``.
    Returns ``(L, jitter)``.
    """
    jitter = JITTER_START * scale
    n = C.shape[0]
    eye = np.eye(n)
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(C + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise IllConditionedError(f"Cholesky failed for {n}x{n} matrix up to jitter {JITTER_MAX * scale:g}")


def _logdet_from_chol(L):
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def log_marginal_likelihood(hp, X, y):
    """Gaussian log density of ``y`` under ``N(0, Gamma_GP(X))``."""
    y = np.asarray(y, dtype=float).ravel()
    L, _ = cholesky_jitter(build_covariance(X, hp), hp.signal_var)
    a = solve_triangular(L, y, lower=True, check_finite=False)
    return -0.5 * _logdet_from_chol(L) - 0.5 * float(a @ a) - 0.5 * y.size * LOG_2PI


# ---------------------------------------------------------------------------
# data containers


@dataclass
class Dataset:
    """Design matrix ``X`` (m x d) paired with simulator outputs ``Y`` (m x p)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        self.Y = Y.reshape(-1, 1) if Y.ndim == 1 else Y
        if self.X.shape[0] != self.Y.shape[0]:
            raise ConfigurationError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if self.X.shape[0] < 1:
            raise ConfigurationError("dataset is empty")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ConfigurationError("dataset contains non-finite values")

    @property
    def m(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def p(self):
        return self.Y.shape[1]

    def merge_duplicates(self, tol=1e-12):
        """Merge rows of ``X`` closer than ``tol`` (max-norm), averaging outputs."""
        D = cdist(self.X, self.X, "chebyshev")
        group = -np.ones(self.m, dtype=int)
        n_groups = 0
        for i in range(self.m):
            if group[i] < 0:
                members = np.flatnonzero((D[i] <= tol) & (group < 0))
                group[members] = n_groups
                n_groups += 1
        if n_groups == self.m:
            return self
        X = np.array([self.X[group == g][0] for g in range(n_groups)])
        Y = np.array([self.Y[group == g].mean(axis=0) for g in range(n_groups)])
        return Dataset(X, Y)

    def column(self, i):
        return Dataset(self.X, self.Y[:, i : i + 1])

    def append(self, X, Y):
        return Dataset(np.vstack([self.X, np.atleast_2d(X)]), np.vstack([self.Y, np.atleast_2d(Y)]))


@dataclass(frozen=True)
class Standardizer:
    """Affine maps: inputs to the unit cube, one output column to zero mean / unit sd."""

    lower: np.ndarray
    upper: np.ndarray
    y_mean: float = 0.0
    y_sd: float = 1.0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or not np.all(hi > lo):
            raise ConfigurationError("standardization bounds need lower < upper")
        if not self.y_sd > 0:
            raise ConfigurationError("output sd must be positive")

    @classmethod
    def fit(cls, X, y, bounds=None):
        X = np.atleast_2d(X)
        if bounds is None:
            lo, hi = X.min(axis=0), X.max(axis=0)
            same = hi <= lo
            lo, hi = np.where(same, lo - 0.5, lo), np.where(same, hi + 0.5, hi)
        else:
            lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
        y = np.asarray(y, dtype=float).ravel()
        sd = float(y.std()) if y.size > 1 else 0.0
        return cls(lo, hi, float(y.mean()), sd if sd > 0 else 1.0)

    def scale_x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.lower.size:
            raise ConfigurationError(f"expected {self.lower.size} input columns, got {X.shape[1]}")
        return (X - self.lower) / (self.upper - self.lower)

    def unscale_x(self, U):
        return self.lower + np.atleast_2d(U) * (self.upper - self.lower)

    def scale_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_sd

    def unscale_y(self, z):
        return np.asarray(z, dtype=float) * self.y_sd + self.y_mean

    def to_dict(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "y_mean": self.y_mean,
            "y_sd": self.y_sd,
        }


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class GPModel:
    """A conditioned single-output GP; immutable once built.

    ``X`` and ``y`` are stored in standardized units.  The Cholesky factor
    of the training covariance is computed at construction.
    """

    hyperparams: GPHyperparams
    X: np.ndarray
    y: np.ndarray
    scaler: Standardizer
    info: dict = field(default_factory=dict, compare=False)
    chol: np.ndarray = field(init=False, repr=False, compare=False)
    alpha: np.ndarray = field(init=False, repr=False, compare=False)
    jitter: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        L, jitter = cholesky_jitter(build_covariance(X, self.hyperparams), self.hyperparams.signal_var)
        a = solve_triangular(L, y, lower=True, check_finite=False)
        alpha = solve_triangular(L.T, a, lower=False, check_finite=False)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "jitter", jitter)

    @classmethod
    def from_data(cls, X, y, hyperparams, bounds=None, scaler=None, info=None):
        """Condition on raw-unit data; ``scaler`` (if given) overrides ``bounds``."""
        if scaler is None:
            scaler = Standardizer.fit(X, y, bounds)
        return cls(hyperparams, scaler.scale_x(X), scaler.scale_y(y), scaler, dict(info or {}))

    @property
    def m(self):
        return self.X.shape[0]

    def conditioned_on(self, X, y):
        """Same hyperparameters and scaling, new raw-unit training data."""
        return GPModel.from_data(X, y, self.hyperparams, scaler=self.scaler, info=self.info)

    def extended(self, x, y):
        """Add one raw-unit observation by appending a row to the Cholesky factor.

        Hyperparameters, scaling and jitter are kept, so the result equals
        :meth:`conditioned_on` with the enlarged data up to rounding. Falls
        back to a full refactorization if the new pivot is not positive.
        """
        u = self.scaler.scale_x(np.atleast_2d(x))
        z = self.scaler.scale_y(np.atleast_1d(y))
        hp = self.hyperparams
        k = kernel_matrix(self.X, u, hp)[:, 0]
        l = solve_triangular(self.chol, k, lower=True, check_finite=False)
        pivot = hp.signal_var * (1.0 + hp.nugget) + self.jitter - l @ l
        X = np.vstack([self.X, u])
        y_new = np.concatenate([self.y, z])
        if not pivot > 0:
            return GPModel(hp, X, y_new, self.scaler, self.info)
        m = self.m
        L = np.zeros((m + 1, m + 1))
        L[:m, :m] = self.chol
        L[m, :m] = l
        L[m, m] = np.sqrt(pivot)
        a = solve_triangular(L, y_new, lower=True, check_finite=False)
        alpha = solve_triangular(L.T, a, lower=False, check_finite=False)
        out = object.__new__(GPModel)
        for name, val in (("hyperparams", hp), ("X", X), ("y", y_new), ("scaler", self.scaler),
                          ("info", self.info), ("chol", L), ("alpha", alpha),
                          ("jitter", self.jitter)):
            object.__setattr__(out, name, val)
        return out

    def latent_moments(self, U):
        """Standardized predictive mean and latent variance at scaled inputs ``U``."""
        Ks = kernel_matrix(U, self.X, self.hyperparams)
        mean = Ks @ self.alpha
        V = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = self.hyperparams.signal_var - np.sum(V * V, axis=0)
        return mean, np.maximum(var, 0.0)

    def predict(self, Xstar, full_cov=True):
        """Predictive mean and covariance at raw-unit inputs ``Xstar``.

        The nugget is added on the predictive diagonal only, i.e. the
        prediction is for a new simulator evaluation.  If ``full_cov`` is
        False the second return value is the vector of variances.
        """
        U = self.scaler.scale_x(Xstar)
        if U.shape[1] != self.X.shape[1]:
            raise ConfigurationError(f"expected {self.X.shape[1]} input columns, got {U.shape[1]}")
        hp = self.hyperparams
        noise = hp.signal_var * hp.nugget
        s2 = self.scaler.y_sd**2
        if not full_cov:
            means, vars_ = [], []
            for start in range(0, U.shape[0], _PREDICT_CHUNK):
                m, v = self.latent_moments(U[start : start + _PREDICT_CHUNK])
                means.append(m)
                vars_.append(v)
            mean = np.concatenate(means) if means else np.zeros(0)
            var = np.concatenate(vars_) if vars_ else np.zeros(0)
            return self.scaler.unscale_y(mean), (var + noise) * s2
        Ks = kernel_matrix(U, self.X, hp)
        mean = Ks @ self.alpha
        V = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        cov = kernel_matrix(U, U, hp) - V.T @ V
        cov = 0.5 * (cov + cov.T)
        cov[np.diag_indices_from(cov)] = np.maximum(np.diag(cov), 0.0) + noise
        return self.scaler.unscale_y(mean), cov * s2

    def log_marginal_likelihood(self):
        return log_marginal_likelihood(self.hyperparams, self.X, self.y)

    def to_dict(self):
        return {
            "hyperparams": self.hyperparams.to_dict(),
            "scaler": self.scaler.to_dict(),
            "X": self.scaler.unscale_x(self.X).tolist(),
            "y": self.scaler.unscale_y(self.y).tolist(),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d):
        s = d["scaler"]
        scaler = Standardizer(s["lower"], s["upper"], s["y_mean"], s["y_sd"])
        hp = GPHyperparams.from_dict(d["hyperparams"])
        return cls.from_data(np.asarray(d["X"]), np.asarray(d["y"]), hp, scaler=scaler, info=d.get("info"))


def _neg_log_posterior(v, X, y, prior):
    try:
        hp = GPHyperparams.from_log_vector(v)
        return -(log_marginal_likelihood(hp, X, y) + prior.log_density(v))
    except (IllConditionedError, ConfigurationError, FloatingPointError):
        return np.inf


def _neg_log_posterior_and_grad(v, X, y, prior, sqdiffs):
    """Objective and its gradient with respect to the log-hyperparameters."""
    d = X.shape[1]
    try:
        hp = GPHyperparams.from_log_vector(v)
        R = np.exp(-0.5 * np.tensordot(sqdiffs, 1.0 / hp.lengthscales, axes=(0, 0)))
        C = hp.signal_var * R
        C[np.diag_indices_from(C)] += hp.signal_var * hp.nugget
        L, _ = cholesky_jitter(C, hp.signal_var)
    except (IllConditionedError, ConfigurationError, FloatingPointError):
        return np.inf, np.zeros_like(v)
    a = solve_triangular(L, y, lower=True, check_finite=False)
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
    Cinv = Linv.T @ Linv
    alpha = Linv.T @ a
    W = np.outer(alpha, alpha) - Cinv  # d lml = 0.5 tr(W dC)
    lml = -0.5 * _logdet_from_chol(L) - 0.5 * float(a @ a) - 0.5 * y.size * LOG_2PI
    grad = np.empty(d + 2)
    WR = W * R
    for i in range(d):
        grad[i] = 0.25 * hp.signal_var * np.sum(WR * sqdiffs[i]) / hp.lengthscales[i]
    grad[d] = 0.5 * np.sum(W * C)
    grad[d + 1] = 0.5 * hp.signal_var * hp.nugget * np.trace(W)
    mu, sd = prior.means(d), prior.sds(d)
    lp = prior.log_density(v)
    grad -= (np.asarray(v) - mu) / sd**2
    return -(lml + lp), -grad


def fit_map(
    X,
    y,
    bounds=None,
    hyperprior=None,
    n_restarts=8,
    seed=0,
    init=None,
    maxiter=None,
    optimizer="lbfgs",
):
    """MAP hyperparameters by multi-start bounded local search in log space.

    Parameters
    ----------
    X : (m, d) array
        Raw-unit training inputs.
    y : (m,) array
        One output column.
    bounds : (lower, upper), optional
        Box used to map inputs to the unit cube; defaults to the data range.
    hyperprior : HyperPrior, optional
    n_restarts : int
        Total number of local searches.  The first starts at ``init`` (if
        given) or at the prior means; the rest start at prior draws.
    seed : int
        Seed for the random starting points.
    optimizer : {"lbfgs", "nelder-mead"}
        ``"lbfgs"`` uses L-BFGS-B with the analytic gradient;
        ``"nelder-mead"`` is derivative free and several times slower.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 2:
        raise ConfigurationError("fit_map needs at least two training points")
    prior = hyperprior or HyperPrior()
    scaler = Standardizer.fit(X, y, bounds)
    U, z = scaler.scale_x(X), scaler.scale_y(y)
    d = X.shape[1]
    box = np.array(prior.bounds(d))
    rng = np.random.default_rng(seed)

    first = prior.means(d) if init is None else np.asarray(init, dtype=float)
    starts = [np.clip(first, box[:, 0], box[:, 1])]
    for _ in range(max(n_restarts, 1) - 1):
        draw = prior.means(d) + prior.sds(d) * rng.standard_normal(d + 2)
        starts.append(np.clip(draw, box[:, 0], box[:, 1]))

    if optimizer == "lbfgs":
        sqdiffs = (U[None, :, :] - U[:, None, :]).transpose(2, 0, 1) ** 2
        objective = _neg_log_posterior_and_grad
        args = (U, z, prior, sqdiffs)
        kwargs = {"method": "L-BFGS-B", "jac": True, "options": {"maxiter": maxiter or 200}}
    elif optimizer == "nelder-mead":
        objective = _neg_log_posterior
        args = (U, z, prior)
        opts = {"maxiter": maxiter or 200 * (d + 2), "xatol": 1e-4, "fatol": 1e-7}
        kwargs = {"method": "Nelder-Mead", "options": opts}
    else:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")

    best_v, best_f = None, np.inf
    for v0 in starts:
        f0 = _neg_log_posterior(v0, U, z, prior)
        if not np.isfinite(f0):
            continue
        res = minimize(objective, v0, args=args, bounds=box, **kwargs)
        f_end = _neg_log_posterior(res.x, U, z, prior)
        v, f = (res.x, f_end) if f_end <= f0 else (v0, f0)
        if f < best_f:
            best_v, best_f = v, f
    if best_v is None or not np.isfinite(best_f):
        raise IllConditionedError("every MAP start failed to factorize the covariance")
    hp = GPHyperparams.from_log_vector(best_v)
    return GPModel(hp, U, z, scaler, {"neg_log_posterior": float(best_f), "log_vector": best_v.tolist()})


@dataclass(frozen=True)
class MultiGP:
    """Independent GP emulators, one per output column, sharing inputs."""

    models: tuple

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ConfigurationError("MultiGP needs at least one model")
        X0 = self.models[0].scaler.unscale_x(self.models[0].X)
        for mdl in self.models[1:]:
            if mdl.X.shape != self.models[0].X.shape or not np.allclose(
                mdl.scaler.unscale_x(mdl.X), X0, rtol=0, atol=1e-9
            ):
                raise ConfigurationError("all outputs must share the same training inputs")

    @property
    def p(self):
        return len(self.models)

    @property
    def m(self):
        return self.models[0].m

    def predict(self, Xstar):
        """Predictive means and variances, each (n, p)."""
        out = [mdl.predict(Xstar, full_cov=False) for mdl in self.models]
        return np.column_stack([o[0] for o in out]), np.column_stack([o[1] for o in out])

    def conditioned_on(self, dataset):
        return MultiGP(
            [mdl.conditioned_on(dataset.X, dataset.Y[:, i]) for i, mdl in enumerate(self.models)]
        )

    def extended(self, x, y):
        """Append one raw-unit observation ``(x, y)`` with ``y`` of length ``p``."""
        y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
        return MultiGP([mdl.extended(x, y[i]) for i, mdl in enumerate(self.models)])

    def to_json(self, path=None):
        doc = {"type": "MultiGP", "kernel": "squared_exponential", "models": [m.to_dict() for m in self.models]}
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        doc = json.loads(text)
        return cls([GPModel.from_dict(d) for d in doc["models"]])


def fit_multi(
    dataset,
    bounds=None,
    hyperprior=None,
    n_restarts=8,
    seed=0,
    inits=None,
    maxiter=None,
    optimizer="lbfgs",
):
    """Fit one MAP GP per output column.

    Every column uses the same optimizer ``seed``, so a column's model does
    not depend on its position in ``dataset.Y``.  Duplicate inputs are merged
    first.
    """
    data = dataset.merge_duplicates()
    models, failed = [], []
    for i in range(data.p):
        init = None if inits is None else inits[i]
        try:
            models.append(
                fit_map(data.X, data.Y[:, i], bounds, hyperprior, n_restarts, seed, init, maxiter, optimizer)
            )
        except IllConditionedError:
            failed.append(i)
    if failed:
        raise IllConditionedError(f"GP fit failed for output columns {failed}")
    return MultiGP(models)
