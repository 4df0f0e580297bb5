"""Two-scale Lorenz '96 system and its time-averaged forward operator.

The large-scale variables ``X_k`` (k = 1..K) and the small-scale
variables ``Y_{j,k}`` (j = 1..J) evolve as

    dX_k/dt     = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k - (h c / b) sum_j Y_{j,k} + F
    dY_{j,k}/dt = -c b Y_{j+1,k}(Y_{j+2,k} - Y_{j-1,k}) - c Y_{j,k} + (h c / b) X_k

with c = exp(log_c).  The small-scale variables form a single ring of
length J*K: ``Y_{j+J,k} = Y_{j,k+1}``.  Internally ``Y`` is stored as a
J x K matrix and flattened column-major (``j`` fastest) to obtain that
ring.

The forward operator averages the observables

    phi_k = (X_k, Ybar_k, X_k**2, X_k Ybar_k, Ybar_k**2)

over k and over a window of length T after a spin-up period.
"""

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigurationError, InsufficientDataError, IntegrationBlowupError

PARAM_NAMES = ("h", "F", "log_c", "b")
OBSERVABLE_NAMES = ("mean_X", "mean_Ybar", "mean_X2", "mean_XYbar", "mean_Ybar2")
BASE_THETA = (1.0, 10.0, float(np.log(10.0)), 10.0)

# |z| beyond this is treated as divergence; the attractor for the prior box
# stays several orders of magnitude below it.
BLOWUP_THRESHOLD = 1e8


@dataclass(frozen=True)
class L96Config:
    K: int = 36
    J: int = 10
    dt: float = 0.002
    T: float = 100.0
    spinup: float = 20.0
    total_time: float = 40000.0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 4:
            raise ConfigurationError(f"K must be an integer >= 4, got {self.K}")
        if int(self.J) != self.J or self.J < 1:
            raise ConfigurationError(f"J must be an integer >= 1, got {self.J}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.T > 0:
            raise ConfigurationError("T must be positive")
        if not self.spinup >= 0:
            raise ConfigurationError("spinup must be non-negative")
        if not self.total_time > 0:
            raise ConfigurationError("total_time must be positive")

    def n_steps(self, duration):
        """Number of RK4 steps covering ``duration``; ``dt`` must divide it."""
        n = int(round(duration / self.dt))
        if abs(n * self.dt - duration) > 1e-9 * max(1.0, abs(duration)):
            raise ConfigurationError(
                f"dt={self.dt} does not divide duration={duration}"
            )
        return n

    def to_dict(self):
        return {
            "K": self.K,
            "J": self.J,
            "dt": self.dt,
            "T": self.T,
            "spinup": self.spinup,
            "total_time": self.total_time,
        }


DESK_CONFIG = L96Config(K=8, J=4, T=20.0, spinup=10.0, total_time=4000.0)


@dataclass(frozen=True)
class ParameterVector:
    """Calibration parameters; the time-scale ratio is carried as ``log_c``."""

    h: float
    F: float
    log_c: float
    b: float

    def __post_init__(self):
        vals = (self.h, self.F, self.log_c, self.b)
        if not all(np.isfinite(vals)):
            raise ConfigurationError(f"non-finite parameters {vals}")
        if self.b == 0:
            raise ConfigurationError("b must be non-zero")

    @property
    def c(self):
        return float(np.exp(self.log_c))

    @classmethod
    def from_array(cls, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape != (4,):
            raise ConfigurationError(f"expected 4 parameters, got shape {theta.shape}")
        return cls(*map(float, theta))

    def as_array(self):
        return np.array([self.h, self.F, self.log_c, self.b])


@dataclass
class L96State:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim != 1 or self.Y.ndim != 2 or self.Y.shape[1] != self.X.shape[0]:
            raise ConfigurationError(
                f"inconsistent state shapes X{self.X.shape}, Y{self.Y.shape}"
            )

    @property
    def K(self):
        return self.X.shape[0]

    @property
    def J(self):
        return self.Y.shape[0]

    def to_flat(self):
        return np.concatenate([self.X, self.Y.ravel(order="F")])

    @classmethod
    def from_flat(cls, z, K, J):
        z = np.asarray(z, dtype=float)
        return cls(z[:K].copy(), z[K:].reshape((J, K), order="F").copy())


@dataclass
class Trajectory:
    """Stored states; ``X`` is (n+1, K), ``Y`` is (n+1, J, K)."""

    X: np.ndarray
    Y: np.ndarray
    dt: float
    t0: float = 0.0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i):
        return L96State(self.X[i], self.Y[i])

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self))


def _as_theta(theta):
    if isinstance(theta, ParameterVector):
        return theta
    return ParameterVector.from_array(theta)


def _check_state(state, cfg):
    if state.K != cfg.K or state.J != cfg.J:
        raise ConfigurationError(
            f"state has K={state.K}, J={state.J} but config has K={cfg.K}, J={cfg.J}"
        )


def rhs(state, theta, cfg):
    """Time derivative of the two-scale system, returned as an :class:`L96State`."""
    _check_state(state, cfg)
    th = _as_theta(theta)
    h, F, c, b = th.h, th.F, th.c, th.b
    X = state.X
    ring = state.Y.ravel(order="F")
    coupling = h * c / b

    dX = (
        -np.roll(X, 1) * (np.roll(X, 2) - np.roll(X, -1))
        - X
        - coupling * state.Y.sum(axis=0)
        + F
    )
    y_p1 = np.roll(ring, -1)
    y_p2 = np.roll(ring, -2)
    y_m1 = np.roll(ring, 1)
    x_of_ring = np.repeat(X, cfg.J)
    dring = -c * b * y_p1 * (y_p2 - y_m1) - c * ring + coupling * x_of_ring
    return L96State(dX, dring.reshape((cfg.J, cfg.K), order="F"))


# ---------------------------------------------------------------------------
# compiled kernels; the flat state is z = [X_1..X_K, ring_0..ring_{JK-1}]


@numba.njit(cache=True)
def _l96_tendency(z, p):
    h, F, c, b = p[0], p[1], p[2], p[3]
    K = int(p[4])
    J = int(p[5])
    n = J * K
    coupling = h * c / b
    dz = np.empty_like(z)
    for k in range(K):
        s = 0.0
        for j in range(J):
            s += z[K + k * J + j]
        dz[k] = (
            -z[(k - 1) % K] * (z[(k - 2) % K] - z[(k + 1) % K])
            - z[k]
            - coupling * s
            + F
        )
    for i in range(n):
        yp1 = z[K + (i + 1) % n]
        yp2 = z[K + (i + 2) % n]
        ym1 = z[K + (i - 1) % n]
        dz[K + i] = -c * b * yp1 * (yp2 - ym1) - c * z[K + i] + coupling * z[i // J]
    return dz


@numba.njit(cache=True)
def rk4_step(f, z, dt, p):
    """One classical fourth-order Runge-Kutta step of ``dz/dt = f(z, p)``."""
    k1 = f(z, p)
    k2 = f(z + 0.5 * dt * k1, p)
    k3 = f(z + 0.5 * dt * k2, p)
    k4 = f(z + dt * k3, p)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@numba.njit(cache=True)
def _diverged(z, threshold):
    for v in z:
        if not (abs(v) < threshold):
            return True
    return False


@numba.njit(cache=True)
def rk4_trajectory(f, z0, dt, n_steps, p, threshold):
    """Integrate ``n_steps`` RK4 steps and store every state.

    Returns ``(states, blow_step)``; ``blow_step`` is -1 on success, else the
    step index at which the state left the finite region.
    """
    out = np.empty((n_steps + 1, z0.shape[0]))
    out[0] = z0
    z = z0.copy()
    for i in range(n_steps):
        z = rk4_step(f, z, dt, p)
        if _diverged(z, threshold):
            return out[: i + 1], i + 1
        out[i + 1] = z
    return out, -1


@numba.njit(cache=True)
def _l96_tendency_into(z, h, F, c, b, K, J, out):
    n = J * K
    coupling = h * c / b
    for k in range(K):
        s = 0.0
        base = K + k * J
        for j in range(J):
            s += z[base + j]
        km1 = k - 1 if k >= 1 else K - 1
        km2 = k - 2 if k >= 2 else K - 2 + k
        kp1 = k + 1 if k + 1 < K else 0
        out[k] = -z[km1] * (z[km2] - z[kp1]) - z[k] - coupling * s + F
    cb = c * b
    for i in range(n):
        ip1 = i + 1 if i + 1 < n else i + 1 - n
        ip2 = i + 2 if i + 2 < n else i + 2 - n
        im1 = i - 1 if i >= 1 else n - 1
        out[K + i] = (
            -cb * z[K + ip1] * (z[K + ip2] - z[K + im1])
            - c * z[K + i]
            + coupling * z[i // J]
        )


@numba.njit(cache=True)
def _l96_rk4_inplace(z, h, F, c, b, K, J, dt, k1, k2, k3, k4, tmp):
    """Allocation-free RK4 step on the flat state (hot path of the simulator)."""
    m = z.shape[0]
    _l96_tendency_into(z, h, F, c, b, K, J, k1)
    for i in range(m):
        tmp[i] = z[i] + 0.5 * dt * k1[i]
    _l96_tendency_into(tmp, h, F, c, b, K, J, k2)
    for i in range(m):
        tmp[i] = z[i] + 0.5 * dt * k2[i]
    _l96_tendency_into(tmp, h, F, c, b, K, J, k3)
    for i in range(m):
        tmp[i] = z[i] + dt * k3[i]
    _l96_tendency_into(tmp, h, F, c, b, K, J, k4)
    diverged = False
    for i in range(m):
        z[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not (abs(z[i]) < BLOWUP_THRESHOLD):
            diverged = True
    return diverged


@numba.njit(cache=True)
def _window_means(z0, dt, n_spin, n_win, n_windows, p):
    h, F, c, b = p[0], p[1], p[2], p[3]
    K = int(p[4])
    J = int(p[5])
    m = z0.shape[0]
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    means = np.zeros((n_windows, 5))
    z = z0.copy()
    for i in range(n_spin):
        if _l96_rk4_inplace(z, h, F, c, b, K, J, dt, k1, k2, k3, k4, tmp):
            return means, z, i + 1
    step = n_spin
    for w in range(n_windows):
        acc = np.zeros(5)
        for i in range(n_win):
            step += 1
            if _l96_rk4_inplace(z, h, F, c, b, K, J, dt, k1, k2, k3, k4, tmp):
                return means, z, step
            for k in range(K):
                x = z[k]
                yb = 0.0
                for j in range(J):
                    yb += z[K + k * J + j]
                yb /= J
                acc[0] += x
                acc[1] += yb
                acc[2] += x * x
                acc[3] += x * yb
                acc[4] += yb * yb
        for q in range(5):
            means[w, q] = acc[q] / (n_win * K)
    return means, z, -1


def _param_array(theta, cfg):
    th = _as_theta(theta)
    return np.array([th.h, th.F, th.c, th.b, float(cfg.K), float(cfg.J)])


def initial_state(cfg, seed):
    """Random initial condition: X ~ N(0, 1), Y ~ N(0, 0.1**2)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal(cfg.K)
    Y = 0.1 * rng.standard_normal((cfg.J, cfg.K))
    return L96State(X, Y)


def integrate(state0, theta, cfg, duration):
    """Fixed-step RK4 trajectory of length ``duration / dt + 1`` states.

    Raises
    ------
    IntegrationBlowupError
        If the state becomes non-finite, carrying the blow-up time.
    """
    _check_state(state0, cfg)
    if duration < 0:
        raise ConfigurationError("duration must be non-negative")
    n = cfg.n_steps(duration) if duration > 0 else 0
    z0 = state0.to_flat()
    states, blow = rk4_trajectory(
        _l96_tendency, z0, cfg.dt, n, _param_array(theta, cfg), BLOWUP_THRESHOLD
    )
    if blow >= 0:
        raise IntegrationBlowupError(blow * cfg.dt)
    X = states[:, : cfg.K]
    Y = states[:, cfg.K :].reshape((-1, cfg.K, cfg.J)).transpose(0, 2, 1)
    return Trajectory(np.ascontiguousarray(X), np.ascontiguousarray(Y), cfg.dt)


def observables(X, Y):
    """phi averaged over k for states X (n, K), Y (n, J, K); returns (n, 5)."""
    X = np.asarray(X, dtype=float)
    Ybar = np.asarray(Y, dtype=float).mean(axis=-2)
    return np.stack(
        [
            X.mean(axis=-1),
            Ybar.mean(axis=-1),
            (X**2).mean(axis=-1),
            (X * Ybar).mean(axis=-1),
            (Ybar**2).mean(axis=-1),
        ],
        axis=-1,
    )


def observe_window(trajectory, cfg):
    """Time-and-space average of phi over the final window of length T.

    The window consists of the last ``T / dt`` stored states (the state at
    the start of the window is excluded, i.e. a right-endpoint rule), which
    matches the streaming accumulation used by :func:`forward`.
    """
    n_win = cfg.n_steps(cfg.T)
    if len(trajectory) < n_win:
        raise InsufficientDataError(
            f"trajectory has {len(trajectory)} states, window needs {n_win}"
        )
    phi = observables(trajectory.X[-n_win:], trajectory.Y[-n_win:])
    return phi.mean(axis=0)


def windowed_observables(theta, cfg, n_windows, seed):
    """Observable vector for each of ``n_windows`` consecutive windows."""
    z0 = initial_state(cfg, seed).to_flat()
    means, _, blow = _window_means(
        z0,
        cfg.dt,
        cfg.n_steps(cfg.spinup) if cfg.spinup > 0 else 0,
        cfg.n_steps(cfg.T),
        int(n_windows),
        _param_array(theta, cfg),
    )
    if blow >= 0:
        raise IntegrationBlowupError(blow * cfg.dt)
    return means


def forward(theta, cfg, seed):
    """Noisy forward operator G(theta): one window average after spin-up."""
    return windowed_observables(theta, cfg, 1, seed)[0]


def obs_covariance_from_windows(window_obs):
    """Symmetrized sample covariance across per-window observable vectors."""
    W = np.asarray(window_obs, dtype=float)
    if W.ndim != 2 or W.shape[0] < 2:
        raise InsufficientDataError("need at least two windows")
    C = np.cov(W, rowvar=False, ddof=1)
    return 0.5 * (C + C.T)


def estimate_obs_covariance(theta, cfg, total_time=None, seed=0):
    """Covariance of window averages over ``floor(total_time / T)`` windows."""
    total_time = cfg.total_time if total_time is None else total_time
    n_windows = int(np.floor(total_time / cfg.T + 1e-9))
    if n_windows < 2:
        raise InsufficientDataError(
            f"total_time={total_time} gives {n_windows} window(s) of T={cfg.T}"
        )
    return obs_covariance_from_windows(windowed_observables(theta, cfg, n_windows, seed))


class LorenzForward:
    """Picklable ``forward(theta, seed)`` callable bound to a config."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, theta, seed):
        return forward(theta, self.cfg, seed)
