"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import time

import mpmath as mp
import numpy as np
import pytest
from scipy.special import logsumexp

from emucal import cli, eks, gp, mcmc
from emucal import design as D
from emucal import history_matching as H
from emucal import metrics as M
from emucal.ces import CESConfig, run_ces
from emucal.forward import CountingForward, lorenz_forward

LOG_2PI = np.log(2 * np.pi)
TINY_L96 = {"K": 4, "J": 2, "dt": 0.002, "T": 2.0, "spinup": 1.0, "total_time": 40.0}


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


def random_hp(rng, d):
    return gp.GPHyperparams(rng.uniform(0.05, 1.0, d), rng.uniform(0.5, 2.0), rng.uniform(1e-3, 1e-1))


def dense_cov(A, B, hp):
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = hp.signal_var * np.exp(-0.5 * np.sum((A[i] - B[j]) ** 2 / hp.lengthscales))
    return out


def mp_eig(X, Xp, hp, dps=30):
    """Latent-target EIG in extended precision, with the code's 1e-10 jitter."""
    with mp.workdps(dps):
        def k(A, B):
            return mp.matrix([[mp.mpf(v) for v in row] for row in dense_cov(A, B, hp)])

        s2, jit = mp.mpf(hp.signal_var), mp.mpf(1e-10)
        K = k(X, X) + s2 * (mp.mpf(hp.nugget) + jit) * mp.eye(len(X))
        Kp = k(Xp, Xp) + s2 * jit * mp.eye(len(Xp))
        S = Kp - k(Xp, X) * mp.inverse(K) * k(X, Xp)
        return float((mp.log(mp.det(Kp)) - mp.log(mp.det(S))) / 2)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def test_criterion_1_gp_oracles(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"lml": 0.0, "mean": 0.0, "cov": 0.0, "eig": 0.0}
    for _ in range(50):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(2, 21))
        X = rng.random((m, d))
        y = rng.standard_normal(m)
        hp = random_hp(rng, d)

        # the code factors C + jitter * I; the oracle uses the same matrix
        model = gp.GPModel.from_data(X, y, hp, bounds=(np.zeros(d), np.ones(d)))
        C = dense_cov(X, X, hp) + hp.signal_var * hp.nugget * np.eye(m)
        Kj = C + model.jitter * np.eye(m)
        sign, logdet = np.linalg.slogdet(Kj)
        lml = -0.5 * logdet - 0.5 * y @ np.linalg.solve(Kj, y) - 0.5 * m * LOG_2PI
        worst["lml"] = max(worst["lml"], rel_err(gp.log_marginal_likelihood(hp, X, y), lml))

        z = model.scaler.scale_y(y)
        xs = rng.random((int(rng.integers(1, 6)), d))
        ks = dense_cov(xs, X, hp)
        mean = model.scaler.unscale_y(ks @ np.linalg.solve(Kj, z))
        cov = dense_cov(xs, xs, hp) - ks @ np.linalg.solve(Kj, ks.T)
        cov = (cov + hp.signal_var * hp.nugget * np.eye(len(xs))) * model.scaler.y_sd**2
        mu, c = model.predict(xs)
        worst["mean"] = max(worst["mean"], float(np.max(np.abs(mu - mean)) / np.max(np.abs(mean))))
        worst["cov"] = max(worst["cov"], float(np.max(np.abs(c - cov)) / np.max(np.abs(cov))))

        Xp = rng.random((int(rng.integers(1, 21)), d))
        worst["eig"] = max(worst["eig"], rel_err(D.eig_closed(X, Xp, hp), mp_eig(X, Xp, hp)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-8 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s"
    report(1, "GP oracle equivalence (1e-8 relative, < 10 s)", ok, detail)


def mc_kl(X, Xp, hp, n, rng):
    """Per-draw KL(posterior || prior) of f(X') under Y ~ prior predictive."""
    K = dense_cov(X, X, hp) + hp.signal_var * hp.nugget * np.eye(len(X))
    Kp = dense_cov(Xp, Xp, hp) + 1e-10 * hp.signal_var * np.eye(len(Xp))
    Kc = dense_cov(Xp, X, hp)
    A = Kc @ np.linalg.inv(K)
    S = Kp - A @ Kc.T
    Lp = np.linalg.cholesky(Kp)
    Y = rng.multivariate_normal(np.zeros(len(X)), K, size=n)
    means = Y @ A.T
    w = np.linalg.solve(Lp, means.T)
    const = np.trace(np.linalg.solve(Kp, S)) - len(Xp) + np.linalg.slogdet(Kp)[1] - np.linalg.slogdet(S)[1]
    return 0.5 * (const + np.sum(w**2, axis=0))


def test_criterion_2_eig_vs_monte_carlo(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    zs = []
    for _ in range(10):
        d = int(rng.integers(1, 4))
        X = rng.random((int(rng.integers(1, 4)), d))
        Xp = rng.random((int(rng.integers(1, 5)), d))
        hp = random_hp(rng, d)
        kl = mc_kl(X, Xp, hp, 20_000, rng)
        se = kl.std(ddof=1) / np.sqrt(kl.size)
        zs.append(abs(kl.mean() - D.eig_closed(X, Xp, hp)) / se)
    elapsed = time.perf_counter() - t0
    ok = max(zs) <= 3 and elapsed < 120
    report(2, "EIG vs 20,000-draw Monte Carlo (3 SE, < 2 min)", ok,
           f"max |z| {max(zs):.2f} over 10 designs; {elapsed:.1f} s")


def conjugate_mutual_information(obs_var=0.25, y_obs=0.5):
    """Linear kernel with one noise-free run at x = 1: f(theta) = a * theta, a ~ N(0, 1),
    so the theta-posterior is Gaussian given a; average its KL over a."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    v = 1 / (1 + nodes**2 / obs_var)
    mean = v * nodes * y_obs / obs_var
    kl = 0.5 * (v + mean**2 - 1 - np.log(v))
    return float(np.sum(weights * kl) / np.sum(weights))


def test_criterion_3_idealized_eig(report):
    t0 = time.perf_counter()
    model = D.ToyCalibrationModel(kernel=lambda A, B: np.atleast_2d(A) @ np.atleast_2d(B).T,
                                  y_obs=0.5, obs_var=0.25)
    est, se = D.estimate_idealized_eig(np.array([[1.0]]), D.GaussianPrior(), model, 2000, 2000, seed=3)
    truth = conjugate_mutual_information()
    elapsed = time.perf_counter() - t0
    ok = abs(est - truth) <= 3 * se and elapsed < 60
    report(3, "idealized EIG on the conjugate toy (3 SE, < 1 min)", ok,
           f"estimate {est:.4f} +/- {se:.4f}, analytic {truth:.4f}; {elapsed:.1f} s")


def test_criterion_4_sampler(report):
    t0 = time.perf_counter()
    prior = mcmc.PriorSpec([-10.0, -10.0], [10.0, 10.0], ("a", "b"))
    mu = np.array([1.0, -2.0])
    S = np.array([[1.0, 0.6], [0.6, 2.0]])
    Si = np.linalg.inv(S)

    def gaussian(t):
        r = t - mu
        return -0.5 * np.einsum("ni,ij,nj->n", r, Si, r)

    runs = [mcmc.stmcmc_sample(gaussian, prior, n=1000, seed=s) for s in range(10)]
    means = np.array([r.theta.mean(0) for r in runs])
    se = means.std(0, ddof=1) / np.sqrt(len(runs))
    z = np.abs(means.mean(0) - mu) / se
    cov = np.mean([np.cov(r.theta, rowvar=False) for r in runs], axis=0)
    cov_err = float(np.max(np.abs(cov - S) / np.abs(S)))

    box = mcmc.PriorSpec([-10.0], [10.0], ("x",))

    def bimodal(t):
        x = t[:, 0]
        return logsumexp(np.stack([-0.5 * ((x + 3) / 0.5) ** 2, -0.5 * ((x - 3) / 0.5) ** 2]), axis=0)

    right = float(np.mean(mcmc.stmcmc_sample(bimodal, box, n=8192, seed=0).theta[:, 0] > 0))
    elapsed = time.perf_counter() - t0
    ok = np.all(z <= 3) and cov_err <= 0.15 and abs(right - 0.5) <= 0.05 and elapsed < 120
    report(4, "ST-MCMC conjugate moments and mode masses", ok,
           f"mean |z| max {z.max():.2f}, cov rel err {cov_err:.3f}, right-mode mass {right:.3f}; "
           f"{elapsed:.1f} s")


def test_criterion_5_eks_consistency(report):
    t0 = time.perf_counter()
    A = np.array([[1.0, 0.5], [-0.3, 2.0], [0.7, 0.1]])
    m0, P0 = np.array([0.5, -1.0]), np.diag([4.0, 2.0])
    gamma = np.diag([0.1, 0.2, 0.05])
    y = A @ np.array([1.0, 0.3]) + np.array([0.1, -0.2, 0.05])
    Pi, Gi = np.linalg.inv(P0), np.linalg.inv(gamma)
    post_cov = np.linalg.inv(A.T @ Gi @ A + Pi)
    post_mean = post_cov @ (A.T @ Gi @ y + Pi @ m0)

    rng = np.random.default_rng(0)
    ens = eks.Ensemble(rng.multivariate_normal(m0, P0, 100))
    means, covs = [], []
    for it in range(50):
        ens.outputs = ens.theta @ A.T
        if it >= 40:
            means.append(ens.theta.mean(0))
            covs.append(np.cov(ens.theta, rowvar=False))
        ens = eks.eks_step(ens, y, gamma, m0, P0, rng)
    mean_err = np.abs(np.mean(means, 0) - post_mean) / np.sqrt(np.diag(post_cov))
    cov_err = np.linalg.norm(np.mean(covs, 0) - post_cov) / np.linalg.norm(post_cov)
    elapsed = time.perf_counter() - t0
    ok = np.all(mean_err <= 0.1) and cov_err <= 0.25 and elapsed < 60
    report(5, "EKS linear-Gaussian consistency", ok,
           f"mean error {mean_err.max():.3f} sd, covariance rel err {cov_err:.3f}; {elapsed:.1f} s")


def covered(post, truth):
    lo, hi = np.quantile(post.theta, [0.005, 0.995], axis=0)
    return int(np.sum((truth >= lo) & (truth <= hi)))


@pytest.mark.slow
def test_criterion_6_lorenz_end_to_end(report, desk_problem):
    prior = mcmc.PriorSpec.lorenz()
    p = desk_problem
    runners = {
        "GBOED200": lambda fw, s: D.run_gboed(200, prior, fw, p.y_obs, p.gamma_obs, seed=s),
        "HM200": lambda fw, s: H.run_hm(prior, fw, p.y_obs, p.gamma_obs, seed=s),
        "CES200": lambda fw, s: run_ces(CESConfig.ces200(), prior, fw, p.y_obs, p.gamma_obs, seed=s),
        "LHS200": lambda fw, s: D.run_lhs(200, prior, fw, p.y_obs, p.gamma_obs, seed=s),
    }
    t0 = time.perf_counter()
    good = {}
    for name, run in runners.items():
        counts = []
        for seed in range(5):
            fw = lorenz_forward(p.cfg, seed=seed)
            counts.append(covered(run(fw, seed), p.theta_true))
            assert fw.count == 200
        good[name] = (sum(c >= 3 for c in counts), counts)
    elapsed = time.perf_counter() - t0
    ok = all(g >= 4 for g, _ in good.values())
    detail = "; ".join(f"{k} {g}/5 seeds (covered {c})" for k, (g, c) in good.items())
    report(6, "Lorenz desk calibration, 99% CI covers >= 3/4 params in >= 4/5 seeds", ok,
           f"{detail}; {elapsed:.0f} s")


def test_criterion_7_hm_structure(report, desk_problem):
    t0 = time.perf_counter()
    p = desk_problem
    fw = lorenz_forward(p.cfg, seed=0)
    post = H.run_hm(mcmc.PriorSpec.lorenz(), fw, p.y_obs, p.gamma_obs, seed=0,
                    config=H.HMConfig(final_particles=1000))
    fracs = [r["retained_fraction"] for r in post.info["waves"]]
    masks = post.info["space"].masks
    strict = len(fracs) == 5 and bool(np.all(np.diff(fracs) < 0))
    nested = all(not np.any(cur & ~prev) for prev, cur in zip(masks, masks[1:]))

    class Identity:
        def predict(self, X):
            X = np.atleast_2d(X)
            return X[:, :1].copy(), np.zeros((X.shape[0], 1))

    rng = np.random.default_rng(7)
    s2, hits = 0.04, 0
    for _ in range(100):
        truth = rng.uniform(-3, 3)
        space = H.NROYSpace(np.append(rng.uniform(-5, 5, 999), truth)[:, None])
        out = H.nroy_filter(space, Identity(), [truth + rng.normal(0, np.sqrt(s2))], [[s2]])
        hits += bool(out.mask[-1])
    elapsed = time.perf_counter() - t0
    ok = strict and nested and hits >= 95 and elapsed < 60
    report(7, "HM strict decrease, nesting, three-sigma retention", ok,
           f"fractions {[f'{f:.3g}' for f in fracs]}, nested {nested}, retention {hits}/100; "
           f"{elapsed:.1f} s")


def test_criterion_8_gboed_boed_reduction(report):
    t0 = time.perf_counter()
    prior = mcmc.PriorSpec([0.0], [1.0], ("x",))

    def fn(theta, call_seed):
        return np.array([np.sin(6 * theta[0]) + theta[0], np.cos(3 * theta[0])])

    res = 40
    cfg = D.DesignConfig(n0=4, grid_resolution=res, n_sweep=64, n_restarts=2, refit_restarts=1,
                         refit_every=100, refresh_every=1, inner_particles=2048, final_particles=200,
                         mcmc=mcmc.STMCMCConfig(n_mh=2))
    # uninformative data: the GBOED posterior covers the grid, so X' is the full grid
    flat = np.diag([1e8, 1e8])
    y = np.array([np.sin(1.8) + 0.3, np.cos(0.9)])
    a = D.run_boed(9, prior, CountingForward(fn, p=2), y, flat, seed=3, config=cfg)
    b = D.run_gboed(9, prior, CountingForward(fn, p=2), y, flat, seed=3, config=cfg)
    grid = D.grid_design(res, prior.lower, prior.upper)
    same_targets = all(np.array_equal(np.sort(s.Xprime, axis=0), grid)
                       for s in (a.info["state"], b.info["state"]))
    xa = np.array([r["x0"] for r in a.info["design_log"]])
    xb = np.array([r["x0"] for r in b.info["design_log"]])
    gap = float(np.max(np.abs(xa - xb))) if len(xa) == len(xb) == 5 else np.inf
    elapsed = time.perf_counter() - t0
    ok = same_targets and gap <= 1.0 / res and elapsed < 60
    report(8, "GBOED reduces to BOED on a dense grid", ok,
           f"X' equals grid: {same_targets}, max gap over 5 picks {gap:.2e} (tol {1 / res:.3f}); "
           f"{elapsed:.1f} s")


CHEAP = [f"l96={json.dumps(TINY_L96)}", "design.n_sweep=32", "design.n_polish=1",
         "design.n_restarts=1", "design.refit_restarts=1", "design.refit_every=100",
         "design.refresh_every=100", "design.inner_particles=128", "design.final_particles=128",
         "hm.pool_size=20000", "hm.lhs_restarts=2", "hm.n_restarts=1", "hm.final_particles=128",
         "ces.n_restarts=1", "ces.n_samples=128", "mcmc.n_mh=1"]


@pytest.mark.slow
def test_criterion_9_budget_accounting(report, tmp_path):
    advertised = {"boed200": 200, "gboed1000": 1000, "hm200": 200, "ces5400": 5400, "eks200": 200}
    assert cli.resolve(cli.load_preset("hm200")).method_config.waves == 5
    assert cli.resolve(cli.load_preset("hm200")).method_config.per_wave == 40
    ces = cli.resolve(cli.load_preset("ces5400")).method_config
    assert (ces.n_ens, ces.n_iter) == (100, 54)
    eks_cfg = cli.resolve(cli.load_preset("eks200")).method_config
    assert (eks_cfg.n_ens, eks_cfg.n_iter) == (20, 10)
    t0 = time.perf_counter()
    counts = {}
    for name, budget in advertised.items():
        method = cli.load_preset(name)["method"]
        args = [method, "--preset", name, "--out", str(tmp_path / name)]
        for s in CHEAP:
            args += ["--set", s]
        assert cli.main(args) == 0
        manifest = json.loads((tmp_path / name / "manifest.json").read_text())
        counts[name] = manifest["n_evals"]
    elapsed = time.perf_counter() - t0
    ok = all(counts[k] == v for k, v in advertised.items())
    report(9, "manifest evaluation counts equal preset budgets", ok,
           ", ".join(f"{k} {counts[k]}/{v}" for k, v in advertised.items()) + f"; {elapsed:.0f} s")


def test_criterion_10_metric_formulas(report):
    hand = M.ae(2, 1) == 1.0 and M.log_score(2, 1, 1) == -1.0

    theta = np.column_stack([np.linspace(0, 2, 50), np.full(50, 10.0), np.full(50, np.log(10.0)),
                             np.linspace(5, 15, 50)])
    summary = M.summarize(mcmc.PosteriorSamples(theta))
    c_mean, c_sd = summary["c"]
    constant = c_mean == pytest.approx(10.0, rel=1e-12) and c_sd <= 1e-12

    def runner(budget, seed):
        return mcmc.PosteriorSamples(theta + 1e-3 * budget, n_evals=budget)

    checkpoints = [50, 100, 150, 200]
    rows, _ = M.convergence_track(runner, checkpoints, np.array(lorenz_truth()), "lhs")
    cardinality = len(rows) == 4 * len(checkpoints)
    ok = hand and constant and cardinality
    report(10, "metric hand values, log c reporting, convergence rows", ok,
           f"AE/score hand values {hand}, constant c -> mean {c_mean:.12g} sd {c_sd:.1e}, "
           f"{len(rows)} rows for {len(checkpoints)} checkpoints")


def lorenz_truth():
    return (1.0, 10.0, float(np.log(10.0)), 10.0)
