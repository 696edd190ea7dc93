"""Independent reference computations shared by unit and acceptance tests."""

import math

import numpy as np

from bima.sem_model import (MediatorState, OutcomeState, mediator_grad_theta_alpha,
                            mediator_logpost, outcome_grad_theta, outcome_logpost)


def brute_outcome_logpost(state, data, bases, sigma2_gamma0=100.0):
    """Direct double loop over subjects and voxels."""
    p = data.p
    beta = np.zeros(p)
    for b, th in zip(bases, state.theta_beta):
        idx = data.grid.region_indices(b.region)
        for jl, j in enumerate(idx):
            latent = sum(b.Q[jl, l] * th[l] for l in range(b.L))
            beta[j] = math.copysign(max(abs(latent) - state.nu_beta, 0.0), latent)
    total = 0.0
    for i in range(data.n):
        mean = sum(beta[j] * data.M[i, j] / p for j in range(p))
        mean += state.gamma * data.X[i] + sum(state.xi[k] * data.C[i, k] for k in range(data.q))
        r = data.Y[i] - mean
        total += -0.5 * math.log(2 * math.pi * state.sigma2_Y) - 0.5 * r * r / state.sigma2_Y
    for b, th in zip(bases, state.theta_beta):
        for l in range(b.L):
            total -= 0.5 * th[l] ** 2 / (b.eigvals[l] * state.sigma2_beta)
    total -= 0.5 * (state.gamma ** 2 + sum(x * x for x in state.xi)) / sigma2_gamma0
    return total


def brute_mediator_logpost(state, data, bases):
    p, n = data.p, data.n
    alpha = np.zeros(p)
    zeta = np.zeros((data.q, p))
    eta = np.zeros((n, p))
    for r, b in enumerate(bases):
        idx = data.grid.region_indices(b.region)
        for jl, j in enumerate(idx):
            latent = float(b.Q[jl] @ state.theta_alpha[r])
            alpha[j] = math.copysign(max(abs(latent) - state.nu_alpha, 0.0), latent)
            for k in range(data.q):
                zeta[k, j] = float(b.Q[jl] @ state.theta_zeta[r][k])
            for i in range(n):
                eta[i, j] = float(b.Q[jl] @ state.theta_eta[r][i])
    total = 0.0
    for i in range(n):
        for j in range(p):
            mean = alpha[j] * data.X[i] + sum(zeta[k, j] * data.C[i, k] for k in range(data.q))
            r = data.M[i, j] - mean - eta[i, j]
            total += -0.5 * math.log(2 * math.pi * state.sigma2_M) - 0.5 * r * r / state.sigma2_M
    for r, b in enumerate(bases):
        lam = b.eigvals
        total -= 0.5 * float(np.sum(state.theta_alpha[r] ** 2 / lam)) / state.sigma2_alpha
        total -= 0.5 * float(np.sum(state.theta_zeta[r] ** 2 / lam)) / state.sigma2_zeta
        total -= 0.5 * float(np.sum(state.theta_eta[r] ** 2 / lam)) / state.sigma2_eta
    return total


def _latents(bases, theta):
    return np.concatenate([b.Q @ t for b, t in zip(bases, theta)])


def random_outcome_state(rng, data, bases, nu, kink_gap=1e-4):
    """Random state whose latent surface keeps ``kink_gap`` away from ``+-nu``."""
    while True:
        theta = [rng.standard_normal(b.L) * 2.0 for b in bases]
        lat = _latents(bases, theta)
        if np.min(np.abs(np.abs(lat) - nu)) > kink_gap:
            return OutcomeState(theta, float(rng.standard_normal()),
                                rng.standard_normal(data.q),
                                float(rng.uniform(0.3, 3.0)), float(rng.uniform(0.3, 3.0)), nu)


def random_mediator_state(rng, data, bases, nu, kink_gap=1e-4):
    while True:
        theta = [rng.standard_normal(b.L) * 2.0 for b in bases]
        lat = _latents(bases, theta)
        if np.min(np.abs(np.abs(lat) - nu)) > kink_gap:
            break
    return MediatorState(
        theta,
        [rng.standard_normal((data.q, b.L)) for b in bases],
        [rng.standard_normal((data.n, b.L)) for b in bases],
        *(float(v) for v in rng.uniform(0.3, 3.0, size=4)),
        nu_alpha=nu,
    )


def fd_gradient(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for l in range(len(theta)):
        e = np.zeros_like(theta)
        e[l] = h
        g[l] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def gradient_rel_error(model, state, data, bases, region):
    """Max-norm relative error between analytic and central-difference gradients."""
    if model == "outcome":
        analytic = outcome_grad_theta(state, data, bases, region)

        def f(th):
            s = state.copy()
            s.theta_beta[region] = th
            return outcome_logpost(s, data, bases)
        theta = state.theta_beta[region]
    else:
        analytic = mediator_grad_theta_alpha(state, data, bases, region)

        def f(th):
            s = state.copy()
            s.theta_alpha[region] = th
            return mediator_logpost(s, data, bases)
        theta = state.theta_alpha[region]
    numeric = fd_gradient(f, np.asarray(theta, dtype=np.float64))
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1.0))


def worst_gradient_error(model, n_states=100, seed=0):
    from conftest import make_dataset

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_states):
        data, bases = make_dataset(n=6, shape=(4, 4), blocks=(2, 1), q=2, seed=seed + k,
                                   cutoff=0.95)
        nu = float(rng.uniform(0.1, 1.0))
        state = (random_outcome_state if model == "outcome" else random_mediator_state)(
            rng, data, bases, nu)
        for r in range(len(bases)):
            worst = max(worst, gradient_rel_error(model, state, data, bases, r))
    return worst


def mc_z(samples, mean, var, batches=None):
    """Largest standardised deviation of sample means and variances from analytic values.

    Standard errors come from the empirical spread of ``x`` and of the squared
    deviations, so no Gaussian shape is assumed. For correlated chains pass
    ``batches`` to use batch means instead.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    N = x.shape[0]
    sq = (x - x.mean(axis=0)) ** 2
    if batches:
        usable = N - N % batches
        bx = x[:usable].reshape(batches, -1, x.shape[1]).mean(axis=1)
        bs = sq[:usable].reshape(batches, -1, x.shape[1]).mean(axis=1)
        se_mean = bx.std(axis=0, ddof=1) / math.sqrt(batches)
        se_var = bs.std(axis=0, ddof=1) / math.sqrt(batches)
    else:
        se_mean = x.std(axis=0, ddof=1) / math.sqrt(N)
        se_var = sq.std(axis=0, ddof=1) / math.sqrt(N)
    z_mean = np.abs(x.mean(axis=0) - mean) / se_mean
    z_var = np.abs(x.var(axis=0, ddof=1) - var) / se_var
    return float(max(np.max(z_mean), np.max(z_var)))


# ---------------------------------------------------------------------------
# dense conjugate posteriors


def _fields(bases, grid, coefs):
    """Per-voxel values of per-region coefficient stacks ``(m, L_r)``."""
    m = coefs[0].shape[0]
    out = np.zeros((m, grid.p))
    for b, c in zip(bases, coefs):
        out[:, grid.region_indices(b.region)] = np.einsum("ml,jl->mj", c, b.Q)
    return out


def _thresholded(bases, grid, theta, nu):
    lat = _fields(bases, grid, [np.atleast_2d(t) for t in theta])[0]
    return np.sign(lat) * np.maximum(np.abs(lat) - nu, 0.0)


def dense_gamma_xi(state, data, bases, sigma2_gamma0=100.0):
    beta = _thresholded(bases, data.grid, state.theta_beta, state.nu_beta)
    z = data.Y - data.M @ beta / data.p
    D = np.column_stack([data.X, data.C])
    P = D.T @ D / state.sigma2_Y + np.eye(D.shape[1]) / sigma2_gamma0
    cov = np.linalg.inv(P)
    return cov @ D.T @ z / state.sigma2_Y, cov


def _mediator_parts(state, data, bases):
    alpha = _thresholded(bases, data.grid, state.theta_alpha, state.nu_alpha)
    zeta = _fields(bases, data.grid, state.theta_zeta) if data.q else np.zeros((0, data.p))
    eta = _fields(bases, data.grid, state.theta_eta)
    return alpha, zeta, eta


def dense_zeta(state, data, bases, r, k):
    """Full conditional of ``theta_zeta[r][k]`` from the vectorised regression."""
    alpha, zeta, eta = _mediator_parts(state, data, bases)
    b = bases[r]
    idx = data.grid.region_indices(b.region)
    others = [kk for kk in range(data.q) if kk != k]
    R = data.M[:, idx] - np.outer(data.X, alpha[idx]) - eta[:, idx]
    if others:
        R = R - data.C[:, others] @ zeta[others][:, idx]
    ck = data.C[:, k]
    s2 = state.sigma2_M
    P = float(ck @ ck) * b.Q.T @ b.Q / s2 + np.diag(1 / (state.sigma2_zeta * b.eigvals))
    cov = np.linalg.inv(P)
    return cov @ (b.Q.T @ (R.T @ ck)) / s2, cov


def dense_eta(state, data, bases, r):
    """Unconstrained conditional of ``theta_eta[r]``: per-subject means ``(n, L)`` and shared cov."""
    alpha, zeta, _ = _mediator_parts(state, data, bases)
    b = bases[r]
    idx = data.grid.region_indices(b.region)
    R = data.M[:, idx] - np.outer(data.X, alpha[idx]) - data.C @ zeta[:, idx]
    s2 = state.sigma2_M
    P = b.Q.T @ b.Q / s2 + np.diag(1 / (state.sigma2_eta * b.eigvals))
    cov = np.linalg.inv(P)
    return (R @ b.Q) @ cov / s2, cov


def condition_on_nullspace(mean, cov, A):
    """Gaussian ``N(mean, cov)`` conditioned on ``A^T x = 0``."""
    G = cov @ A
    K = G @ np.linalg.inv(A.T @ G)
    return mean - K @ (A.T @ mean), cov - K @ G.T


def dense_eta_constrained(state, data, bases, r):
    """Mean and covariance of ``vec(theta_eta[r])`` (subject-major) on the constraint set."""
    m, S = dense_eta(state, data, bases, r)
    n, L = m.shape
    D = np.column_stack([data.X, data.C])
    A = np.kron(D, np.eye(L))
    return condition_on_nullspace(m.ravel(), np.kron(np.eye(n), S), A)


def dense_variance_params(state, data, bases, a=1.0, b0=1.0):
    """Inverse-gamma ``(shape, rate)`` per variance from brute-force sums of squares."""
    lam = [b.eigvals for b in bases]
    L = sum(len(x) for x in lam)
    if isinstance(state, OutcomeState):
        beta = _thresholded(bases, data.grid, state.theta_beta, state.nu_beta)
        e = data.Y - data.M @ beta / data.p - state.gamma * data.X - data.C @ state.xi
        qb = sum(float(np.sum(t ** 2 / l)) for t, l in zip(state.theta_beta, lam))
        return {"sigma2_Y": (a + data.n / 2, b0 + float(e @ e) / 2),
                "sigma2_beta": (a + L / 2, b0 + qb / 2)}
    alpha, zeta, eta = _mediator_parts(state, data, bases)
    E = data.M - np.outer(data.X, alpha) - data.C @ zeta - eta
    quad = lambda th: sum(float(np.sum(t ** 2 / l)) for t, l in zip(th, lam))  # noqa: E731
    rank = np.linalg.matrix_rank(np.column_stack([data.X, data.C]))
    return {"sigma2_M": (a + data.n * data.p / 2, b0 + float(np.sum(E * E)) / 2),
            "sigma2_alpha": (a + L / 2, b0 + quad(state.theta_alpha) / 2),
            "sigma2_eta": (a + (data.n - rank) * L / 2, b0 + quad(state.theta_eta) / 2),
            "sigma2_zeta": (a + data.q * L / 2, b0 + quad(state.theta_zeta) / 2)}


def conjugacy_check(n_draws=100_000, seed=0):
    """Standardised deviations of every Gibbs update against its dense oracle.

    Uses an ``n=8, p=12`` instance. Returns ``{update name: max |z|}``.
    """
    from conftest import make_dataset

    from bima.sampler import gibbs_eta_constrained, gibbs_gamma_xi, gibbs_variances, gibbs_zeta

    data, bases = make_dataset(n=8, shape=(4, 3), blocks=(2, 1), q=1, seed=seed, cutoff=0.95)
    rng = np.random.default_rng(seed)
    out = {}
    ost = random_outcome_state(rng, data, bases, 0.3)
    mean, cov = dense_gamma_xi(ost, data, bases)
    draws = np.array([np.r_[g, x] for g, x in
                      (gibbs_gamma_xi(ost, data, bases, rng) for _ in range(n_draws))])
    out["gamma_xi"] = mc_z(draws, mean, np.diag(cov))

    mst = random_mediator_state(rng, data, bases, 0.3)
    for r in range(len(bases)):
        for k in range(data.q):
            mean, cov = dense_zeta(mst, data, bases, r, k)
            draws = np.array([gibbs_zeta(mst, data, bases, r, k, rng) for _ in range(n_draws)])
            out[f"zeta[{r},{k}]"] = mc_z(draws, mean, np.diag(cov))
    for r in range(len(bases)):
        mean, cov = dense_eta_constrained(mst, data, bases, r)
        draws = np.array([gibbs_eta_constrained(mst, data, bases, r, rng).ravel()
                          for _ in range(n_draws)])
        out[f"eta[{r}]"] = mc_z(draws, mean, np.diag(cov))

    for name, st in (("outcome", ost), ("mediator", mst)):
        params = dense_variance_params(st, data, bases)
        draws = [gibbs_variances(st, data, bases, rng) for _ in range(n_draws)]
        for key, (shape, rate) in params.items():
            prec = 1.0 / np.array([d[key] for d in draws])
            out[f"{name}:{key}"] = mc_z(prec, shape / rate, shape / rate ** 2)
    return out


def constrained_eta_check(n_draws=100_000, seed=0):
    """Constrained draws of one basis index on an ``n=6, q=1`` toy.

    Returns ``(max constraint residual, relative Frobenius error of the covariance)``.
    """
    from conftest import make_dataset

    from bima.sampler import gibbs_eta_constrained

    data, bases = make_dataset(n=6, shape=(3, 2), blocks=(1, 1), q=1, seed=seed, cutoff=0.95)
    rng = np.random.default_rng(seed)
    st = random_mediator_state(rng, data, bases, 0.3)
    D = np.column_stack([data.X, data.C])
    draws = np.array([gibbs_eta_constrained(st, data, bases, 0, rng, l=0)
                      for _ in range(n_draws)])
    resid = float(np.max(np.abs(draws @ D)))
    m, S = dense_eta(st, data, bases, 0)
    # basis index 0 across subjects: isotropic prior/likelihood, so cov S[0,0] * I before conditioning
    _, cov = condition_on_nullspace(m[:, 0], S[0, 0] * np.eye(data.n), D)
    emp = np.cov(draws, rowvar=False)
    return resid, float(np.linalg.norm(emp - cov) / np.linalg.norm(cov))


def correlated_gaussian(d=10, seed=0):
    """Mean, covariance and precision of a fixed correlated Gaussian target."""
    rng = np.random.default_rng(seed)
    R, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cov = R @ np.diag(np.linspace(0.5, 2.0, d)) @ R.T
    mean = rng.uniform(-2, 2, d)
    return mean, cov, np.linalg.inv(cov)


def mala_invariance_check(steps=100_000, seed=0):
    """Adaptive MALA on a correlated 10-D Gaussian.

    Returns ``(max |z| of marginal moments, acceptance, target)``; standard
    errors use 100 batch means.
    """
    from bima.sampler import SamplerConfig, sample_mala

    mean, cov, prec = correlated_gaussian(10, seed)
    burn = steps // 5
    config = SamplerConfig(iters=steps + burn, burnin_frac=burn / (steps + burn), seed=seed)

    def logp(x):
        d = x - mean
        return -0.5 * float(d @ prec @ d)

    def grad(x):
        return -prec @ (x - mean)

    draws, acc, _ = sample_mala(logp, grad, np.zeros(10), config)
    target = min(max(config.target_const / 10, 0.2), 0.4)
    return mc_z(draws, mean, np.diag(cov), batches=100), acc, target


# ---------------------------------------------------------------------------
# command-line pipeline


def run_cli(*args, cwd=None):
    """Run ``bima`` in a fresh interpreter; returns the completed process."""
    import subprocess
    import sys

    return subprocess.run([sys.executable, "-m", "bima.cli", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)


def cli_pipeline(root):
    """Every command on a tiny problem, written under ``root``.

    Returns ``{relative path: bytes}`` for all files produced.
    """
    from pathlib import Path

    root = Path(root)
    steps = [
        ("simulate", "--n", 24, "--grid", "12x12x4", "--pattern", "dense", "--seed", 7,
         "--out", root / "data"),
        ("bases", "--data", root / "data", "--kernel", "matern:0.2:0.1", "--basis-frac", 0.5,
         "--out", root / "bases"),
        ("fit", "outcome", "--data", root / "data", "--bases", root / "bases", "--iters", 300,
         "--thin", 2, "--seed", 3, "--nu", 0.3, "--out", root / "fit_o"),
        ("fit", "mediator", "--data", root / "data", "--bases", root / "bases", "--iters", 200,
         "--seed", 4, "--nu", 0.3, "--out", root / "fit_m"),
        ("mediate", "--outcome-trace", root / "fit_o", "--mediator-trace", root / "fit_m",
         "--mode", "fdr:0.1", "--truth", root / "data", "--out", root / "report"),
        ("mediate", "--outcome-trace", root / "fit_o", "--mediator-trace", root / "fit_m",
         "--mode", "pip:0.1", "--out", root / "report_pip"),
        ("sensitivity", "--data", root / "data", "--nus", "0.05,0.2", "--kernel",
         "matern:0.2:0.1", "--basis-frac", 0.5, "--iters", 200, "--seed", 5,
         "--out", root / "sens.csv"),
        ("evaluate", "--n", 20, "--grid", "12x12x4", "--replications", 2, "--iters", 200,
         "--mediator-iters", 100, "--kernel", "matern:0.2:0.1", "--basis-frac", 0.5,
         "--workers", 2, "--seed", 6, "--out", root / "eval"),
    ]
    for step in steps:
        proc = run_cli(*step)
        if proc.returncode != 0:
            raise AssertionError(f"{step[0]} failed: {proc.stderr}")
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}
