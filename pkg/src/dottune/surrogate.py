"""Gaussian-process regression with a Matérn-5/2 ARD kernel, and expected improvement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack
from scipy.special import ndtr

SQRT5 = math.sqrt(5.0)
LOG_BOUNDS = (math.log(1e-3), math.log(1e3))
NOISE_LOG_BOUNDS = (math.log(1e-6), math.log(1.0))
SIGNAL_FLOOR = 1e-12


def matern52(X1: np.ndarray, X2: np.ndarray, lengthscales: np.ndarray, signal_var: float) -> np.ndarray:
    A = X1 / lengthscales
    B = X2 / lengthscales
    r2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    r = np.sqrt(np.maximum(r2, 0.0))
    return signal_var * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + jitter*I, doubling the jitter until it succeeds."""
    scale = float(np.mean(np.diag(K)))
    jitter = 1e-8 * scale
    while True:
        try:
            return linalg.cholesky(K + jitter * np.eye(len(K)), lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            if jitter > 1e-2 * scale:
                raise
            jitter *= 2.0


def log_marginal_likelihood(theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                            noise_var: float | None = None, grad: bool = True):
    """Log marginal likelihood of standardized targets ``y``.

    ``theta`` holds log length-scales, log signal variance and (unless
    ``noise_var`` is fixed) log noise variance.  With ``grad=True`` returns
    ``(lml, d lml / d theta)``.
    """
    n, d = X.shape
    ls = np.exp(theta[:d])
    s2 = math.exp(theta[d])
    fixed_noise = noise_var is not None
    nv = noise_var if fixed_noise else math.exp(theta[d + 1])

    A = X / ls
    sq = (A * A).sum(1)
    r = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * A @ A.T, 0.0))
    e = np.exp(-SQRT5 * r)
    Kf = s2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    K = Kf + nv * np.eye(n)
    L, _ = _cholesky(K)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return lml
    Kinv, _ = lapack.dpotri(L, lower=1)
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    W = np.outer(alpha, alpha) - Kinv
    # d Kf / d log l_k = s2 * 5/3 * (1 + sqrt5 r) e^{-sqrt5 r} * (x_ik - x_jk)^2 / l_k^2
    M = W * (s2 * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e)
    rowsum = M.sum(1)
    quad = ((M @ X) * X).sum(0)
    g_ls = ((X * X).T @ rowsum - quad) / (ls * ls)
    g_s2 = 0.5 * np.sum(W * Kf)
    parts = [g_ls, [g_s2]]
    if not fixed_noise:
        parts.append([0.5 * nv * np.trace(W)])
    return lml, np.concatenate(parts)


@dataclass(frozen=True)
class GpSurrogate:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    y_mean: float
    y_scale: float
    L: np.ndarray
    alpha: np.ndarray

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscales), [math.log(self.signal_var), math.log(max(self.noise_var, 1e-300))]])

    def predict(self, Xq: np.ndarray, latent: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance (original score units) at rows of ``Xq``."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {Xq.shape[1]}")
        Ks = matern52(Xq, self.X, self.lengthscales, self.signal_var)
        mean = Ks @ self.alpha
        v = linalg.solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        var = np.maximum(self.signal_var - (v * v).sum(0), 0.0)
        if not latent:
            var = var + self.noise_var
        return mean * self.y_scale + self.y_mean, var * self.y_scale ** 2


def _standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(np.mean(y))
    scale = float(np.std(y))
    if not scale > 0:
        scale = 1.0
    return (y - mean) / scale, mean, scale


def _build(X, y, ys, mean, scale, ls, s2, nv) -> GpSurrogate:
    K = matern52(X, X, ls, s2) + nv * np.eye(len(X))
    L, _ = _cholesky(K)
    alpha = linalg.cho_solve((L, True), ys, check_finite=False)
    return GpSurrogate(X, y, ls, s2, nv, mean, scale, L, alpha)


def gp_fit(X, y, rng=None, n_restarts: int = 8, noise_var: float | None = None,
           init: np.ndarray | None = None, maxiter: int = 200, screen_iter: int | None = None) -> GpSurrogate:
    """Fit hyperparameters by multi-start L-BFGS-B on the log marginal likelihood.

    Scores are standardized before fitting.  ``noise_var`` fixes the noise
    variance (standardized units) instead of learning it.  ``init`` adds a warm
    start (e.g. the previous fit's ``theta``) as the first restart.  With
    ``screen_iter`` every start first runs that many iterations and only the
    best one continues up to ``maxiter``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
        raise ValueError("need at least 2 rows and 1 column")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    if np.isnan(X).any() or np.isnan(y).any():
        raise ValueError("NaN in training data")
    n, d = X.shape
    ys, mean, scale = _standardize(y)
    if np.ptp(y) == 0:
        nv = 0.0 if noise_var is None else noise_var
        return _build(X, y, ys, mean, scale, np.ones(d), SIGNAL_FLOOR, nv)

    rng = np.random.default_rng(rng)
    learn_noise = noise_var is None
    bounds = [LOG_BOUNDS] * (d + 1) + ([NOISE_LOG_BOUNDS] if learn_noise else [])

    starts = []
    if init is not None:
        theta0 = np.asarray(init, dtype=float)[: d + 1 + learn_noise]
        starts.append(np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds]))
    default = np.concatenate([np.full(d, math.log(0.5 * math.sqrt(d))), [0.0], [math.log(0.05)] if learn_noise else []])
    if init is None:
        starts.append(default)
    while len(starts) < n_restarts:
        s = np.concatenate([
            rng.uniform(math.log(0.05), math.log(5.0 * math.sqrt(d)), d),
            [rng.uniform(math.log(0.1), math.log(10.0))],
            [rng.uniform(math.log(1e-4), math.log(0.5))] if learn_noise else [],
        ])
        starts.append(s)

    def objective(theta):
        try:
            f, g = log_marginal_likelihood(theta, X, ys, noise_var)
        except linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        return -f, -g

    def run(theta0, iters):
        return optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                                 options={"maxiter": iters})

    screen = maxiter if screen_iter is None or len(starts) == 1 else min(screen_iter, maxiter)
    best_theta, best_val, best_done = None, np.inf, True
    for s in starts:
        res = run(s, screen)
        if res.fun < best_val:
            best_val, best_theta, best_done = res.fun, res.x, res.nit < screen
    if not best_done and screen < maxiter:
        res = run(best_theta, maxiter)
        if res.fun <= best_val:
            best_theta = res.x
    ls = np.exp(best_theta[:d])
    s2 = math.exp(best_theta[d])
    nv = math.exp(best_theta[d + 1]) if learn_noise else noise_var
    return _build(X, y, ys, mean, scale, ls, s2, nv)


def gp_condition(X, y, theta) -> GpSurrogate:
    """Posterior on ``(X, y)`` with hyperparameters ``theta`` held fixed (no optimization)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = X.shape[1]
    ys, mean, scale = _standardize(y)
    if np.ptp(y) == 0:
        return _build(X, y, ys, mean, scale, np.ones(d), SIGNAL_FLOOR, math.exp(theta[d + 1]))
    return _build(X, y, ys, mean, scale, np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]))


def gp_predict(model: GpSurrogate, x) -> tuple[float, float]:
    mean, var = model.predict(np.reshape(np.asarray(x, dtype=float), (1, -1)))
    return float(mean[0]), float(var[0])


def expected_improvement(mean, var, best) -> np.ndarray:
    """EI for maximization; reduces to max(0, mean - best) where var == 0."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    diff = mean - best
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, diff / np.where(sd > 0, sd, 1.0), 0.0)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = np.where(sd > 0, diff * ndtr(z) + sd * pdf, np.maximum(diff, 0.0))
    return np.maximum(ei, 0.0)


def acquisition_ei(model: GpSurrogate, x, best_so_far: float) -> float:
    mean, var = gp_predict(model, x)
    return float(expected_improvement(mean, var, best_so_far))
