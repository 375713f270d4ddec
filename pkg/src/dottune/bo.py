"""Bayesian-optimization epochs over a knob subset."""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
from scipy import linalg

from .session import TuningSession
from .space import Configuration, KnobCatalog, decode, encode, project, sample_random, sample_random_encoded, snap
from .surrogate import GpSurrogate, _cholesky, expected_improvement, gp_condition, gp_fit, matern52

COLD_START = 10
POOL_RANDOM = 2048
POOL_LOCAL = 256
LOCAL_SD = 0.1
FIT_RESTARTS = 8
REFIT_EVERY = 5
SCREEN_ITER = 25
RATIO_BOUNDS = (0.25, 4.0)


@dataclass
class BoResult:
    obs: object
    y_star: float | None
    best_config: Configuration | None
    n_evals: int


def candidate_pool(catalog: KnobCatalog, subset, incumbent: np.ndarray | None, rng,
                   n_random: int = POOL_RANDOM, n_local: int = POOL_LOCAL) -> np.ndarray:
    """Uniform random points plus Gaussian perturbations of the incumbent, snapped to valid values."""
    pool = [sample_random_encoded(catalog, subset, n_random, rng)]
    if incumbent is not None and n_local > 0:
        d = len(incumbent)
        mask = rng.random((n_local, d)) < min(1.0, 3.0 / d)
        noise = rng.normal(0.0, LOCAL_SD, (n_local, d)) * mask
        pool.append(snap(catalog, subset, incumbent + noise))
    return np.vstack(pool)


def bo_propose(model: GpSurrogate, catalog: KnobCatalog, subset, rng, base: Configuration,
               incumbent: np.ndarray | None = None, pool: np.ndarray | None = None) -> Configuration:
    """Decode the expected-improvement maximizer over a candidate pool.

    The improvement reference is the best posterior mean at the training
    inputs, which is steadier than the best noisy score.  Knobs outside
    ``subset`` take their value from ``base``.
    """
    rng = np.random.default_rng(rng)
    if pool is None:
        pool = candidate_pool(catalog, subset, incumbent, rng)
    mu_train, _ = model.predict(model.X)
    mean, var = model.predict(pool)
    ei = expected_improvement(mean, var, float(mu_train.max()))
    return decode(catalog, subset, pool[int(np.argmax(ei))], base)


def bo_run(session: TuningSession, subset, E: int, n_cold: int = COLD_START) -> BoResult:
    """Run ``E`` evaluations on ``subset``, reusing every projectable past observation.

    With nothing to reuse, the first ``min(n_cold, E)`` evaluations are random.
    Hyperparameters get a full multi-start fit at the first guided step, a
    warm-started refit every ``REFIT_EVERY`` steps, and in between the model is
    only re-conditioned on the new data.  ``y_star`` is the best full-fidelity score
    of this epoch (None when the epoch produced no full measurement).
    """
    if E < 1:
        raise ValueError("E must be >= 1")
    catalog = session.catalog
    subset = catalog.sort_subset(subset)
    rng = session.rng["bo"]
    start = len(session.obs)
    X, _, _ = project(session.obs, catalog, subset, session.base, session.projection)
    if len(X) == 0:
        for config in sample_random(catalog, subset, min(n_cold, E), rng, base=session.base):
            session.evaluate(config, subset)
    theta = None
    step = 0
    while len(session.obs) - start < E:
        X, y_raw, kept = project(session.obs, catalog, subset, session.base, session.projection)
        if len(X) < 2:
            config = sample_random(catalog, subset, 1, rng, base=session.base)[0]
        else:
            y = calibrated_scores(session, X, y_raw, kept, theta)
            if theta is None:
                model = gp_fit(X, y, rng, n_restarts=FIT_RESTARTS, screen_iter=SCREEN_ITER)
            elif step % REFIT_EVERY == 0:
                model = gp_fit(X, y, rng, n_restarts=1, init=theta)
            else:
                model = gp_condition(X, y, theta)
            theta = model.theta
            step += 1
            inc = _incumbent(session, catalog, subset, X, y, kept)
            config = bo_propose(model, catalog, subset, rng, session.base, incumbent=inc)
        session.evaluate(config, subset)
    epoch = [o for o in session.obs.observations[start:] if o.fidelity == "full"]
    best = max(epoch, key=lambda o: o.score) if epoch else None
    return BoResult(session.obs, None if best is None else best.score,
                    None if best is None else dict(best.config), len(session.obs) - start)


def fidelity_gap_ratio(X, y, partial, theta) -> float:
    """Full/probe ratio by generalized least squares under the GP prior.

    Models ``y = mu + g(x) - (r - 1) * y * partial`` with ``g`` drawn from the
    kernel given by ``theta``, so the probe gap is judged against full scores at
    nearby configurations rather than against the probe of the same run (which
    the gate selected for being high).
    """
    d = X.shape[1]
    K = matern52(X, X, np.exp(theta[:d]), math.exp(theta[d])) + math.exp(theta[d + 1]) * np.eye(len(X))
    L, _ = _cholesky(K)
    H = np.column_stack([np.ones(len(y)), np.where(partial, y, 0.0)])
    A = linalg.cho_solve((L, True), H, check_finite=False)
    beta = np.linalg.solve(H.T @ A, A.T @ y)
    return float(1.0 - beta[1])


def calibrated_scores(session: TuningSession, X, y, kept, theta) -> np.ndarray:
    """Surrogate training targets: throughput probe scores lifted onto the full scale.

    Logged scores are untouched.  The ratio comes from the GLS fit once the GP
    has hyperparameters, and from the raw full/probe pairs before that.
    """
    if session.bench.mode != "throughput":
        return y
    partial = np.array([o.fidelity == "partial" and o.raw_metric is not None for o in kept])
    full = np.array([o.fidelity == "full" for o in kept])
    if not partial.any():
        return y
    if theta is not None and full.sum() >= 2:
        try:
            r = fidelity_gap_ratio(X, y, partial, theta)
        except (linalg.LinAlgError, np.linalg.LinAlgError):
            r = None
        if r is not None and math.isfinite(r):
            session.fidelity_ratio = min(max(r, RATIO_BOUNDS[0]), RATIO_BOUNDS[1])
    ratio = session.probe_ratio()
    if ratio is None:
        return y
    return np.where(partial, y * ratio, y)


def _incumbent(session, catalog, subset, X, y, kept) -> np.ndarray:
    full = [i for i, o in enumerate(kept) if o.fidelity == "full"]
    i = max(full, key=lambda j: y[j]) if full else int(np.argmax(y))
    return X[i]
