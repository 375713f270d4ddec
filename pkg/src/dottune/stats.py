"""Evaluation protocol: significance tests, convergence detection, replication and stability.

The t and chi-square tail probabilities come from the regularized incomplete
beta and gamma functions implemented here with continued fractions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_EPS = 1e-16
_TINY = 1e-300
_MAXIT = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAXIT):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0.0:
        return 1.0
    ln_front = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(_MAXIT):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                return 1.0 - total * math.exp(ln_front)
        raise ArithmeticError("incomplete gamma series did not converge")
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAXIT):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = b + an / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(ln_front) * h
    raise ArithmeticError("incomplete gamma continued fraction did not converge")


def t_sf2(t: float, dof: float) -> float:
    """Two-tailed tail probability P(|T| >= |t|) of Student's t."""
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * dof, 0.5, dof / (dof + t * t))


def chi2_sf(x: float, k: float) -> float:
    return gammaincc(0.5 * k, 0.5 * x)


# ---------------------------------------------------------------------------


def welch_t_test(a, b) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test: ``(t, dof, two_tailed_p)``.

    Two constant samples give p = 1 when equal and p = 0 otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = float(a.mean() - b.mean())
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, float(a.size + b.size - 2), 1.0
        return math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return t, dof, t_sf2(t, dof)


def _rank_row(row: np.ndarray) -> np.ndarray:
    order = np.argsort(row, kind="stable")
    ranks = np.empty(len(row))
    sorted_row = row[order]
    i = 0
    while i < len(row):
        j = i
        while j + 1 < len(row) and sorted_row[j + 1] == sorted_row[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class FriedmanResult:
    chi2: float
    p: float
    mean_ranks: np.ndarray


def friedman_test(scores) -> FriedmanResult:
    """Friedman test on a blocks x treatments matrix, with tie correction.

    Ranks are taken within each block (1 = smallest value, ties averaged).
    """
    X = np.asarray(scores, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise ValueError("need a 2-D matrix with at least 2 blocks and 2 treatments")
    n, k = X.shape
    R = np.vstack([_rank_row(row) for row in X])
    ties = 0.0
    for row in X:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * k * (k * k - 1))
    sums = R.sum(0)
    raw = 12.0 / (n * k * (k + 1)) * float(np.sum(sums ** 2)) - 3.0 * n * (k + 1)
    if correction <= 0:
        return FriedmanResult(0.0, 1.0, R.mean(0))
    chi2 = max(raw / correction, 0.0)
    return FriedmanResult(chi2, chi2_sf(chi2, k - 1), R.mean(0))


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


# ---------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class Convergence:
    """Convergence iteration (1-based) and the stagnation point it was derived from."""

    iteration: int
    converged: bool
    t_star: int | None
    reference: float | None


WINDOW = 100


def _convergence(series, maximize: bool, rel: float, band: float) -> Convergence:
    s = np.asarray(series, dtype=float)
    n = len(s)
    if n <= WINDOW:
        raise ValueError(f"series must be longer than {WINDOW}")
    if not np.all(np.isfinite(s)):
        raise ValueError("series must be finite")
    pick = np.max if maximize else np.min
    for t in range(WINDOW + 1, n + 1):
        cur = pick(s[t - WINDOW:t])
        prev = pick(s[max(1, t - 2 * WINDOW + 1) - 1:t - WINDOW])
        gain = (cur - prev) / abs(prev) if maximize else (prev - cur) / abs(prev)
        if gain < rel:
            ref = float(pick(s[:t - 1]))
            hit = s >= band * ref if maximize else s <= band * ref
            return Convergence(int(np.argmax(hit)) + 1, True, t, ref)
    return Convergence(n, False, None, None)


def convergence_oltp(max_tps) -> Convergence:
    """Iteration at which best-so-far TPS first reaches 95% of its value at stagnation.

    Stagnation ``t*`` is the first ``t > 100`` where the best over steps
    ``t-99..t`` beats the best over ``max(1, t-199)..t-100`` by less than 5%.
    """
    return _convergence(max_tps, True, 0.05, 0.95)


def convergence_olap(best_time) -> Convergence:
    """Batch-time analogue: 1% stagnation threshold and a ``<= 1.01 E*`` band."""
    return _convergence(best_time, False, 0.01, 1.01)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    cv: float
    ci95: tuple[float, float]
    n: int


def summarize(values) -> Summary:
    """Mean, sample SD, CV and normal-approximation 95% interval."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    half = 1.96 * sd / math.sqrt(v.size)
    cv = sd / abs(mean) if mean != 0 else math.nan
    return Summary(mean, sd, cv, (mean - half, mean + half), int(v.size))


@dataclass
class ReplicationReport:
    seeds: list[int]
    best_scores: list[float]
    convergence_iters: list[int]
    convergence_ms: list[float]
    converged: list[bool]
    logs: list = field(default_factory=list, repr=False)

    def summaries(self) -> dict[str, Summary]:
        return {
            "best_score": summarize(self.best_scores),
            "convergence_iter": summarize(self.convergence_iters),
            "convergence_ms": summarize(self.convergence_ms),
        }

    def to_dict(self) -> dict:
        out = {"seeds": self.seeds, "best_scores": self.best_scores,
               "convergence_iters": self.convergence_iters, "convergence_ms": self.convergence_ms,
               "converged": self.converged}
        out["summary"] = {k: vars(s) for k, s in self.summaries().items()}
        return out


def replicate(run: Callable[[int], object], seeds: Sequence[int] | int = 5, direction: str = "maximize") -> ReplicationReport:
    """Run ``run(seed)`` once per seed and aggregate the resulting ``RunLog`` objects.

    ``run`` must build a fresh target per call.  An integer ``seeds`` means
    seeds ``0..seeds-1``.  Convergence uses the best-so-far score series; for
    minimized metrics it is applied to the raw best time.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else sorted(seeds)
    report = ReplicationReport(seeds, [], [], [], [])
    for seed in seeds:
        log = run(seed)
        best = log.best_series()
        best = _fill_leading(best)
        if direction == "maximize":
            series = best
            conv = convergence_oltp(series) if len(series) > WINDOW else Convergence(len(series), False, None, None)
        else:
            raw = _best_raw_series(log)
            conv = convergence_olap(raw) if len(raw) > WINDOW else Convergence(len(raw), False, None, None)
        wall = np.cumsum([r["wall_ms"] for r in log.records])
        report.best_scores.append(float(log.best_score))
        report.convergence_iters.append(conv.iteration)
        report.convergence_ms.append(float(wall[conv.iteration - 1]) if len(wall) else 0.0)
        report.converged.append(conv.converged)
        report.logs.append(log)
    return report


def _fill_leading(series: np.ndarray) -> np.ndarray:
    s = np.array(series, dtype=float)
    finite = np.isfinite(s)
    if finite.any():
        s[: int(np.argmax(finite))] = s[finite][0]
    return s


def _best_raw_series(log) -> np.ndarray:
    out, best = [], None
    best_score = -math.inf
    for r in log.records:
        if r["fidelity"] == "full" and r["raw_metric"] is not None and r["score"] > best_score:
            best_score, best = r["score"], r["raw_metric"]
        out.append(best)
    return _fill_leading(np.array([math.nan if v is None else v for v in out], dtype=float))


# ---------------------------------------------------------------------------
# studies


def pairwise_jaccard(sets: Sequence[set]) -> np.ndarray:
    n = len(sets)
    M = np.ones((n, n))
    for i, j in itertools.combinations(range(n), 2):
        M[i, j] = M[j, i] = jaccard(sets[i], sets[j])
    return M


@dataclass
class StabilityCell:
    sampler: str
    size: int
    matrix: np.ndarray
    mean: float
    sd: float


def stability_study(target, sample_sizes=(50, 100, 200), samplers=("random", "lhs"),
                    n_seeds: int = 5, top_k: int = 20, seed: int = 0, n_trees: int = 100) -> list[StabilityCell]:
    """Top-``k`` forest-ranking overlap across seeds, per sampler and sample size.

    Each seed draws its own design over all knobs, benchmarks it at full
    fidelity on ``target`` (a synthetic target), ranks knobs by forest
    importance and keeps the top ``k``.  Only distinct-seed pairs enter the
    mean and SD.
    """
    from .bench import BenchPolicy
    from .forest import forest_fit
    from .session import substream
    from .space import encode_many, sample_lhs, sample_random

    catalog = target.catalog
    names = catalog.names
    policy = BenchPolicy(mode="throughput" if target.surface.mode == "throughput" else "batch")
    out = []
    for sampler in samplers:
        draw = {"random": sample_random, "lhs": sample_lhs}[sampler]
        for size in sample_sizes:
            tops = []
            for s in range(n_seeds):
                rng = substream(seed * 1_000_003 + s, f"stability/{sampler}/{size}")
                configs = draw(catalog, names, size, rng)
                y = np.array([target.run(c, "full", policy, int(rng.integers(2**63 - 1)))[0] for c in configs])
                if target.surface.mode == "batch":
                    y = -y
                forest = forest_fit(encode_many(catalog, names, configs), y, n_trees=n_trees, rng=rng)
                order = np.argsort(-forest.importances, kind="stable")[:top_k]
                tops.append({names[i] for i in order})
            M = pairwise_jaccard(tops)
            vals = M[np.triu_indices(n_seeds, 1)]
            out.append(StabilityCell(sampler, size, M, float(vals.mean()) if vals.size else 1.0,
                                     float(vals.std(ddof=1)) if vals.size > 1 else 0.0))
    return out


def mape_sweep(target, cuts=(10, 20, 40, 60), n_runs: int = 500, seed: int = 0,
               percentiles=(50, 95)) -> list[dict]:
    """Absolute percentage error of the cheap probe against the full measurement.

    Throughput targets sweep ``t_cut`` (probe = mean TPS over the first
    ``t_cut`` seconds, full = steady-window mean of the same run).  Batch
    targets sweep the query fraction and extrapolate the subset time by it.
    Each run uses a fresh random configuration.  Returns one row per
    ``(cut, percentile)`` plus a ``mape`` row with the mean.
    """
    from .bench import BenchPolicy, mape
    from .session import substream
    from .space import sample_random
    from .targets import simulate_batch, simulate_throughput

    surface = target.surface
    catalog = surface.catalog
    rows = []
    for cut in cuts:
        rng = substream(seed, f"mape/{cut}")
        configs = sample_random(catalog, catalog.names, n_runs, rng)
        partial, full = [], []
        for config in configs:
            run_seed = int(rng.integers(2**63 - 1))
            if surface.mode == "throughput":
                policy = BenchPolicy(t_cut=cut)
                series = simulate_throughput(surface, config, int(policy.t_max), run_seed)
                partial.append(series[: int(cut)].mean())
                full.append(series[-int(policy.steady_window):].mean())
            else:
                q = len(surface.query_times)
                k = max(1, math.ceil(cut * q - 1e-9))
                idx = np.random.default_rng(run_seed).choice(q, size=k, replace=False)
                partial.append(simulate_batch(surface, config, idx, run_seed) / (k / q))
                full.append(simulate_batch(surface, config, None, run_seed))
        partial, full = np.array(partial), np.array(full)
        ape = np.abs(partial - full) / np.abs(full)
        for pct in percentiles:
            rows.append({"cut": cut, "stat": f"p{pct}", "value": float(np.percentile(ape, pct))})
        rows.append({"cut": cut, "stat": "mape", "value": mape(partial, full)})
    return rows
