"""Evaluation backends.

``SyntheticTarget`` wraps a :class:`SyntheticSurface`, a noisy DBMS stand-in
whose knob importances are known exactly.  ``ExternalTarget`` shells out to a
user-supplied benchmark driver speaking a one-line JSON protocol.
"""

from __future__ import annotations

import json
import math
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import BenchPolicy, Measurement
from .space import KnobCatalog, KnobSpec, validate

SHAPES = ("saturating", "peak", "step")
RAMP_START = 0.6
STEADY = 30


class TargetError(RuntimeError):
    """A benchmark run failed; ``output`` carries whatever the target printed."""

    def __init__(self, message: str, output: str = ""):
        super().__init__(message)
        self.output = output


@dataclass(frozen=True)
class Effect:
    """Shape of one knob's contribution, a function of its encoded value ``u`` in [0, 1].

    ``saturating`` rises as ``(1 - exp(-rate u)) / (1 - exp(-rate))``,
    ``peak`` is a Gaussian bump at ``center`` with sd ``width``, and ``step``
    switches from 0 to 1 at ``threshold``.  All shapes map into [0, 1].
    """

    shape: str
    weight: float
    rate: float = 4.0
    center: float = 0.5
    width: float = 0.15
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown effect shape {self.shape!r}")
        if self.weight < 0:
            raise ValueError("effect weights must be non-negative")
        if self.shape == "peak" and self.width <= 0:
            raise ValueError("peak width must be positive")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.shape == "saturating":
            if abs(self.rate) < 1e-12:
                return u
            return np.expm1(-self.rate * u) / np.expm1(-self.rate)
        if self.shape == "peak":
            return np.exp(-0.5 * ((u - self.center) / self.width) ** 2)
        return (u >= self.threshold).astype(float)

    def to_dict(self) -> dict:
        out = {"shape": self.shape, "weight": self.weight}
        if self.shape == "saturating":
            out["rate"] = self.rate
        elif self.shape == "peak":
            out.update(center=self.center, width=self.width)
        else:
            out["threshold"] = self.threshold
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Effect":
        return cls(**d)


@dataclass
class SyntheticSurface:
    """Noiseless performance model plus its measurement-noise settings.

    The surface factor is ``1 + sum w_k e_k(u_k) + sum w_ij e_i(u_i) e_j(u_j)``.
    Throughput surfaces return ``base_metric * factor``; batch surfaces return
    total time ``base_metric / factor`` where ``base_metric = sum(query_times)``.
    """

    catalog: KnobCatalog
    influential: dict[str, Effect]
    interactions: list[tuple[str, str, float]] = field(default_factory=list)
    base_metric: float = 1000.0
    noise_cv: float = 0.0
    mode: str = "throughput"
    ramp_seconds: float = 20.0
    query_times: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("throughput", "batch"):
            raise ValueError(f"unknown surface mode {self.mode!r}")
        if self.base_metric <= 0 or self.noise_cv < 0:
            raise ValueError("need base_metric > 0 and noise_cv >= 0")
        for name in self.influential:
            self.catalog[name]
        self.interactions = [(a, b, float(w)) for a, b, w in self.interactions]
        for a, b, w in self.interactions:
            if a not in self.influential or b not in self.influential:
                raise ValueError("interactions may only couple influential knobs")
            if w < 0:
                raise ValueError("interaction weights must be non-negative")
        if self.mode == "batch":
            if self.query_times is None or len(self.query_times) == 0:
                raise ValueError("batch surfaces need query_times")
            q = np.asarray(self.query_times, dtype=float)
            if np.any(q <= 0):
                raise ValueError("query times must be positive")
            self.query_times = q * (self.base_metric / q.sum())

    @property
    def direction(self) -> str:
        return "maximize" if self.mode == "throughput" else "minimize"

    def factor(self, config) -> float:
        return float(self._factor_encoded({n: self.catalog[n].encode(config[n]) for n in self.influential}))

    def _factor_encoded(self, u: dict):
        e = {name: eff(u[name]) for name, eff in self.influential.items()}
        total = 1.0
        for name, eff in self.influential.items():
            total = total + eff.weight * e[name]
        for a, b, w in self.interactions:
            total = total + w * e[a] * e[b]
        return total

    def metric_from_factor(self, f):
        return self.base_metric * f if self.mode == "throughput" else self.base_metric / f

    def to_json(self) -> dict:
        doc = {
            "knobs": [k.to_dict() for k in self.catalog.knobs],
            "influential": {n: e.to_dict() for n, e in self.influential.items()},
            "interactions": [[a, b, w] for a, b, w in self.interactions],
            "base_metric": self.base_metric,
            "noise_cv": self.noise_cv,
            "mode": self.mode,
            "query_times": None if self.query_times is None else [float(q) for q in self.query_times],
        }
        if self.catalog.ranking is not None:
            doc["ranking"] = list(self.catalog.ranking)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSurface":
        catalog = KnobCatalog([KnobSpec.from_dict(d) for d in doc["knobs"]], doc.get("ranking"))
        q = doc.get("query_times")
        return cls(
            catalog,
            {n: Effect.from_dict(e) for n, e in doc["influential"].items()},
            [tuple(t) for t in doc.get("interactions", [])],
            float(doc["base_metric"]),
            float(doc.get("noise_cv", 0.0)),
            doc.get("mode", "throughput"),
            query_times=None if q is None else np.asarray(q, dtype=float),
        )


def save_surface(surface: SyntheticSurface, path) -> None:
    Path(path).write_text(json.dumps(surface.to_json(), indent=2))


def load_surface(path) -> SyntheticSurface:
    return SyntheticSurface.from_json(json.loads(Path(path).read_text()))


def _checked(surface: SyntheticSurface, config) -> None:
    problems = validate(surface.catalog, config)
    if problems:
        raise ValueError("invalid configuration: " + "; ".join(problems))


def surface_eval(surface: SyntheticSurface, config) -> float:
    """Noiseless metric of ``config`` (TPS, or total batch seconds)."""
    _checked(surface, config)
    return float(surface.metric_from_factor(surface.factor(config)))


def simulate_throughput(surface: SyntheticSurface, config, seconds: int, rng) -> np.ndarray:
    """Per-second TPS series with a linear warm-up ramp from 0.6 to 1.0.

    Each second carries independent multiplicative noise, sized so that the
    mean over a 30 s steady window has coefficient of variation ``noise_cv``.
    The series for a shorter ``seconds`` is a prefix of the longer one.
    """
    if surface.mode != "throughput":
        raise ValueError("surface is not a throughput surface")
    rng = np.random.default_rng(rng)
    level = surface_eval(surface, config)
    noise = rng.normal(0.0, surface.noise_cv * math.sqrt(STEADY), size=int(seconds))
    t = np.arange(int(seconds), dtype=float)
    ramp = RAMP_START + (1 - RAMP_START) * np.minimum(1.0, t / surface.ramp_seconds)
    return np.maximum(level * ramp * (1.0 + noise), 0.0)


def simulate_batch(surface: SyntheticSurface, config, query_subset=None, rng=None) -> float:
    """Total seconds for ``query_subset`` (all queries when None).

    Each query time is divided by the surface factor; the whole batch shares one
    multiplicative noise draw with coefficient of variation ``noise_cv``.
    """
    if surface.mode != "batch":
        raise ValueError("surface is not a batch surface")
    _checked(surface, config)
    rng = np.random.default_rng(rng)
    q = surface.query_times if query_subset is None else surface.query_times[np.asarray(query_subset, dtype=int)]
    noise = rng.normal(0.0, surface.noise_cv) if surface.noise_cv > 0 else 0.0
    return float(q.sum() / surface.factor(config) * max(1.0 + noise, 0.05))


@dataclass
class SyntheticTarget:
    """Target handle over a synthetic surface.

    ``run`` returns ``(metric, probe_metric)``; throughput probe and full phases
    with the same seed read the same simulated series.
    """

    surface: SyntheticSurface
    kind: str = "synthetic"

    @property
    def direction(self) -> str:
        return self.surface.direction

    @property
    def catalog(self) -> KnobCatalog:
        return self.surface.catalog

    @property
    def n_queries(self) -> int | None:
        return None if self.surface.query_times is None else len(self.surface.query_times)

    def run(self, config, phase: str, policy: BenchPolicy, seed: int, queries=None):
        if self.surface.mode == "throughput":
            series = simulate_throughput(self.surface, config, int(policy.t_max), seed)
            probe = float(series[: int(policy.t_cut)].mean())
            if phase == "probe":
                return probe, probe
            return float(series[-int(policy.steady_window):].mean()), probe
        if phase == "probe":
            return simulate_batch(self.surface, config, queries, seed), None
        return simulate_batch(self.surface, config, None, seed), None

    def true_value(self, config) -> float:
        return surface_eval(self.surface, config)


def external_eval(command, config, budget: dict, timeout: float = 600.0) -> Measurement:
    """Run an external benchmark driver once.

    The driver gets ``{"config": ..., "budget": ...}`` as JSON on stdin and must
    print one JSON line ``{"metric": float, "fidelity": "full"|"partial"}``.
    """
    payload = json.dumps({"config": config, "budget": budget}, default=_json_default)
    start = time.monotonic()
    try:
        proc = subprocess.run(command, input=payload, capture_output=True, text=True,
                              timeout=timeout, shell=isinstance(command, str))
    except subprocess.TimeoutExpired as exc:
        raise TargetError(f"target timed out after {timeout} s", str(exc.stdout or "")) from exc
    if proc.returncode != 0:
        raise TargetError(f"target failed with exit code {proc.returncode}", proc.stdout + proc.stderr)
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    try:
        doc = json.loads(lines[-1])
        metric = float(doc["metric"])
        fidelity = doc["fidelity"]
        if fidelity not in ("full", "partial") or not math.isfinite(metric):
            raise ValueError(fidelity)
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise TargetError("malformed target output", proc.stdout) from exc
    return Measurement(metric, fidelity, time.monotonic() - start)


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


@dataclass
class ExternalTarget:
    command: str | list
    direction: str = "maximize"
    timeout: float = 600.0
    kind: str = "external"
    n_queries: None = None

    def run(self, config, phase: str, policy: BenchPolicy, seed: int, queries=None):
        m = external_eval(self.command, config, policy.budget(phase), self.timeout)
        return m.raw_metric, (m.raw_metric if phase == "probe" else None)


# ---------------------------------------------------------------------------
# ground truth


def _grid(knob: KnobSpec, resolution: int) -> np.ndarray:
    levels = knob.levels
    if levels is not None and levels <= resolution:
        return np.arange(levels) / (levels - 1)
    u = np.linspace(0.0, 1.0, resolution)
    if levels is not None:
        u = np.unique(np.round(u * (levels - 1))) / (levels - 1)
    return u


def _components(surface: SyntheticSurface) -> list[list[str]]:
    parent = {n: n for n in surface.influential}

    def find(n):
        while parent[n] != n:
            n = parent[n]
        return n

    for a, b, _ in surface.interactions:
        parent[find(a)] = find(b)
    groups: dict[str, list[str]] = {}
    for n in surface.influential:
        groups.setdefault(find(n), []).append(n)
    return list(groups.values())


@dataclass(frozen=True)
class Optimum:
    config: dict
    metric: float
    factor: float


def brute_force_optimum(surface: SyntheticSurface, resolution: int = 1001) -> Optimum:
    """Best noiseless configuration by exhaustive grid search.

    The factor is additive over groups of knobs linked by interactions, so each
    group is enumerated jointly on its grid and the groups are combined.
    Non-influential knobs stay at default.
    """
    config = surface.catalog.defaults()
    factor = 1.0
    for group in _components(surface):
        grids = np.meshgrid(*[_grid(surface.catalog[n], resolution if len(group) == 1 else min(resolution, 401))
                              for n in group], indexing="ij")
        u = {n: g.ravel() for n, g in zip(group, grids)}
        sub = SyntheticSurface(surface.catalog, {n: surface.influential[n] for n in group},
                               [t for t in surface.interactions if t[0] in u], 1.0)
        vals = sub._factor_encoded(u) - 1.0
        # batch time is minimized by maximizing the factor too
        i = int(np.argmax(vals))
        factor += float(vals[i])
        for n in group:
            config[n] = surface.catalog[n].decode(u[n][i])
    return Optimum(config, float(surface.metric_from_factor(factor)), factor)


def true_importance(surface: SyntheticSurface, resolution: int = 1001) -> dict[str, float]:
    """Weight times effect range per knob, plus half of each interaction weight."""
    out = {n: 0.0 for n in surface.catalog.names}
    for name, eff in surface.influential.items():
        e = eff(_grid(surface.catalog[name], resolution))
        out[name] = eff.weight * float(e.max() - e.min())
    for a, b, w in surface.interactions:
        out[a] += 0.5 * w
        out[b] += 0.5 * w
    return out


def true_ranking(surface: SyntheticSurface) -> list[str]:
    imp = true_importance(surface)
    return sorted(surface.catalog.names, key=lambda n: -imp[n])


# ---------------------------------------------------------------------------
# shipped fixtures

_KNOBS = [
    ("innodb_buffer_pool_size", "integer", 128, 64, 4096),
    ("innodb_log_file_size", "integer", 48, 4, 2048),
    ("innodb_flush_log_at_trx_commit", "enum", 1, None, None, (0, 1, 2)),
    ("innodb_io_capacity", "integer", 200, 100, 20000),
    ("innodb_io_capacity_max", "integer", 2000, 200, 40000),
    ("innodb_thread_concurrency", "integer", 0, 0, 128),
    ("innodb_read_io_threads", "integer", 4, 1, 64),
    ("innodb_write_io_threads", "integer", 4, 1, 64),
    ("innodb_purge_threads", "integer", 4, 1, 32),
    ("innodb_lru_scan_depth", "integer", 1024, 100, 10240),
    ("innodb_max_dirty_pages_pct", "continuous", 90.0, 0.0, 99.99),
    ("innodb_max_dirty_pages_pct_lwm", "continuous", 10.0, 0.0, 99.99),
    ("innodb_adaptive_hash_index", "boolean", True),
    ("innodb_change_buffering", "enum", "all", None, None, ("none", "inserts", "deletes", "changes", "purges", "all")),
    ("innodb_change_buffer_max_size", "integer", 25, 0, 50),
    ("innodb_flush_method", "enum", "fsync", None, None, ("fsync", "O_DSYNC", "O_DIRECT", "O_DIRECT_NO_FSYNC")),
    ("innodb_flush_neighbors", "enum", 0, None, None, (0, 1, 2)),
    ("innodb_doublewrite", "boolean", True),
    ("innodb_log_buffer_size", "integer", 16, 1, 256),
    ("innodb_spin_wait_delay", "integer", 6, 0, 128),
    ("innodb_sync_spin_loops", "integer", 30, 0, 1000),
    ("innodb_adaptive_flushing", "boolean", True),
    ("innodb_adaptive_flushing_lwm", "continuous", 10.0, 0.0, 70.0),
    ("innodb_old_blocks_pct", "integer", 37, 5, 95),
    ("innodb_old_blocks_time", "integer", 1000, 0, 10000),
    ("innodb_read_ahead_threshold", "integer", 56, 0, 64),
    ("innodb_random_read_ahead", "boolean", False),
    ("innodb_page_cleaners", "integer", 4, 1, 64),
    ("innodb_buffer_pool_instances", "integer", 1, 1, 64),
    ("innodb_concurrency_tickets", "integer", 5000, 1, 100000),
    ("innodb_autoinc_lock_mode", "enum", 2, None, None, (0, 1, 2)),
    ("innodb_stats_persistent_sample_pages", "integer", 20, 1, 1000),
    ("innodb_lock_wait_timeout", "integer", 50, 1, 3600),
    ("innodb_sort_buffer_size", "integer", 1, 1, 64),
    ("sync_binlog", "integer", 1, 0, 1000),
    ("binlog_cache_size", "integer", 32, 4, 4096),
    ("table_open_cache", "integer", 4000, 1, 65536),
    ("table_open_cache_instances", "integer", 16, 1, 64),
    ("thread_cache_size", "integer", 9, 0, 16384),
    ("max_connections", "integer", 151, 10, 10000),
    ("join_buffer_size", "integer", 256, 128, 65536),
    ("sort_buffer_size", "integer", 256, 32, 65536),
    ("read_buffer_size", "integer", 128, 8, 65536),
    ("read_rnd_buffer_size", "integer", 256, 1, 65536),
    ("tmp_table_size", "integer", 16, 1, 4096),
    ("max_heap_table_size", "integer", 16, 1, 4096),
    ("key_buffer_size", "integer", 8, 1, 4096),
    ("eq_range_index_dive_limit", "integer", 200, 0, 4096),
    ("optimizer_search_depth", "integer", 62, 0, 62),
    ("optimizer_prune_level", "boolean", True),
    ("query_prealloc_size", "integer", 8, 8, 4096),
    ("transaction_prealloc_size", "integer", 4, 1, 128),
]


def fixture_catalog() -> KnobCatalog:
    """The 52-knob catalog shared by all shipped fixtures (catalog order is arbitrary)."""
    knobs = []
    for row in _KNOBS:
        name, kind, default = row[:3]
        if kind == "enum":
            knobs.append(KnobSpec(name, kind, default, choices=row[5]))
        elif kind == "boolean":
            knobs.append(KnobSpec(name, kind, default))
        else:
            knobs.append(KnobSpec(name, kind, default, low=row[3], high=row[4]))
    return KnobCatalog(knobs)


def _effects(spec: dict) -> dict[str, Effect]:
    return {name: Effect(**d) for name, d in spec.items()}


_SYSBENCH = {
    "innodb_buffer_pool_size": dict(shape="peak", weight=1.5, center=0.7, width=0.25),
    "innodb_thread_concurrency": dict(shape="peak", weight=0.22, center=0.0, width=0.08),
    "sync_binlog": dict(shape="peak", weight=0.18, center=0.001, width=0.08),
    "innodb_io_capacity": dict(shape="peak", weight=0.15, center=0.005, width=0.08),
    "innodb_spin_wait_delay": dict(shape="peak", weight=0.12, center=0.047, width=0.08),
    "table_open_cache": dict(shape="peak", weight=0.08, center=0.061, width=0.08),
    "innodb_log_file_size": dict(shape="saturating", weight=0.06, rate=4.0),
    "innodb_flush_log_at_trx_commit": dict(shape="step", weight=0.04, threshold=0.75),
}

_TPCC = {
    "innodb_buffer_pool_size": dict(shape="saturating", weight=0.8, rate=5.0),
    "innodb_log_file_size": dict(shape="peak", weight=0.45, center=0.55, width=0.2),
    "innodb_io_capacity": dict(shape="saturating", weight=0.3, rate=3.0),
    "innodb_lru_scan_depth": dict(shape="peak", weight=0.2, center=0.4, width=0.2),
    "innodb_thread_concurrency": dict(shape="peak", weight=0.2, center=0.3, width=0.2),
    "innodb_flush_log_at_trx_commit": dict(shape="step", weight=0.15, threshold=0.75),
    "innodb_adaptive_hash_index": dict(shape="peak", weight=0.08, center=0.0, width=0.3),
    "max_connections": dict(shape="saturating", weight=0.06, rate=8.0),
    "innodb_max_dirty_pages_pct": dict(shape="peak", weight=0.05, center=0.7, width=0.2),
    "join_buffer_size": dict(shape="saturating", weight=0.03, rate=2.0),
}

_TPCH = {
    "innodb_buffer_pool_size": dict(shape="saturating", weight=1.2, rate=4.0),
    "join_buffer_size": dict(shape="peak", weight=0.5, center=0.5, width=0.2),
    "sort_buffer_size": dict(shape="saturating", weight=0.3, rate=3.0),
    "tmp_table_size": dict(shape="peak", weight=0.2, center=0.35, width=0.2),
    "innodb_read_io_threads": dict(shape="saturating", weight=0.1, rate=5.0),
}


def fixture(name: str) -> SyntheticSurface:
    """Shipped surfaces ``sysbench-like``, ``tpcc-like`` and ``tpch-like``.

    Noise levels follow the measured run-to-run variability of the benchmarks
    they imitate.
    """
    catalog = fixture_catalog()
    if name == "sysbench-like":
        return SyntheticSurface(catalog, _effects(_SYSBENCH), [], 1700.0, 0.0436)
    if name == "tpcc-like":
        inter = [("innodb_buffer_pool_size", "innodb_log_file_size", 0.25),
                 ("innodb_io_capacity", "innodb_lru_scan_depth", 0.15)]
        return SyntheticSurface(catalog, _effects(_TPCC), inter, 1200.0, 0.0624)
    if name == "tpch-like":
        q = np.random.default_rng(22).lognormal(0.0, 0.8, size=22)
        return SyntheticSurface(catalog, _effects(_TPCH), [], 80.13, 0.0052, mode="batch", query_times=q)
    raise KeyError(f"unknown fixture {name!r}; choose from {FIXTURES}")


FIXTURES = ("sysbench-like", "tpcc-like", "tpch-like")
