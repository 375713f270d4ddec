"""State shared by every strategy within one tuning run.

A session owns the observation store, the per-iteration log records, the
random substreams and the mapping from raw metrics to higher-is-better scores.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .bench import BenchPolicy, Measurement, evaluate_adaptive, subset_size
from .space import Configuration, KnobCatalog, Observation, ObservationSet, validate
from .targets import TargetError

MAX_CONSECUTIVE_FAILURES = 10
FAILURE_SD_MULT = 3.0


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component of a run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class RunAborted(RuntimeError):
    pass


@dataclass
class TuningSession:
    catalog: KnobCatalog
    target: object
    bench: BenchPolicy
    seed: int = 0
    strategy: str = "dot"
    direction: str | None = None
    obs: ObservationSet = field(default_factory=ObservationSet)
    records: list[dict] = field(default_factory=list)
    base: Configuration | None = None
    projection: str = "strict"

    def __post_init__(self) -> None:
        if self.direction is None:
            self.direction = getattr(self.target, "direction", "maximize")
        if self.direction not in ("maximize", "minimize"):
            raise ValueError(f"bad direction {self.direction!r}")
        if self.base is None:
            self.base = self.catalog.defaults()
        self.rng = {name: substream(self.seed, name) for name in ("bo", "forest", "policy", "target")}
        self.scale: float | None = None
        self.epoch = 0
        self.action: int | None = None
        self.failures = 0
        self._incumbent: Observation | None = None
        self._incumbent_gate: float | None = None
        self._probe_ratios: list[float] = []
        self.fidelity_ratio: float | None = None

    # -- bookkeeping --------------------------------------------------------

    @property
    def iteration(self) -> int:
        return len(self.obs)

    @property
    def best(self) -> Observation | None:
        """Best full-fidelity observation so far."""
        return self._incumbent

    def to_score(self, raw: float, fidelity: str, fraction: float = 1.0) -> float:
        """Map a raw metric onto the positive higher-is-better scale.

        Minimized metrics become ``C / raw`` with ``C`` the first full raw metric;
        a partial batch time is first extrapolated to ``raw / fraction``.
        """
        if self.direction == "maximize":
            return float(raw)
        if fidelity == "partial":
            raw = raw / fraction
        if self.scale is None:
            self.scale = float(raw)
        return self.scale / max(float(raw), 1e-300)

    def probe_ratio(self) -> float | None:
        """Current full/probe ratio for throughput probes (None before any estimate)."""
        if self.fidelity_ratio is not None:
            return self.fidelity_ratio
        if self._probe_ratios:
            return float(np.median(self._probe_ratios))
        return None

    def _gate(self) -> float | None:
        if self._incumbent is None:
            return None
        ratio = self.probe_ratio() if self.bench.mode == "throughput" else None
        if ratio is not None:
            # incumbent's steady TPS moved onto the probe scale (the warm-up biases probes low)
            return self._incumbent.raw_metric / ratio
        return self._incumbent_gate

    def _failure_score(self) -> float:
        scores = np.array([o.score for o in self.obs])
        if scores.size == 0:
            return 0.0
        sd = float(scores.std()) if scores.size > 1 else 0.0
        return float(scores.min() - FAILURE_SD_MULT * sd)

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, config: Configuration, active) -> Observation:
        """Benchmark ``config`` through the adaptive allocator and log it."""
        problems = validate(self.catalog, config)
        if problems:
            raise ValueError("invalid configuration: " + "; ".join(problems))
        start = time.perf_counter()
        try:
            m: Measurement = evaluate_adaptive(self.target, config, self._gate(), self.bench, self.rng["target"])
            if not math.isfinite(m.raw_metric) or (self.direction == "minimize" and m.raw_metric <= 0):
                raise TargetError(f"unusable metric {m.raw_metric!r}")
        except (TargetError, OSError):
            m = None
        wall_ms = (time.perf_counter() - start) * 1e3
        if m is None:
            self.failures += 1
            obs = Observation(dict(config), self._failure_score(), "partial", None,
                              frozenset(active), self.iteration + 1, wall_ms, 0.0)
        else:
            self.failures = 0
            score = self.to_score(m.raw_metric, m.fidelity, m.subset_fraction)
            obs = Observation(dict(config), score, m.fidelity, float(m.raw_metric),
                              frozenset(active), self.iteration + 1, wall_ms, float(m.cost))
        self.obs.append(obs)
        if m is not None and obs.fidelity == "full" and m.probe_metric and self.bench.mode == "throughput":
            self._probe_ratios.append(m.raw_metric / m.probe_metric)
        if obs.fidelity == "full" and (self._incumbent is None or obs.score > self._incumbent.score):
            self._incumbent = obs
            self._incumbent_gate = self._gate_value(m)
        self.records.append(self._record(obs))
        if self.failures >= MAX_CONSECUTIVE_FAILURES:
            raise RunAborted(f"{self.failures} consecutive failed evaluations")
        return obs

    def _gate_value(self, m: Measurement) -> float:
        if self.bench.mode == "throughput":
            return m.probe_metric if m.probe_metric is not None else m.raw_metric
        n_queries = getattr(self.target, "n_queries", None)
        frac = subset_size(n_queries, self.bench.subset_fraction) / n_queries if n_queries else self.bench.subset_fraction
        return m.raw_metric * frac

    def _record(self, obs: Observation) -> dict:
        return {
            "iter": obs.iteration,
            "epoch": self.epoch,
            "strategy": self.strategy,
            "action": self.action,
            "active_knobs": self.catalog.sort_subset(obs.active_set),
            "config": _plain(obs.config),
            "raw_metric": obs.raw_metric,
            "score": obs.score,
            "fidelity": obs.fidelity,
            "best_score": None if self._incumbent is None else self._incumbent.score,
            "wall_ms": round(obs.wall_ms, 3),
            "cost": obs.cost,
        }

    @property
    def total_cost(self) -> float:
        return float(sum(o.cost for o in self.obs))


def _plain(config: dict) -> dict:
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in config.items()}
