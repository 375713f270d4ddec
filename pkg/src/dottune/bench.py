"""Adaptive benchmark budgets: probe cheaply, pay for a full run only when promising."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BenchPolicy:
    """Benchmark budget settings.

    ``mode`` is ``throughput`` (time-series TPS with an early-cut probe) or
    ``batch`` (query batch with a random query-subset probe).  With
    ``adaptive=False`` every evaluation runs the full benchmark.
    """

    mode: str = "throughput"
    t_max: float = 90.0
    steady_window: float = 30.0
    t_cut: float = 40.0
    subset_fraction: float = 0.40
    adaptive: bool = True

    def __post_init__(self) -> None:
        if self.mode not in ("throughput", "batch"):
            raise ValueError(f"unknown bench mode {self.mode!r}")
        if not 0 < self.t_cut <= self.t_max:
            raise ValueError("need 0 < t_cut <= t_max")
        if not 0 < self.steady_window <= self.t_max:
            raise ValueError("need 0 < steady_window <= t_max")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("need 0 < subset_fraction <= 1")

    def budget(self, phase: str) -> dict:
        return {"mode": self.mode, "t_cut": self.t_cut, "t_max": self.t_max,
                "subset_fraction": self.subset_fraction, "phase": phase}


@dataclass(frozen=True)
class Measurement:
    """Outcome of one evaluation.

    ``probe_metric`` is the cheap-phase value (t_cut mean TPS, or subset time)
    whenever a probe ran; for a full throughput run it is the mean over the
    first ``t_cut`` seconds of the same run.
    """

    raw_metric: float
    fidelity: str
    cost: float
    probe_metric: float | None = None
    subset_fraction: float = 1.0


def subset_size(n_queries: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * n_queries - 1e-9))


def evaluate_throughput_adaptive(target, config, best_full_metric: float | None, policy: BenchPolicy, rng) -> Measurement:
    """Run ``t_cut`` seconds; continue to ``t_max`` only if the probe beats the gate.

    The full-fidelity metric is the mean TPS over the last ``steady_window``
    seconds.  Without an incumbent (``best_full_metric is None``) or with
    ``policy.adaptive`` off, the run always goes to ``t_max``.
    """
    if policy.mode != "throughput":
        raise ValueError("policy is not in throughput mode")
    seed = int(np.random.default_rng(rng).integers(2**63 - 1))
    if not policy.adaptive:
        full, probe = target.run(config, "full", policy, seed)
        return Measurement(full, "full", policy.t_max, probe)
    probe = target.run(config, "probe", policy, seed)[0]
    if best_full_metric is None or probe > best_full_metric:
        full, _ = target.run(config, "full", policy, seed)
        return Measurement(full, "full", policy.t_max, probe)
    return Measurement(probe, "partial", policy.t_cut, probe)


def evaluate_batch_adaptive(target, config, best_full_time: float | None, policy: BenchPolicy, rng) -> Measurement:
    """Time a random query subset; run the whole batch only if the subset beats the gate.

    A partial result carries the subset's own total time as ``raw_metric``.
    """
    if policy.mode != "batch":
        raise ValueError("policy is not in batch mode")
    rng = np.random.default_rng(rng)
    seed = int(rng.integers(2**63 - 1))
    n_queries = getattr(target, "n_queries", None)
    if not policy.adaptive:
        full, _ = target.run(config, "full", policy, seed)
        return Measurement(full, "full", full)
    queries = None
    fraction = policy.subset_fraction
    if n_queries:
        k = subset_size(n_queries, policy.subset_fraction)
        queries = np.sort(rng.choice(n_queries, size=k, replace=False))
        fraction = k / n_queries
    t_p, _ = target.run(config, "probe", policy, seed, queries=queries)
    if best_full_time is None or t_p < best_full_time:
        full, _ = target.run(config, "full", policy, seed)
        return Measurement(full, "full", t_p + full, t_p, fraction)
    return Measurement(t_p, "partial", t_p, t_p, fraction)


def evaluate_adaptive(target, config, gate: float | None, policy: BenchPolicy, rng) -> Measurement:
    if policy.mode == "throughput":
        return evaluate_throughput_adaptive(target, config, gate, policy, rng)
    return evaluate_batch_adaptive(target, config, gate, policy, rng)


def mape(partial, full) -> float:
    """Mean absolute percentage error of ``partial`` against ``full``, as a fraction."""
    partial = np.asarray(partial, dtype=float)
    full = np.asarray(full, dtype=float)
    if partial.shape != full.shape or partial.size == 0:
        raise ValueError("mape needs two equal-length non-empty vectors")
    if np.any(full == 0):
        raise ValueError("full values must be non-zero")
    return float(np.mean(np.abs(partial - full) / np.abs(full)))
