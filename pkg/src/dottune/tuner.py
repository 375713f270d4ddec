"""Tuning strategies: DOT and the fixed-set, incremental and statistical-elimination baselines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bench import BenchPolicy
from .bo import bo_run
from .forest import rfecv_select
from .policy import DELTA, LrtState, always_expand_step, lrt_step, thompson_step
from .session import RunAborted, TuningSession
from .space import KnobCatalog, encode_many, project
from .stats import welch_t_test

STRATEGIES = ("dot", "bo-fixed", "incremental", "statistical-elimination")


@dataclass
class TuneParams:
    budget: int = 300
    k0: int = 20
    delta_k: int = 5
    policy: str = "lrt"
    strategy: str = "dot"
    seed: int = 0
    delta: float = DELTA
    rfecv: bool = True
    bench: BenchPolicy = field(default_factory=BenchPolicy)
    subset: list[str] | None = None  # bo-fixed only; None means every knob
    incr_start: int = 4
    incr_step: int = 2
    incr_epoch: int = 25
    alpha: float = 0.05
    projection: str = "drop"

    def __post_init__(self) -> None:
        if self.k0 < 1 or self.delta_k < 1 or self.budget < 1:
            raise ValueError("k0, delta_k and budget must all be >= 1")
        if self.policy not in ("lrt", "thompson", "always-expand"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class RunLog:
    strategy: str
    seed: int
    records: list[dict]
    epochs: list[dict]
    best_config: dict | None
    best_score: float | None
    best_raw: float | None
    total_cost: float
    aborted: str | None = None

    def best_series(self) -> np.ndarray:
        """Best full-fidelity score after each iteration (NaN before the first)."""
        return np.array([np.nan if r["best_score"] is None else r["best_score"] for r in self.records])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("records")
        out["iterations"] = len(self.records)
        return out


def _finish(session: TuningSession, epochs: list[dict], aborted: str | None) -> RunLog:
    best = session.best
    return RunLog(session.strategy, session.seed, session.records, epochs,
                  None if best is None else dict(best.config),
                  None if best is None else best.score,
                  None if best is None else best.raw_metric,
                  session.total_cost, aborted)


def _session(catalog, target, params: TuneParams, strategy: str) -> TuningSession:
    return TuningSession(catalog, target, params.bench, seed=params.seed, strategy=strategy,
                         projection=params.projection)


def dot_tune(catalog: KnobCatalog, target, params: TuneParams) -> RunLog:
    """Dynamic knob tuning.

    Start from the top ``k0`` ranked knobs with an epoch of ``5 k0`` iterations.
    After each epoch prune with RFECV, then let the policy choose between
    staying on the pruned set for 10 iterations or adding the next ``delta_k``
    never-tried knobs for ``5 delta_k`` iterations.  Epochs are clipped to the
    remaining budget.
    """
    session = _session(catalog, target, params, "dot")
    ranking = catalog.ordered()
    k0 = min(params.k0, len(ranking))
    active = ranking[:k0]
    seen = set(active)
    E = 5 * k0
    b = None
    state = LrtState(delta=params.delta)
    elapsed = 0
    epochs = []
    aborted = None
    try:
        while elapsed < params.budget:
            E = min(E, params.budget - elapsed)
            session.epoch += 1
            before = catalog.sort_subset(active)
            res = bo_run(session, before, E)
            elapsed += res.n_evals
            entry = {"epoch": session.epoch, "action_in": session.action, "E": res.n_evals,
                     "active": before, "y_star": res.y_star, "b": b}
            epochs.append(entry)
            if elapsed >= params.budget:
                break
            if params.rfecv:
                X, y, _ = project(session.obs, catalog, before, session.base, session.projection)
                pruned = rfecv_select(before, X, y, session.rng["forest"])
            else:
                pruned = before
            y_star = res.y_star if res.y_star is not None else b
            decision = _policy_step(params, state, b, y_star, res.n_evals, session, len(ranking) - len(seen))
            if y_star is not None:
                b = y_star if b is None else max(b, y_star)
            action = decision.action
            new = []
            if action == 1:
                new = [k for k in ranking if k not in seen][: params.delta_k]
                if not new:
                    # every knob has been tried; re-admit pruned ones in ranking order
                    new = [k for k in ranking if k not in pruned][: params.delta_k]
                if not new:
                    action = 0
            entry.update(after_rfecv=list(pruned), decision=decision.to_dict(), new_knobs=new)
            seen.update(new)
            if action == 0:
                active, E = list(pruned), 10
            else:
                active, E = list(pruned) + new, 5 * len(new)
            session.action = action
    except RunAborted as exc:
        aborted = str(exc)
    return _finish(session, epochs, aborted)


def _policy_step(params, state, b, y_star, E, session, remaining):
    rng = session.rng["policy"]
    if params.policy == "always-expand":
        return always_expand_step(remaining)
    if params.policy == "thompson":
        return thompson_step(state, b, y_star, E, rng)
    return lrt_step(state, b, y_star, E, rng)


def bo_fixed_tune(catalog: KnobCatalog, target, params: TuneParams, subset=None) -> RunLog:
    """Plain BO over one fixed knob subset for the whole budget (all knobs by default)."""
    session = _session(catalog, target, params, "bo-fixed")
    subset = catalog.sort_subset(subset or params.subset or catalog.names)
    session.epoch = 1
    aborted = None
    try:
        res = bo_run(session, subset, params.budget)
        epochs = [{"epoch": 1, "E": res.n_evals, "active": subset, "y_star": res.y_star}]
    except RunAborted as exc:
        aborted, epochs = str(exc), []
    return _finish(session, epochs, aborted)


def incremental_tune(catalog: KnobCatalog, target, params: TuneParams) -> RunLog:
    """Top-4 knobs for 25 iterations, then two more knobs per 25-iteration epoch."""
    session = _session(catalog, target, params, "incremental")
    ranking = catalog.ordered()
    n = min(params.incr_start, len(ranking))
    elapsed = 0
    epochs = []
    aborted = None
    try:
        while elapsed < params.budget:
            session.epoch += 1
            active = catalog.sort_subset(ranking[:n])
            res = bo_run(session, active, min(params.incr_epoch, params.budget - elapsed))
            elapsed += res.n_evals
            epochs.append({"epoch": session.epoch, "E": res.n_evals, "active": active, "y_star": res.y_star})
            n = min(n + params.incr_step, len(ranking))
    except RunAborted as exc:
        aborted = str(exc)
    return _finish(session, epochs, aborted)


def welch_split_pvalue(catalog: KnobCatalog, name: str, configs, scores) -> float:
    """Welch p-value between scores of configs below/above the knob's median encoded value.

    Booleans split by value.  A group with fewer than two members gives p = 1.
    """
    u = encode_many(catalog, [name], configs)[:, 0]
    scores = np.asarray(scores, dtype=float)
    if catalog[name].kind == "boolean":
        lo = u < 0.5
    else:
        lo = u <= np.median(u)
    a, b = scores[lo], scores[~lo]
    if len(a) < 2 or len(b) < 2:
        return 1.0
    return welch_t_test(a, b)[2]


def statistical_elimination_tune(catalog: KnobCatalog, target, params: TuneParams) -> RunLog:
    """BO on all N knobs for 2N iterations, Welch-test each knob, continue on the survivors.

    Dropped knobs are frozen at their value in the best configuration so far.
    If nothing survives, the knob with the smallest p-value is kept.
    """
    session = _session(catalog, target, params, "statistical-elimination")
    names = catalog.names
    epochs = []
    aborted = None
    try:
        session.epoch = 1
        n1 = min(2 * len(names), params.budget)
        res = bo_run(session, names, n1)
        epochs.append({"epoch": 1, "E": res.n_evals, "active": names, "y_star": res.y_star})
        remaining = params.budget - n1
        if remaining > 0:
            configs = [o.config for o in session.obs]
            scores = [o.score for o in session.obs]
            pvals = {n: welch_split_pvalue(catalog, n, configs, scores) for n in names}
            survivors = [n for n in names if pvals[n] < params.alpha]
            if not survivors:
                survivors = [min(names, key=lambda n: pvals[n])]
            best = session.best.config if session.best is not None else catalog.defaults()
            session.base = {n: (session.base[n] if n in survivors else best[n]) for n in names}
            session.epoch = 2
            res = bo_run(session, survivors, remaining)
            epochs.append({"epoch": 2, "E": res.n_evals, "active": survivors, "y_star": res.y_star,
                           "p_values": pvals, "frozen": {n: best[n] for n in names if n not in survivors}})
    except RunAborted as exc:
        aborted = str(exc)
    return _finish(session, epochs, aborted)


def tune(catalog: KnobCatalog, target, params: TuneParams) -> RunLog:
    if params.strategy == "dot":
        return dot_tune(catalog, target, params)
    if params.strategy == "bo-fixed":
        return bo_fixed_tune(catalog, target, params)
    if params.strategy == "incremental":
        return incremental_tune(catalog, target, params)
    return statistical_elimination_tune(catalog, target, params)
