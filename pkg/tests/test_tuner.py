import numpy as np
import pytest

from dottune.bench import BenchPolicy
from dottune.session import TuningSession
from dottune.space import KnobCatalog, KnobSpec, ObservationSet, project
from dottune.targets import Effect, SyntheticSurface, SyntheticTarget, TargetError
from dottune.tuner import (TuneParams, bo_fixed_tune, dot_tune, incremental_tune, statistical_elimination_tune, tune,
                           welch_split_pvalue)


def _catalog(n=30):
    knobs = [KnobSpec(f"k{j:02d}", "continuous", 0.1, low=0.0, high=1.0) for j in range(n - 2)]
    knobs += [KnobSpec("flag", "boolean", False), KnobSpec("mode", "enum", "a", choices=("a", "b", "c"))]
    return KnobCatalog(knobs)


def _target(noise=0.02, mode="throughput"):
    cat = _catalog()
    eff = {"k03": Effect("peak", 0.6, center=0.7, width=0.2), "k11": Effect("saturating", 0.4),
           "flag": Effect("step", 0.2, threshold=0.5), "k20": Effect("peak", 0.2, center=0.3, width=0.2)}
    q = np.array([1.0, 2.0, 3.0, 4.0, 5.0]) if mode == "batch" else None
    return SyntheticTarget(SyntheticSurface(cat, eff, [], 100.0, noise, mode, query_times=q))


def _check_off_set_defaults(log, catalog, base=None):
    base = base or catalog.defaults()
    for r in log.records:
        active = set(r["active_knobs"])
        for name in catalog.names:
            if name not in active:
                assert r["config"][name] == base[name], (r["iter"], name)


@pytest.fixture(scope="module")
def dot_log():
    t = _target()
    return t, dot_tune(t.catalog, t, TuneParams(budget=200, seed=3))


def test_dot_budget_accounting(dot_log):
    _, log = dot_log
    assert len(log.records) == 200 == sum(e["E"] for e in log.epochs)
    assert [r["iter"] for r in log.records] == list(range(1, 201))
    assert log.epochs[0]["E"] == 100 and len(log.epochs[0]["active"]) == 20


def test_dot_epoch_transitions(dot_log):
    t, log = dot_log
    ranking = t.catalog.ordered()
    seen = set(log.epochs[0]["active"])
    used = log.epochs[0]["E"]
    for prev, cur in zip(log.epochs, log.epochs[1:]):
        new = prev["new_knobs"]
        unseen = [k for k in ranking if k not in seen]
        if new and unseen:
            assert new == unseen[: len(new)] and len(new) == min(5, len(unseen))
        expected_set = set(prev["after_rfecv"]) | set(new)
        assert set(cur["active"]) == expected_set
        assert cur["action_in"] == (1 if new else 0)
        expected_E = 5 * len(new) if new else 10
        assert cur["E"] == min(expected_E, 200 - used)
        assert len(cur["active"]) >= 10
        used += cur["E"]
        seen |= set(new)


def test_dot_b_non_decreasing_and_y_star(dot_log):
    _, log = dot_log
    bs = [e["b"] for e in log.epochs if e["b"] is not None]
    assert bs == sorted(bs)
    for e in log.epochs:
        full = [r["score"] for r in log.records if r["epoch"] == e["epoch"] and r["fidelity"] == "full"]
        assert e["y_star"] == (max(full) if full else None)


def test_dot_off_set_knobs_stay_default(dot_log):
    t, log = dot_log
    _check_off_set_defaults(log, t.catalog)


def test_dot_best_is_best_full(dot_log):
    _, log = dot_log
    full = [r for r in log.records if r["fidelity"] == "full"]
    best = max(full, key=lambda r: r["score"])
    assert log.best_score == best["score"] and log.best_config == best["config"]
    series = log.best_series()
    assert np.all(np.diff(series[~np.isnan(series)]) >= 0)


def test_first_epoch_clipped():
    t = _target()
    log = dot_tune(t.catalog, t, TuneParams(budget=30, seed=0))
    assert len(log.epochs) == 1 and log.epochs[0]["E"] == 30 and len(log.records) == 30


def test_always_expand_without_rfecv_grows_monotonically():
    t = _target()
    log = dot_tune(t.catalog, t, TuneParams(budget=160, k0=10, seed=1, policy="always-expand", rfecv=False))
    sizes = [len(e["active"]) for e in log.epochs]
    assert sizes == sorted(sizes) and sizes[:3] == [10, 15, 20]
    assert [e["E"] for e in log.epochs][:3] == [50, 25, 25]


def test_small_catalog_starts_with_everything():
    t = _target()
    small = KnobCatalog(t.catalog.knobs[:8])
    surface = SyntheticSurface(small, {"k03": Effect("saturating", 1.0)}, [], 50.0, 0.0)
    log = dot_tune(small, SyntheticTarget(surface), TuneParams(budget=12, seed=0))
    assert len(log.epochs[0]["active"]) == 8 and log.epochs[0]["E"] == 12


def test_bo_fixed_consumes_budget_on_subset():
    t = _target()
    log = bo_fixed_tune(t.catalog, t, TuneParams(budget=25, strategy="bo-fixed", subset=["k03", "k11"]))
    assert len(log.records) == 25
    assert all(r["active_knobs"] == ["k03", "k11"] for r in log.records)
    _check_off_set_defaults(log, t.catalog)


def test_incremental_schedule():
    t = _target()
    ranked = t.catalog.with_ranking(list(reversed(t.catalog.names)))
    log = incremental_tune(ranked, t, TuneParams(budget=75, strategy="incremental"))
    assert [len(e["active"]) for e in log.epochs] == [4, 6, 8]
    assert set(log.epochs[0]["active"]) == set(ranked.ordered()[:4])
    assert [e["E"] for e in log.epochs] == [25, 25, 25]
    one = incremental_tune(ranked, t, TuneParams(budget=25, strategy="incremental"))
    assert len(one.epochs) == 1


def test_incremental_reuses_first_epoch():
    t = _target()
    params = TuneParams(budget=50, strategy="incremental", projection="strict")
    log = incremental_tune(t.catalog, t, params)
    session = TuningSession(t.catalog, t, BenchPolicy())
    for r in log.records[:25]:
        session.obs.append(_obs_from_record(r))
    X, _, _ = project(session.obs, t.catalog, log.epochs[1]["active"])
    assert len(X) == 25


def _obs_from_record(r):
    from dottune.space import Observation
    return Observation(r["config"], r["score"], r["fidelity"], r["raw_metric"], frozenset(r["active_knobs"]), r["iter"])


def test_welch_split():
    cat = _catalog()
    rng = np.random.default_rng(0)
    configs = [dict(cat.defaults(), k00=float(rng.random()), flag=bool(rng.random() < 0.5)) for _ in range(60)]
    flat = [1.0 + 0.01 * rng.normal() for _ in configs]
    assert welch_split_pvalue(cat, "k00", configs, flat) > 0.01
    strong = [10.0 * c["k00"] + 0.01 * rng.normal() for c in configs]
    assert welch_split_pvalue(cat, "k00", configs, strong) < 1e-6
    assert welch_split_pvalue(cat, "k05", configs, strong) == 1.0  # constant knob, one group
    by_flag = [5.0 if c["flag"] else 1.0 for c in configs]
    assert welch_split_pvalue(cat, "flag", configs, by_flag) == 0.0


def test_statistical_elimination_freezes_at_best():
    t = _target()
    N = len(t.catalog.names)
    log = statistical_elimination_tune(t.catalog, t, TuneParams(budget=2 * N + 20, strategy="statistical-elimination"))
    assert [e["E"] for e in log.epochs] == [2 * N, 20]
    phase1 = log.records[: 2 * N]
    best = max((r for r in phase1 if r["fidelity"] == "full"), key=lambda r: r["score"])
    frozen = log.epochs[1]["frozen"]
    survivors = log.epochs[1]["active"]
    assert survivors and all(log.epochs[1]["p_values"][n] < 0.05 for n in survivors)
    for name, value in frozen.items():
        assert value == best["config"][name]
        assert all(r["config"][name] == value for r in log.records[2 * N:])


def test_statistical_elimination_empty_survivor_guard():
    cat = _catalog()
    surface = SyntheticSurface(cat, {}, [], 100.0, 0.0)
    t = SyntheticTarget(surface)
    N = len(cat.names)
    log = statistical_elimination_tune(cat, t, TuneParams(budget=2 * N + 5, strategy="statistical-elimination"))
    assert len(log.epochs[1]["active"]) == 1
    assert len(log.records) == 2 * N + 5


def test_minimization_scores():
    t = _target(noise=0.01, mode="batch")
    params = TuneParams(budget=40, strategy="bo-fixed", bench=BenchPolicy(mode="batch"))
    log = bo_fixed_tune(t.catalog, t, params)
    C = log.records[0]["raw_metric"]
    assert log.records[0]["fidelity"] == "full" and log.records[0]["score"] == pytest.approx(1.0)
    frac = 2 / 5  # ceil(0.4 * 5) queries
    saw_partial = False
    for r in log.records:
        if r["fidelity"] == "full":
            assert r["score"] == pytest.approx(C / r["raw_metric"], rel=1e-12)
        else:
            saw_partial = True
            assert r["score"] == pytest.approx(C / (r["raw_metric"] / frac), rel=1e-12)
    assert saw_partial


class _Flaky:
    """Fails whenever the flag knob is on; optionally always."""

    def __init__(self, inner, always=False):
        self.inner, self.always = inner, always
        self.direction, self.catalog, self.n_queries = inner.direction, inner.catalog, None

    def run(self, config, phase, policy, seed, queries=None):
        if self.always or config["flag"]:
            raise TargetError("driver crashed", "")
        return self.inner.run(config, phase, policy, seed, queries)


def test_failures_get_penalty_scores():
    t = _Flaky(_target())
    log = bo_fixed_tune(t.catalog, t, TuneParams(budget=30, strategy="bo-fixed"))
    assert len(log.records) == 30 and log.aborted is None
    failed = [i for i, r in enumerate(log.records) if r["raw_metric"] is None]
    assert failed
    for i in failed:
        r = log.records[i]
        assert r["fidelity"] == "partial" and r["config"]["flag"] is True
        prior = np.array([q["score"] for q in log.records[:i]])
        if prior.size:
            sd = prior.std() if prior.size > 1 else 0.0
            assert r["score"] == pytest.approx(prior.min() - 3 * sd)


def test_persistent_failure_aborts():
    t = _Flaky(_target(), always=True)
    log = dot_tune(t.catalog, t, TuneParams(budget=100))
    assert log.aborted and len(log.records) == 10
    assert log.best_score is None


def test_determinism_modulo_wall_time():
    t = _target()
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_ms"} for r in log.records]  # noqa: E731
    a = tune(t.catalog, t, TuneParams(budget=40, seed=9))
    b = tune(t.catalog, t, TuneParams(budget=40, seed=9))
    assert strip(a) == strip(b) and a.epochs == b.epochs
    c = tune(t.catalog, t, TuneParams(budget=40, seed=10))
    assert strip(a) != strip(c)


def test_params_validation():
    with pytest.raises(ValueError):
        TuneParams(k0=0)
    with pytest.raises(ValueError):
        TuneParams(policy="greedy")
    with pytest.raises(ValueError):
        TuneParams(strategy="grid")
    assert isinstance(TuningSession(_catalog(), _target(), BenchPolicy()).obs, ObservationSet)
