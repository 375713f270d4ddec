import itertools
import json
import sys

import numpy as np
import pytest

from dottune.bench import BenchPolicy
from dottune.forest import forest_fit
from dottune.space import KnobCatalog, KnobSpec, encode_many, sample_lhs
from dottune.targets import (Effect, ExternalTarget, SyntheticSurface, SyntheticTarget, TargetError,
                             brute_force_optimum, external_eval, fixture, fixture_catalog, load_surface,
                             save_surface, simulate_batch, simulate_throughput, surface_eval, true_importance,
                             true_ranking)

PY = sys.executable


def _small(noise=0.0, mode="throughput"):
    cat = KnobCatalog([KnobSpec(f"k{j}", "integer", 0, low=0, high=4) for j in range(5)])
    eff = {"k0": Effect("peak", 0.6, center=0.5, width=0.3), "k1": Effect("saturating", 0.4),
           "k2": Effect("step", 0.3, threshold=0.6)}
    q = np.array([3.0, 1.0, 2.0, 4.0]) if mode == "batch" else None
    return SyntheticSurface(cat, eff, [("k0", "k2", 0.5)], 100.0, noise, mode, query_times=q)


def test_zero_weights_give_base_metric():
    cat = fixture_catalog()
    s = SyntheticSurface(cat, {"sync_binlog": Effect("peak", 0.0)}, [], 1234.5)
    assert surface_eval(s, cat.defaults()) == 1234.5


def test_monotone_knob():
    s = _small()
    lo, hi = s.catalog.defaults(), dict(s.catalog.defaults(), k1=4)
    assert surface_eval(s, hi) > surface_eval(s, lo)


def test_brute_force_matches_exhaustive_grid():
    # 3 influential knobs x 5 levels, coupled through an interaction
    s = _small()
    names = ["k0", "k1", "k2"]
    best, arg = -np.inf, None
    for values in itertools.product(range(5), repeat=3):
        cfg = dict(s.catalog.defaults(), **dict(zip(names, values)))
        v = surface_eval(s, cfg)
        if v > best:
            best, arg = v, values
    opt = brute_force_optimum(s)
    assert opt.metric == pytest.approx(best, rel=1e-12)
    assert tuple(opt.config[n] for n in names) == arg
    assert surface_eval(s, opt.config) == pytest.approx(opt.metric, rel=1e-12)


def test_brute_force_batch_minimizes_time():
    s = _small(mode="batch")
    opt = brute_force_optimum(s)
    times = [surface_eval(s, dict(s.catalog.defaults(), k0=a, k1=b, k2=c))
             for a, b, c in itertools.product(range(5), repeat=3)]
    assert opt.metric == pytest.approx(min(times), rel=1e-12)


def test_fixture_optimum_beats_random_configs():
    for name in ("sysbench-like", "tpcc-like"):
        s = fixture(name)
        opt = brute_force_optimum(s)
        for cfg in sample_lhs(s.catalog, s.catalog.names, 200, 0):
            assert surface_eval(s, cfg) <= opt.metric * (1 + 1e-12)


def test_true_importance_zero_off_influential():
    s = fixture("tpcc-like")
    imp = true_importance(s)
    assert all(imp[n] == 0 for n in s.catalog.names if n not in s.influential)
    assert all(imp[n] > 0 for n in s.influential)
    assert set(true_ranking(s)[:10]) == set(s.influential)


def test_noise_free_steady_window_is_exact():
    s = fixture("sysbench-like")
    s0 = SyntheticSurface(s.catalog, s.influential, [], s.base_metric, 0.0)
    cfg = s.catalog.defaults()
    series = simulate_throughput(s0, cfg, 90, 0)
    assert series[-30:].mean() == pytest.approx(surface_eval(s0, cfg), rel=1e-14)
    assert series[0] < series[20]
    assert series[0] == pytest.approx(0.6 * surface_eval(s0, cfg))


@pytest.mark.parametrize("name", ["sysbench-like", "tpcc-like"])
def test_throughput_noise_calibration(name):
    s = fixture(name)
    cfg = s.catalog.defaults()
    means = np.array([simulate_throughput(s, cfg, 90, seed)[-30:].mean() for seed in range(200)])
    cv = means.std(ddof=1) / means.mean()
    assert 0.65 * s.noise_cv <= cv <= 1.35 * s.noise_cv
    if name == "sysbench-like":
        assert 0.03 <= cv <= 0.06


def test_series_prefix_and_determinism():
    s = fixture("sysbench-like")
    cfg = s.catalog.defaults()
    long, short = simulate_throughput(s, cfg, 90, 7), simulate_throughput(s, cfg, 40, 7)
    assert np.array_equal(long[:40], short)
    assert np.array_equal(long, simulate_throughput(s, cfg, 90, 7))


def test_batch_additivity():
    s = _small(mode="batch")
    cfg = s.catalog.defaults()
    total = simulate_batch(s, cfg)
    assert total == pytest.approx(s.query_times.sum() / s.factor(cfg))
    assert simulate_batch(s, cfg, [0, 2]) < total
    assert simulate_batch(s, cfg, [0, 2]) + simulate_batch(s, cfg, [1, 3]) == pytest.approx(total)


def test_batch_noise_calibration():
    s = fixture("tpch-like")
    cfg = s.catalog.defaults()
    t = np.array([simulate_batch(s, cfg, None, seed) for seed in range(200)])
    assert 0.65 * s.noise_cv <= t.std(ddof=1) / t.mean() <= 1.35 * s.noise_cv
    assert s.query_times.sum() == pytest.approx(s.base_metric)


def test_synthetic_target_phases_share_a_series():
    s = fixture("sysbench-like")
    t = SyntheticTarget(s)
    pol = BenchPolicy()
    probe, _ = t.run(s.catalog.defaults(), "probe", pol, 11)
    full, probe2 = t.run(s.catalog.defaults(), "full", pol, 11)
    assert probe == probe2
    assert full == pytest.approx(simulate_throughput(s, s.catalog.defaults(), 90, 11)[-30:].mean())


def test_invalid_config_rejected():
    s = _small()
    with pytest.raises(ValueError):
        surface_eval(s, dict(s.catalog.defaults(), k0=9))


def test_surface_json_roundtrip(tmp_path):
    for name in ("tpcc-like", "tpch-like"):
        s = fixture(name)
        save_surface(s, tmp_path / "s.json")
        back = load_surface(tmp_path / "s.json")
        doc = json.loads((tmp_path / "s.json").read_text())
        assert set(doc) >= {"knobs", "influential", "interactions", "base_metric", "noise_cv", "mode", "query_times"}
        for cfg in sample_lhs(s.catalog, s.catalog.names, 20, 1):
            assert surface_eval(back, cfg) == pytest.approx(surface_eval(s, cfg), rel=1e-12)


def _script(tmp_path, body):
    path = tmp_path / "drv.py"
    path.write_text(body)
    return [PY, str(path)]


def test_external_stub(tmp_path):
    cmd = _script(tmp_path, "import json,sys\n"
                            "doc=json.load(sys.stdin)\n"
                            "assert doc['budget']['phase']=='full'\n"
                            "print('warming up')\n"
                            "print(json.dumps({'metric': 123.0 + doc['config']['x'], 'fidelity': 'full'}))\n")
    m = external_eval(cmd, {"x": np.int64(2)}, BenchPolicy().budget("full"))
    assert (m.raw_metric, m.fidelity) == (125.0, "full")
    assert ExternalTarget(cmd).run({"x": 0}, "full", BenchPolicy(), 0)[0] == 123.0


def test_external_exit_code(tmp_path):
    cmd = _script(tmp_path, "import sys\nprint('boom')\nsys.exit(1)\n")
    with pytest.raises(TargetError, match="target failed") as exc:
        external_eval(cmd, {}, {})
    assert "boom" in exc.value.output


def test_external_malformed(tmp_path):
    cmd = _script(tmp_path, "print('{not json')\n")
    with pytest.raises(TargetError, match="malformed") as exc:
        external_eval(cmd, {}, {})
    assert "{not json" in exc.value.output
    cmd = _script(tmp_path, "print('{\"metric\": 1.0, \"fidelity\": \"maybe\"}')\n")
    with pytest.raises(TargetError):
        external_eval(cmd, {}, {})


def test_external_timeout(tmp_path):
    cmd = _script(tmp_path, "import time\ntime.sleep(5)\n")
    with pytest.raises(TargetError, match="timed out"):
        external_eval(cmd, {}, {}, timeout=0.5)


def test_forest_recovers_true_top3():
    # tpcc-like: its heavy knobs have broad effects a 200-sample forest can see
    s = fixture("tpcc-like")
    t = SyntheticTarget(s)
    pol = BenchPolicy()
    truth = set(true_ranking(s)[:3])
    hits = 0
    for seed in range(5):
        configs = sample_lhs(s.catalog, s.catalog.names, 200, seed)
        y = np.array([t.run(c, "full", pol, 1000 * seed + i)[0] for i, c in enumerate(configs)])
        X = encode_many(s.catalog, s.catalog.names, configs)
        imp = forest_fit(X, y, rng=seed).importances
        top = {s.catalog.names[j] for j in np.argsort(-imp)[:3]}
        hits += top == truth
    assert hits >= 3
