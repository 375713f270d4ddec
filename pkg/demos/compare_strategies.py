"""Tune the sysbench-like simulator with DOT and with BO over every knob."""

from dottune.targets import SyntheticTarget, brute_force_optimum, fixture, surface_eval, true_ranking
from dottune.tuner import TuneParams, bo_fixed_tune, dot_tune

surface = fixture("sysbench-like")
target = SyntheticTarget(surface)
optimum = brute_force_optimum(surface).metric
budget = 120

dot = dot_tune(surface.catalog.with_ranking(true_ranking(surface)), target, TuneParams(seed=0, budget=budget))
bo_all = bo_fixed_tune(surface.catalog, target, TuneParams(seed=0, budget=budget, strategy="bo-fixed"))

for name, log in (("DOT", dot), ("BO, all knobs", bo_all)):
    true = surface_eval(surface, log.best_config)
    print(f"{name:14s} best measured {log.best_raw:8.1f}  true {true:8.1f}  ({true / optimum:.1%} of optimum)  "
          f"benchmark seconds {log.total_cost:.0f}")

print("\nDOT epochs:")
for ep in dot.epochs:
    print(f"  epoch {ep['epoch']}: {ep['E']:3d} evaluations on {len(ep['active']):2d} knobs, best {ep['y_star']:.1f}")
