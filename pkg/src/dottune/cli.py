"""Command-line entry point: ``dottune tune|rank|stats|study``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import secrets
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bench import BenchPolicy
from .forest import forest_fit, write_ranking_csv
from .session import substream
from .space import KnobCatalog, encode_many, sample_lhs, sample_random
from .stats import (convergence_olap, convergence_oltp, friedman_test, jaccard, mape_sweep, replicate,
                    stability_study, welch_t_test)
from .targets import FIXTURES, ExternalTarget, SyntheticTarget, fixture, load_surface, true_ranking
from .tuner import TuneParams, tune


class ConfigError(Exception):
    pass


def _resolve(path, root: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else root / p


def _load_json(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def make_target(spec, root: Path = Path(".")):
    """Target from a fixture name, a surface JSON path, ``cmd:<command>`` or a dict."""
    if isinstance(spec, str):
        if spec in FIXTURES:
            return SyntheticTarget(fixture(spec))
        if spec.startswith("cmd:"):
            return ExternalTarget(spec[4:])
        path = _resolve(spec, root)
        if not path.is_file():
            raise ConfigError(f"target not found: {spec}")
        return SyntheticTarget(load_surface(path))
    if "fixture" in spec:
        if spec["fixture"] not in FIXTURES:
            raise ConfigError(f"unknown fixture {spec['fixture']!r}")
        return SyntheticTarget(fixture(spec["fixture"]))
    if "surface" in spec:
        return make_target(str(_resolve(spec["surface"], root)), root)
    if "command" in spec:
        return ExternalTarget(spec["command"], spec.get("direction", "maximize"), float(spec.get("timeout", 600)))
    raise ConfigError("target needs one of fixture, surface or command")


def _catalog_for(cfg: dict, target, root: Path) -> KnobCatalog:
    if "catalog" in cfg:
        path = _resolve(cfg["catalog"], root)
        if not path.is_file():
            raise ConfigError(f"catalog file not found: {path}")
        catalog = KnobCatalog.from_json(_load_json(path))
    elif isinstance(target, SyntheticTarget):
        catalog = target.catalog
    else:
        raise ConfigError("external targets need a catalog")
    return catalog


def _apply_ranking(catalog: KnobCatalog, ranking, target, seed: int, root: Path) -> KnobCatalog:
    if ranking is None or ranking == "catalog":
        return catalog
    if ranking == "random":
        perm = substream(seed, "ranking").permutation(len(catalog))
        return catalog.with_ranking([catalog.names[i] for i in perm])
    if ranking == "true":
        if not isinstance(target, SyntheticTarget):
            raise ConfigError("ranking 'true' needs a synthetic target")
        return catalog.with_ranking(true_ranking(target.surface))
    if isinstance(ranking, list):
        return catalog.with_ranking(ranking)
    path = _resolve(ranking, root)
    if not path.is_file():
        raise ConfigError(f"ranking file not found: {path}")
    return catalog.with_ranking(_read_ranking(path))


def _read_ranking(path: Path) -> list[str]:
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        return doc["ranking"] if isinstance(doc, dict) else doc
    rows = [r for r in csv.reader(text.splitlines()) if r]
    if rows and rows[0][0] == "knob":
        rows = rows[1:]
    return [r[0] for r in rows]


def _params(cfg: dict, seed: int, target) -> TuneParams:
    bench_cfg = dict(cfg.get("bench", {}))
    if "mode" not in bench_cfg and isinstance(target, SyntheticTarget):
        bench_cfg["mode"] = "throughput" if target.surface.mode == "throughput" else "batch"
    try:
        bench = BenchPolicy(**bench_cfg)
        p = dict(cfg.get("params", {}))
        p["strategy"] = cfg.get("strategy", p.get("strategy", "dot"))
        return TuneParams(bench=bench, seed=seed, **p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_tune(args) -> int:
    cfg_path = Path(args.config)
    cfg = _load_json(cfg_path)
    root = cfg_path.parent
    target = make_target(cfg.get("target", "sysbench-like"), root)
    catalog = _catalog_for(cfg, target, root)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        seed = secrets.randbelow(2**31)
        print(f"seed: {seed}")
    n_seeds = args.seeds if args.seeds is not None else int(cfg.get("seeds", 1))
    out = Path(args.out if args.out is not None else _resolve(cfg.get("out", "runs"), root))
    _params(cfg, seed, target)  # validate before doing any work
    out.mkdir(parents=True, exist_ok=True)

    def run(s: int):
        cat = _apply_ranking(catalog, cfg.get("ranking"), target, s, root)
        log = tune(cat, target, _params(cfg, s, target))
        log.write_jsonl(out / f"run_seed{s}.jsonl")
        (out / f"summary_seed{s}.json").write_text(json.dumps(log.summary(), indent=2, default=_jsonable))
        return log

    seeds = [seed + i for i in range(n_seeds)]
    if n_seeds == 1:
        log = run(seed)
        print(json.dumps({"seed": seed, "best_score": log.best_score, "best_raw": log.best_raw,
                          "iterations": len(log.records), "aborted": log.aborted}))
        return 1 if log.aborted else 0
    direction = getattr(target, "direction", "maximize")
    report = replicate(run, seeds, direction=direction)
    doc = report.to_dict()
    (out / "replication.json").write_text(json.dumps(doc, indent=2, default=_jsonable))
    print(json.dumps(doc["summary"], default=_jsonable))
    return 0


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(type(x).__name__)


def _read_samples(path: Path, catalog: KnobCatalog):
    """Configurations and scores from a JSONL run log (``config`` and ``score`` fields)."""
    configs, scores = [], []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            configs.append(rec["config"])
            scores.append(rec["score"])
    return configs, np.array(scores, dtype=float)


def cmd_rank(args) -> int:
    seed = _seed(args)
    target = make_target(args.target) if args.target else None
    if args.catalog:
        path = Path(args.catalog)
        if not path.is_file():
            raise ConfigError(f"catalog file not found: {path}")
        catalog = KnobCatalog.from_json(_load_json(path))
    elif isinstance(target, SyntheticTarget):
        catalog = target.catalog
    else:
        raise ConfigError("rank needs --catalog or a synthetic --target")
    rng = substream(seed, "rank")
    if args.samples_file:
        path = Path(args.samples_file)
        if not path.is_file():
            raise ConfigError(f"samples file not found: {path}")
        configs, y = _read_samples(path, catalog)
        if len(configs) == 0:
            raise ConfigError(f"no samples in {path}")
    else:
        if target is None:
            raise ConfigError("rank needs --target or --samples-file")
        if args.samples < 5:
            raise ConfigError("--samples must be >= 5")
        draw = sample_lhs if args.sampler == "lhs" else sample_random
        configs = draw(catalog, catalog.names, args.samples, rng)
        mode = "throughput"
        if isinstance(target, SyntheticTarget) and target.surface.mode == "batch":
            mode = "batch"
        policy = BenchPolicy(mode=mode)
        y = np.array([target.run(c, "full", policy, int(rng.integers(2**63 - 1)))[0] for c in configs])
        if getattr(target, "direction", "maximize") == "minimize":
            y = -y
    if len(configs) < 5:
        raise ConfigError("need at least 5 samples to rank")
    forest = forest_fit(encode_many(catalog, catalog.names, configs), y, rng=rng)
    if args.out:
        write_ranking_csv(args.out, catalog.names, forest.importances)
    else:
        write_ranking_csv(sys.stdout, catalog.names, forest.importances)
    if args.top_k:
        order = np.argsort(-forest.importances, kind="stable")
        ranking = [catalog.names[i] for i in order]
        Path(args.ranking_out or "ranking.json").write_text(json.dumps({"ranking": ranking, "top": ranking[: args.top_k]}, indent=2))
    return 0


def _read_column(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {path}")
    values = []
    for row in csv.reader(p.read_text().splitlines()):
        if not row or not row[0].strip():
            continue
        try:
            values.append(float(row[-1]))
        except ValueError:
            if values:
                raise ConfigError(f"{path}: non-numeric value {row[-1]!r}")
    return np.array(values)


def _read_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {path}")
    rows = []
    for row in csv.reader(p.read_text().splitlines()):
        if not row:
            continue
        try:
            rows.append([float(v) for v in row])
        except ValueError:
            if rows:
                raise ConfigError(f"{path}: non-numeric row {row!r}")
    return np.array(rows)


def _read_set(path: str) -> set:
    doc = _load_json(Path(path))
    if isinstance(doc, dict):
        doc = doc.get("top", doc.get("ranking", doc.get("knobs")))
    if not isinstance(doc, list):
        raise ConfigError(f"{path}: expected a JSON list")
    return set(doc)


def cmd_stats(args) -> int:
    if args.sub == "welch":
        if len(args.files) != 2:
            raise ConfigError("welch needs two files")
        t, dof, p = welch_t_test(_read_column(args.files[0]), _read_column(args.files[1]))
        result = {"t": t, "dof": dof, "p": p}
    elif args.sub == "friedman":
        if len(args.files) != 1:
            raise ConfigError("friedman needs one blocks x treatments CSV")
        res = friedman_test(_read_matrix(args.files[0]))
        result = {"chi2": res.chi2, "p": res.p, "mean_ranks": res.mean_ranks.tolist()}
    elif args.sub == "jaccard":
        if len(args.files) != 2:
            raise ConfigError("jaccard needs two files")
        result = {"jaccard": jaccard(_read_set(args.files[0]), _read_set(args.files[1]))}
    else:
        if len(args.files) != 1:
            raise ConfigError("converge needs one series CSV")
        detector = convergence_olap if args.olap else convergence_oltp
        c = detector(_read_column(args.files[0]))
        result = {"iteration": c.iteration, "converged": c.converged, "t_star": c.t_star, "reference": c.reference}
    print(json.dumps(result, default=_jsonable))
    return 0


def cmd_study(args) -> int:
    spec_path = Path(args.spec)
    spec = _load_json(spec_path)
    root = spec_path.parent
    target = make_target(spec.get("target", "sysbench-like"), root)
    if not isinstance(target, SyntheticTarget):
        raise ConfigError("studies run on synthetic targets only")
    seed = args.seed if args.seed is not None else int(spec.get("seed", 0))
    out = _resolve(spec.get("out", "study.csv"), root) if args.out is None else Path(args.out)
    kind = spec.get("study")
    if kind == "stability":
        cells = stability_study(target, tuple(spec.get("sizes", (50, 100, 200))),
                                tuple(spec.get("samplers", ("random", "lhs"))),
                                int(spec.get("n_seeds", 5)), int(spec.get("top_k", 20)), seed)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sampler", "size", "mean_jaccard", "sd_jaccard"])
            for c in cells:
                w.writerow([c.sampler, c.size, repr(c.mean), repr(c.sd)])
        matrices = {f"{c.sampler}/{c.size}": c.matrix.tolist() for c in cells}
        out.with_suffix(".matrices.json").write_text(json.dumps(matrices, indent=1))
    elif kind == "mape":
        default_cuts = (10, 20, 40, 60) if target.surface.mode == "throughput" else (0.2, 0.4, 0.6)
        rows = mape_sweep(target, tuple(spec.get("cuts", default_cuts)), int(spec.get("n_runs", 500)), seed)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cut", "stat", "value"])
            for r in rows:
                w.writerow([r["cut"], r["stat"], repr(r["value"])])
    else:
        raise ConfigError(f"unknown study {kind!r}; use 'stability' or 'mape'")
    print(str(out))
    return 0


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    seed = secrets.randbelow(2**31)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dottune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="run a tuning strategy from a run-config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="number of replicated seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("rank", help="forest-importance ranking of knobs")
    p.add_argument("--catalog")
    p.add_argument("--target", help="fixture name, surface JSON, or cmd:<command>")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--sampler", choices=("lhs", "random"), default="lhs")
    p.add_argument("--samples-file", help="JSONL run log to rank from instead of sampling")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.add_argument("--top-k", type=int, help="also write a ranking JSON with the top k")
    p.add_argument("--ranking-out")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("stats", help="welch | friedman | jaccard | converge")
    p.add_argument("sub", choices=("welch", "friedman", "jaccard", "converge"))
    p.add_argument("files", nargs="+")
    p.add_argument("--olap", action="store_true", help="converge: batch-time detector")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("study", help="stability or MAPE study from a spec file")
    p.add_argument("spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
