"""Rank knobs with a forest over an LHS design, then tune with that ranking."""

import json
import tempfile
from pathlib import Path

from dottune.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    main(["rank", "--target", "tpcc-like", "--samples", "200", "--sampler", "lhs", "--seed", "3",
          "--out", str(tmp / "rank.csv"), "--top-k", "20"])
    print("top of the forest ranking:")
    print("".join((tmp / "rank.csv").read_text().splitlines(keepends=True)[:8]))
    cfg = tmp / "run.json"
    cfg.write_text('{"target": "tpcc-like", "strategy": "dot", "ranking": "rank.csv", '
                   '"params": {"budget": 80}, "seed": 3}')
    main(["tune", "--config", str(cfg), "--out", str(tmp / "runs")])
    summary = json.loads((tmp / "runs" / "summary_seed3.json").read_text())
    print({k: summary[k] for k in ("best_score", "total_cost", "iterations")})
