"""Knob catalogs, configurations, observations and sampling.

Configurations are plain ``dict`` objects mapping knob name to value.  Every
numeric consumer (GP, forest) works on the encoded representation, where each
knob occupies one coordinate in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

KINDS = ("integer", "continuous", "boolean", "enum")

Configuration = dict


@dataclass(frozen=True)
class KnobSpec:
    """A single tunable knob.

    ``kind`` is one of ``integer``, ``continuous``, ``boolean`` or ``enum``.
    Range kinds use inclusive ``low``/``high`` bounds; ``enum`` uses ``choices``.
    """

    name: str
    kind: str
    default: Any
    low: float | None = None
    high: float | None = None
    choices: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind in ("integer", "continuous"):
            if self.low is None or self.high is None:
                raise ValueError(f"{self.name}: range knob needs low and high")
            if not self.low < self.high:
                raise ValueError(f"{self.name}: low must be < high")
            if self.kind == "integer" and not (float(self.low).is_integer() and float(self.high).is_integer()):
                raise ValueError(f"{self.name}: integer bounds must be integral")
        elif self.kind == "enum":
            object.__setattr__(self, "choices", tuple(self.choices))
            if len(self.choices) < 2:
                raise ValueError(f"{self.name}: enum needs at least 2 choices")
        problem = self.check(self.default)
        if problem:
            raise ValueError(f"{self.name}: invalid default ({problem})")

    @property
    def is_range(self) -> bool:
        return self.kind in ("integer", "continuous")

    @property
    def levels(self) -> int | None:
        """Number of distinct values, or None for continuous knobs."""
        if self.kind == "integer":
            return int(self.high - self.low) + 1
        if self.kind == "boolean":
            return 2
        if self.kind == "enum":
            return len(self.choices)
        return None

    def check(self, value) -> str | None:
        """Return a problem description, or None when ``value`` is valid."""
        if self.kind == "boolean":
            return None if isinstance(value, (bool, np.bool_)) else "not a boolean"
        if self.kind == "enum":
            return None if value in self.choices else "not one of the choices"
        if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
            return "not numeric"
        if not math.isfinite(value):
            return "not finite"
        if self.kind == "integer" and not float(value).is_integer():
            return "not an integer"
        if value < self.low or value > self.high:
            return "out of range"
        return None

    def encode(self, value) -> float:
        if self.kind == "boolean":
            return 1.0 if value else 0.0
        if self.kind == "enum":
            return self.choices.index(value) / (len(self.choices) - 1)
        return (float(value) - self.low) / (self.high - self.low)

    def decode(self, u: float):
        """Map a coordinate in [0, 1] to the nearest valid value (ties toward low)."""
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == "continuous":
            return self.low + u * (self.high - self.low)
        idx = _round_half_down(u * (self.levels - 1))
        if self.kind == "integer":
            return int(self.low) + idx
        if self.kind == "boolean":
            return bool(idx)
        return self.choices[idx]

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.is_range:
            out["min"] = self.low
            out["max"] = self.high
        if self.kind == "enum":
            out["choices"] = list(self.choices)
        out["default"] = self.default
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "KnobSpec":
        kind = d["kind"]
        low, high = d.get("min"), d.get("max")
        default = d["default"]
        if kind == "integer":
            low, high, default = int(low), int(high), int(default)
        return cls(d["name"], kind, default, low=low, high=high, choices=tuple(d.get("choices", ())))


def _round_half_down(x):
    # nearest integer, ties toward the lower value
    return np.ceil(np.asarray(x) - 0.5).astype(int) if np.ndim(x) else int(math.ceil(x - 0.5))


@dataclass
class KnobCatalog:
    """Ordered knob universe with an optional importance ranking."""

    knobs: list[KnobSpec]
    ranking: list[str] | None = None

    def __post_init__(self) -> None:
        self.knobs = list(self.knobs)
        names = [k.name for k in self.knobs]
        if len(set(names)) != len(names):
            raise ValueError("knob names must be unique")
        self._index = {name: i for i, name in enumerate(names)}
        if self.ranking is not None:
            self.ranking = list(self.ranking)
            if sorted(self.ranking) != sorted(names):
                raise ValueError("ranking must be a permutation of the knob names")

    def __len__(self) -> int:
        return len(self.knobs)

    def __getitem__(self, name: str) -> KnobSpec:
        return self.knobs[self._index[name]]

    def __contains__(self, name) -> bool:
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [k.name for k in self.knobs]

    def ordered(self) -> list[str]:
        """Knob names most-important first (catalog order when unranked)."""
        return list(self.ranking) if self.ranking is not None else self.names

    def with_ranking(self, ranking: Sequence[str] | None) -> "KnobCatalog":
        return KnobCatalog(self.knobs, None if ranking is None else list(ranking))

    def sort_subset(self, subset: Iterable[str]) -> list[str]:
        """Subset names in catalog order; raises KeyError on unknown names."""
        subset = set(subset)
        unknown = subset - set(self._index)
        if unknown:
            raise KeyError(f"unknown knobs: {sorted(unknown)}")
        return [name for name in self.names if name in subset]

    def defaults(self) -> Configuration:
        return {k.name: k.default for k in self.knobs}

    def to_json(self) -> dict:
        out: dict = {"knobs": [k.to_dict() for k in self.knobs]}
        if self.ranking is not None:
            out["ranking"] = list(self.ranking)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, doc) -> "KnobCatalog":
        if isinstance(doc, list):
            return cls([KnobSpec.from_dict(d) for d in doc])
        return cls([KnobSpec.from_dict(d) for d in doc["knobs"]], doc.get("ranking"))

    @classmethod
    def load(cls, path) -> "KnobCatalog":
        return cls.from_json(json.loads(Path(path).read_text()))


def validate(catalog: KnobCatalog, config: Configuration) -> list[str]:
    """List every problem with ``config``; an empty list means it is valid."""
    problems = []
    for name in config:
        if name not in catalog:
            problems.append(f"{name}: unknown knob")
    for knob in catalog.knobs:
        if knob.name not in config:
            problems.append(f"{knob.name}: missing assignment")
            continue
        problem = knob.check(config[knob.name])
        if problem:
            problems.append(f"{knob.name}: {problem}")
    return problems


def encode(catalog: KnobCatalog, subset: Iterable[str], config: Configuration) -> np.ndarray:
    problems = validate(catalog, config)
    if problems:
        raise ValueError("invalid configuration: " + "; ".join(problems))
    return np.array([catalog[name].encode(config[name]) for name in catalog.sort_subset(subset)], dtype=float)


def encode_many(catalog: KnobCatalog, subset: Iterable[str], configs: Sequence[Configuration]) -> np.ndarray:
    names = catalog.sort_subset(subset)
    knobs = [catalog[n] for n in names]
    out = np.empty((len(configs), len(names)))
    for i, config in enumerate(configs):
        out[i] = [k.encode(config[k.name]) for k in knobs]
    return out


def decode(catalog: KnobCatalog, subset: Iterable[str], u: Sequence[float], base: Configuration) -> Configuration:
    """Build a full configuration from encoded subset coordinates.

    Knobs outside ``subset`` take their value from ``base``.
    """
    names = catalog.sort_subset(subset)
    config = dict(base)
    for name, value in zip(names, u):
        config[name] = catalog[name].decode(value)
    return config


def snap(catalog: KnobCatalog, subset: Iterable[str], U: np.ndarray) -> np.ndarray:
    """Round encoded points onto the grid of valid values (vectorized decode+encode)."""
    U = np.clip(np.array(U, dtype=float), 0.0, 1.0)
    for j, name in enumerate(catalog.sort_subset(subset)):
        levels = catalog[name].levels
        if levels is not None:
            U[:, j] = _round_half_down(U[:, j] * (levels - 1)) / (levels - 1)
    return U


def sample_random_encoded(catalog: KnobCatalog, subset: Iterable[str], n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over each knob's domain, in encoded form."""
    names = catalog.sort_subset(subset)
    if not names:
        raise ValueError("cannot sample an empty knob subset")
    if n < 1:
        raise ValueError("n must be >= 1")
    U = np.empty((n, len(names)))
    for j, name in enumerate(names):
        levels = catalog[name].levels
        if levels is None:
            U[:, j] = rng.random(n)
        else:
            U[:, j] = rng.integers(0, levels, size=n) / (levels - 1)
    return U


def sample_random(catalog: KnobCatalog, subset: Iterable[str], n: int, rng, base: Configuration | None = None) -> list[Configuration]:
    """``n`` uniformly random configurations; knobs outside ``subset`` stay at ``base`` (defaults)."""
    rng = np.random.default_rng(rng)
    U = sample_random_encoded(catalog, subset, n, rng)
    base = catalog.defaults() if base is None else base
    return [decode(catalog, subset, row, base) for row in U]


def sample_lhs_encoded(catalog: KnobCatalog, subset: Iterable[str], n: int, rng: np.random.Generator) -> np.ndarray:
    names = catalog.sort_subset(subset)
    if not names:
        raise ValueError("cannot sample an empty knob subset")
    if n < 1:
        raise ValueError("n must be >= 1")
    U = np.empty((n, len(names)))
    for j, name in enumerate(names):
        knob = catalog[name]
        levels = knob.levels
        if levels is None:
            U[:, j] = (rng.permutation(n) + rng.random(n)) / n
        elif knob.kind == "integer" and levels >= n:
            # every stratum of width span/n holds at least one integer here
            span = levels - 1
            strata = rng.permutation(n)
            lo = np.ceil(strata * span / n).astype(int)
            hi = np.where(strata == n - 1, span, np.ceil((strata + 1) * span / n).astype(int) - 1)
            U[:, j] = (lo + np.floor(rng.random(n) * (hi - lo + 1)).astype(int)) / span
        else:
            counts = np.full(levels, n // levels)
            counts[rng.choice(levels, size=n % levels, replace=False)] += 1
            idx = np.repeat(np.arange(levels), counts)
            U[:, j] = rng.permutation(idx) / (levels - 1)
    return U


def sample_lhs(catalog: KnobCatalog, subset: Iterable[str], n: int, rng, base: Configuration | None = None) -> list[Configuration]:
    """Latin hypercube design over ``subset``.

    Continuous knobs (and integer knobs with at least ``n`` values) hit each of the
    ``n`` equal strata of [0, 1] exactly once.  Smaller discrete domains get each
    value ``n // levels`` or ``n // levels + 1`` times.
    """
    rng = np.random.default_rng(rng)
    U = sample_lhs_encoded(catalog, subset, n, rng)
    base = catalog.defaults() if base is None else base
    return [decode(catalog, subset, row, base) for row in U]


@dataclass(frozen=True)
class Observation:
    config: Configuration
    score: float
    fidelity: str
    raw_metric: float | None
    active_set: frozenset
    iteration: int
    wall_ms: float = 0.0
    cost: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError("observation score must be finite")
        if self.fidelity not in ("full", "partial"):
            raise ValueError(f"bad fidelity {self.fidelity!r}")


@dataclass
class ObservationSet:
    """Append-only store of observations with strictly increasing iterations."""

    observations: list[Observation] = field(default_factory=list)

    def append(self, obs: Observation) -> None:
        if self.observations and obs.iteration <= self.observations[-1].iteration:
            raise ValueError("iteration numbers must be strictly increasing")
        self.observations.append(obs)

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    def best(self, fidelity: str | None = "full") -> Observation | None:
        pool = [o for o in self.observations if fidelity is None or o.fidelity == fidelity]
        return max(pool, key=lambda o: o.score) if pool else None


def project(obs: ObservationSet | Sequence[Observation], catalog: KnobCatalog, subset: Iterable[str],
            base: Configuration | None = None, mode: str = "strict") -> tuple[np.ndarray, np.ndarray, list[Observation]]:
    """Encode past observations on the columns of ``subset``.

    In ``strict`` mode an observation is kept only when every knob outside
    ``subset`` holds its value in ``base`` (the defaults, or frozen values).
    In ``drop`` mode every observation is kept and the other coordinates are
    simply discarded.  Returns ``(X, y, kept)``.
    """
    if mode not in ("strict", "drop"):
        raise ValueError(f"unknown projection mode {mode!r}")
    names = catalog.sort_subset(subset)
    base = catalog.defaults() if base is None else base
    inside = set(names)
    outside = [n for n in catalog.names if n not in inside]
    if mode == "strict":
        kept = [o for o in obs if all(o.config[n] == base[n] for n in outside)]
    else:
        kept = list(obs)
    knobs = [catalog[n] for n in names]
    X = np.array([[k.encode(o.config[k.name]) for k in knobs] for o in kept], dtype=float).reshape(len(kept), len(names))
    y = np.array([o.score for o in kept], dtype=float)
    return X, y, kept
