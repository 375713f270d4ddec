"""Stay-or-expand decisions taken after every tuning epoch.

Action 0 keeps (a pruned version of) the current knob set, action 1 appends
new knobs.  Rewards are binarized per-iteration relative gains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DELTA = 0.001


@dataclass
class LrtState:
    """Success/failure counts for both actions plus the first-call flag."""

    s0: int = 1
    f0: int = 1
    s1: int = 1
    f1: int = 1
    init: bool = True
    delta: float = DELTA

    def rates(self) -> tuple[float, float]:
        return self.s0 / (self.s0 + self.f0), self.s1 / (self.s1 + self.f1)

    def record(self, action: int, reward: int) -> None:
        if action == 0:
            if reward:
                self.s0 += 1
            else:
                self.f0 += 1
        elif reward:
            self.s1 += 1
        else:
            self.f1 += 1


@dataclass(frozen=True)
class PolicyDecision:
    action: int
    gain: float | None = None
    reward: int | None = None
    lam: float | None = None

    def to_dict(self) -> dict:
        return {"action": self.action, "gain": self.gain, "reward": self.reward, "lambda": self.lam}


def per_call_gain(b: float, y_star: float, E: int) -> float:
    """Relative improvement of ``y_star`` over ``b``, divided by the epoch length."""
    if E < 1:
        raise ValueError("E must be >= 1")
    if not b > 0:
        raise ValueError("the previous best must be positive on the higher-is-better scale")
    return (y_star - b) / (b * E)


def lrt_step(state: LrtState, b: float | None, y_star: float, E: int, rng=None) -> PolicyDecision:
    """Likelihood-ratio choice between staying (0) and expanding (1).

    The first call draws the action from a fair coin and leaves the counts
    untouched.  Later calls pick ``1[ln(p1/p0) > 0]`` and credit the chosen
    action with reward ``1[g > delta]``.
    """
    if state.init:
        action = int(np.random.default_rng(rng).random() < 0.5)
        state.init = False
        return PolicyDecision(action)
    p0, p1 = state.rates()
    lam = math.log(p1 / p0)
    action = int(lam > 0)
    g = per_call_gain(b, y_star, E)
    r = int(g > state.delta)
    state.record(action, r)
    return PolicyDecision(action, g, r, lam)


def thompson_step(state: LrtState, b: float | None, y_star: float, E: int, rng=None) -> PolicyDecision:
    """Binary Thompson sampling over Beta(s_i, f_i) posteriors.

    With no previous best (``b is None``) the action is sampled but no reward
    is credited.
    """
    rng = np.random.default_rng(rng)
    theta0 = rng.beta(state.s0, state.f0)
    theta1 = rng.beta(state.s1, state.f1)
    action = int(theta1 > theta0)
    state.init = False
    if b is None:
        return PolicyDecision(action)
    g = per_call_gain(b, y_star, E)
    r = int(g > state.delta)
    state.record(action, r)
    return PolicyDecision(action, g, r)


def always_expand_step(knobs_remaining: int) -> PolicyDecision:
    """Ablation: expand while unseen knobs remain, then stay."""
    return PolicyDecision(1 if knobs_remaining > 0 else 0)


POLICIES = ("lrt", "thompson", "always-expand")
