"""Online selection from a Pareto front under the current context.

Among candidates that meet both budgets, the winner maximizes

    score = mu * Norm(A) - (1 - mu) * Norm(E),     mu = remaining battery fraction

with ``Norm`` a min-max map over the feasible set (optionally applied after a
log). Candidates within ``tie_band`` of the best score go through an AHP
tie-break over (A, E, T headroom, M headroom); remaining ties prefer
on-device plans, then lower E, then the smaller candidate id. When nothing is
feasible, the candidate with the smallest worst budget ratio is returned and
flagged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from hmtplan.adapt.ahp import DEFAULT_PAIRWISE, ahp_weights
from hmtplan.adapt.context import ContextEvent
from hmtplan.adapt.pareto import Candidate
from hmtplan.cost.estimate import PerformanceEstimate

NORMS = ("minmax", "log")


@dataclass(frozen=True)
class Selection:
    candidate: Candidate
    estimate: PerformanceEstimate
    feasible: bool
    score: float
    mu: float
    scores: dict[str, float]


def _norm(values: np.ndarray, mode: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if mode == "log":
        v = np.log(np.maximum(v, 1e-300))
    elif mode != "minmax":
        raise ValueError(f"unknown normalization {mode!r}; choose from {NORMS}")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def scores(ests: Sequence[PerformanceEstimate], mu: float, norm: str = "minmax") -> np.ndarray:
    a = _norm(np.array([e.accuracy for e in ests]), norm)
    e = _norm(np.array([e.energy for e in ests]), norm)
    return mu * a - (1.0 - mu) * e


def _ahp_pick(cands: list[Candidate], ests: list[PerformanceEstimate], event: ContextEvent,
              weights: Sequence[float]) -> list[int]:
    """Indices ordered by the AHP-weighted criteria (best first)."""
    cols = np.array([
        [e.accuracy, -e.energy, 1.0 - e.latency / event.time_budget, 1.0 - e.memory / event.mem_budget]
        for e in ests
    ])
    total = np.zeros(len(cands))
    for j, w in enumerate(weights):
        total += w * _norm(cols[:, j], "minmax")
    return sorted(range(len(cands)), key=lambda i: (-round(total[i], 12), _tie_key(cands[i], ests[i])))


def _tie_key(c: Candidate, e: PerformanceEstimate) -> tuple:
    return (e.offloaded, e.energy, c.id)


def select_online(
    front: Sequence[Candidate],
    event: ContextEvent,
    evaluate: Callable[[Candidate], PerformanceEstimate] | None = None,
    norm: str = "minmax",
    tie_band: float = 0.01,
    pairwise=DEFAULT_PAIRWISE,
) -> Selection:
    if not front:
        raise ValueError("cannot select from an empty front")
    if not event.resolved:
        raise ValueError("event budgets must be resolved to absolute values first")
    cands = list(front)
    ests = [evaluate(c) if evaluate is not None else c.estimate for c in cands]
    mu = min(1.0, max(0.0, event.battery))
    feas = [i for i, e in enumerate(ests) if e.latency <= event.time_budget and e.memory <= event.mem_budget]
    if not feas:
        worst = [max(e.latency / event.time_budget, e.memory / event.mem_budget) for e in ests]
        i = min(range(len(cands)), key=lambda k: (worst[k], _tie_key(cands[k], ests[k])))
        return Selection(cands[i].with_estimate(ests[i]), ests[i], False, math.nan, mu, {})
    fc = [cands[i] for i in feas]
    fe = [ests[i] for i in feas]
    s = scores(fe, mu, norm)
    best = float(s.max())
    band = [k for k in range(len(fc)) if s[k] >= best - tie_band]
    if len(band) > 1:
        weights = ahp_weights(np.array(pairwise)).weights
        order = _ahp_pick([fc[k] for k in band], [fe[k] for k in band], event, weights)
        k = band[order[0]]
    else:
        k = band[0]
    return Selection(fc[k].with_estimate(fe[k]), fe[k], True, float(s[k]), mu,
                     {c.id: float(v) for c, v in zip(fc, s)})
