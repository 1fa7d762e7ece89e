"""Offline Pareto-front construction over (accuracy up, energy down).

The joint design space is a fixed-length integer genome: one gene per
compression family (an index into that family's grid, 0 = off), one for the
exit, and one each for placement, quantization width, fusion and the
parallel toggle. ``evolve_front`` runs NSGA-II (rank + crowding survival,
binary tournaments, uniform crossover, Gaussian index noise as mutation) and
keeps an archive of everything it evaluated; the returned front is the
nondominated subset of that archive. No objective weights are involved.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from hmtplan.cost.estimate import DeploymentPlan, PerformanceEstimate, estimate_plan, remote_device
from hmtplan.cost.profiles import Fleet
from hmtplan.errors import VariantError
from hmtplan.ir.graph import ComputationGraph
from hmtplan.variants.accuracy import AccuracyModel
from hmtplan.variants.ops import FAMILY_ORDER, CompressionOp, Family, validate_variant
from hmtplan.variants.space import canonical_config

MAX_SPACE = 10_000


@dataclass(frozen=True)
class PlacementOption:
    placement: str = "local"
    split: float = 0.5

    @classmethod
    def parse(cls, text: str) -> "PlacementOption":
        """``local``, ``offload`` or ``split`` / ``split:0.3``."""
        name, _, arg = text.partition(":")
        return cls(name, float(arg) if arg else 0.5)

    def label(self) -> str:
        return f"split:{self.split:g}" if self.placement == "split" else self.placement


@dataclass(frozen=True)
class Candidate:
    id: str
    plan: DeploymentPlan
    genes: tuple[int, ...] = ()
    estimate: PerformanceEstimate | None = None

    def label(self) -> str:
        p = self.plan
        place = PlacementOption(p.placement, p.split).label()
        fuse = "fuse" if p.fusion_rules else "nofuse"
        return f"{p.variant.label()}|q{p.quant_bits}|{fuse}|{place}" + ("|par" if p.parallel else "")

    def with_estimate(self, est: PerformanceEstimate) -> "Candidate":
        return Candidate(self.id, self.plan, self.genes, est)

    def to_dict(self) -> dict[str, Any]:
        d = {"id": self.id, "label": self.label(), "plan": self.plan.to_dict()}
        if self.estimate is not None:
            d["estimate"] = self.estimate.to_dict()
        return d


def candidate_id(plan: DeploymentPlan) -> str:
    blob = json.dumps(plan.to_dict(), sort_keys=True, separators=(",", ":"))
    return "c" + hashlib.sha1(blob.encode()).hexdigest()[:10]


@dataclass(frozen=True, eq=False)
class DesignSpace:
    graph: ComputationGraph
    families: tuple[tuple[Family, tuple[CompressionOp | None, ...]], ...]
    exits: tuple[int | None, ...] = (None,)
    placements: tuple[PlacementOption, ...] = (PlacementOption(),)
    quant_bits: tuple[int, ...] = (32,)
    fusion: tuple[str, ...] = ("all",)
    parallel: tuple[bool, ...] = (False,)

    @property
    def gene_sizes(self) -> tuple[int, ...]:
        return tuple(len(opts) for _, opts in self.families) + (
            len(self.exits), len(self.placements), len(self.quant_bits), len(self.fusion), len(self.parallel))

    @property
    def ordinal(self) -> tuple[bool, ...]:
        """Genes whose index order means something (ratios, exits, widths) get Gaussian steps."""
        return tuple(True for _ in self.families) + (True, False, True, False, False)

    @property
    def size(self) -> int:
        return math.prod(self.gene_sizes)

    def decode(self, genes: Sequence[int]) -> Candidate | None:
        """The candidate a genome stands for, or None when the variant is invalid for the graph."""
        k = len(self.families)
        ops = [opts[genes[i]] for i, (_, opts) in enumerate(self.families)]
        variant = canonical_config(self.graph, ops, self.exits[genes[k]])
        try:
            validate_variant(self.graph, variant)
        except VariantError:
            return None
        place = self.placements[genes[k + 1]]
        plan = DeploymentPlan(
            variant=variant,
            quant_bits=self.quant_bits[genes[k + 2]],
            fusion_rules=self.fusion[genes[k + 3]],
            parallel=self.parallel[genes[k + 4]],
            placement=place.placement,
            split=place.split,
        )
        return Candidate(candidate_id(plan), plan, tuple(int(g) for g in genes))

    def enumerate(self) -> list[Candidate]:
        """Every distinct valid candidate, in genome order."""
        if self.size > MAX_SPACE:
            raise ValueError(f"design space has {self.size} genomes (limit {MAX_SPACE}) - too large to enumerate")
        out, seen = [], set()
        for genes in itertools.product(*(range(s) for s in self.gene_sizes)):
            c = self.decode(genes)
            if c is not None and c.id not in seen:
                seen.add(c.id)
                out.append(c)
        return out

    @classmethod
    def from_config(cls, graph: ComputationGraph, cfg: Mapping[str, Any], fleet: Fleet | None = None) -> "DesignSpace":
        """Build from an optimizer config (see ``OPTIMIZER_SCHEMA`` in the CLI).

        With a ``fleet`` whose home device has no links, placements other
        than ``local`` are dropped (they would all collapse onto it).
        """
        fams = []
        for fam in FAMILY_ORDER:
            spec = cfg.get("families", {}).get(fam.value)
            if spec is None:
                continue
            opts: list[CompressionOp | None] = [None]
            for item in spec:
                if fam is Family.DEPTH_SKIP:
                    opts.append(CompressionOp(fam, blocks=tuple(item)))
                elif isinstance(item, Mapping):
                    opts.append(CompressionOp(fam, float(item.get("ratio", 1.0)), tuple(item.get("blocks", ())),
                                              float(item.get("depth", 1.0))))
                else:
                    opts.append(CompressionOp(fam, float(item)))
            fams.append((fam, tuple(opts)))
        exits = cfg.get("exits")
        if exits is None:
            exits = [None]
        places = tuple(dict.fromkeys(PlacementOption.parse(p) for p in cfg.get("placements", ["local"])))
        if fleet is not None and remote_device(fleet, fleet.home) is None:
            places = (PlacementOption(),)
        return cls(
            graph,
            tuple(fams),
            tuple(None if e is None or e == "final" else int(e) for e in exits),
            places,
            tuple(int(b) for b in cfg.get("quant_bits", [32])),
            tuple(cfg.get("fusion", ["all"])),
            tuple(bool(p) for p in cfg.get("parallel", [False])),
        )


class Evaluator:
    """Memoized plan estimation for one graph and fleet, keyed by candidate and context."""

    def __init__(self, graph: ComputationGraph, fleet: Fleet, accuracy: AccuracyModel | None = None) -> None:
        self.graph = graph
        self.fleet = fleet
        self.accuracy = accuracy
        self._cache: dict[tuple, PerformanceEstimate] = {}

    def __call__(self, cand: Candidate, background_pressure: float = 0.0, freq_scale: float = 1.0,
                 bandwidth: Mapping[str, float] | None = None) -> PerformanceEstimate:
        key = (cand.id, background_pressure, freq_scale, tuple(sorted((bandwidth or {}).items())))
        est = self._cache.get(key)
        if est is None:
            fleet = self.fleet.with_context(freq_scale, bandwidth)
            est = estimate_plan(cand.plan, self.graph, fleet, background_pressure, self.accuracy)
            self._cache[key] = est
        return est

    @property
    def evaluations(self) -> int:
        return len(self._cache)


# -- dominance -------------------------------------------------------------------


def dominates(a: PerformanceEstimate, b: PerformanceEstimate) -> bool:
    """``a`` is at least as accurate and as frugal as ``b`` and strictly better in one."""
    return a.accuracy >= b.accuracy and a.energy <= b.energy and (a.accuracy > b.accuracy or a.energy < b.energy)


def nondominated(cands: Iterable[Candidate]) -> list[Candidate]:
    items = sorted(cands, key=lambda c: (-c.estimate.accuracy, c.estimate.energy, c.id))
    out: list[Candidate] = []
    best_e = math.inf
    for c in items:
        # sorted by accuracy descending: c is dominated iff some earlier item has E <= c.E
        # with a strict gain somewhere; equal (A, E) points are kept together.
        if c.estimate.energy < best_e or (out and _same(out[-1], c)):
            out.append(c)
            best_e = min(best_e, c.estimate.energy)
    return out


def _same(a: Candidate, b: Candidate) -> bool:
    return a.estimate.accuracy == b.estimate.accuracy and a.estimate.energy == b.estimate.energy


@dataclass(frozen=True)
class ParetoFront:
    candidates: tuple[Candidate, ...]
    evaluated: int = 0
    generations: int = 0

    def ids(self) -> list[str]:
        return [c.id for c in self.candidates]

    def to_dict(self) -> dict[str, Any]:
        return {"front_version": 1, "evaluated": self.evaluated, "generations": self.generations,
                "candidates": [c.to_dict() for c in self.candidates]}


def audit(cands: Sequence[Candidate]) -> list[tuple[str, str]]:
    """Every (dominating, dominated) pair inside ``cands`` (exhaustive)."""
    bad = []
    for a in cands:
        for b in cands:
            if a is not b and dominates(a.estimate, b.estimate):
                bad.append((a.id, b.id))
    return bad


def exact_front(space: DesignSpace, evaluate: Callable[[Candidate], PerformanceEstimate]) -> ParetoFront:
    cands = [c.with_estimate(evaluate(c)) for c in space.enumerate()]
    if not cands:
        raise ValueError("design space is empty")
    return ParetoFront(tuple(nondominated(cands)), len(cands), 0)


# -- NSGA-II ---------------------------------------------------------------------


def _sort_fronts(objs: np.ndarray) -> list[list[int]]:
    """Fast nondominated sort on rows of (-A, E) (both minimized)."""
    n = len(objs)
    dominated_by = [[] for _ in range(n)]
    count = np.zeros(n, dtype=int)
    for i in range(n):
        le = np.all(objs[i] <= objs, axis=1) & np.any(objs[i] < objs, axis=1)
        ge = np.all(objs <= objs[i], axis=1) & np.any(objs < objs[i], axis=1)
        dominated_by[i] = list(np.flatnonzero(le))
        count[i] = int(ge.sum())
    fronts, cur = [], [i for i in range(n) if count[i] == 0]
    while cur:
        fronts.append(cur)
        nxt = []
        for i in cur:
            for j in dominated_by[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(j)
        cur = sorted(nxt)
    return fronts


def _crowding(objs: np.ndarray, idx: list[int]) -> dict[int, float]:
    dist = {i: 0.0 for i in idx}
    if len(idx) <= 2:
        return {i: math.inf for i in idx}
    for m in range(objs.shape[1]):
        order = sorted(idx, key=lambda i: (objs[i, m], i))
        lo, hi = objs[order[0], m], objs[order[-1], m]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi == lo:
            continue
        for a, b, c in zip(order, order[1:], order[2:]):
            dist[b] += (objs[c, m] - objs[a, m]) / (hi - lo)
    return dist


def evolve_front(
    space: DesignSpace,
    evaluate: Callable[[Candidate], PerformanceEstimate],
    population: int = 16,
    generations: int = 50,
    seed: int = 0,
    crossover: float = 0.9,
    sigma: float = 1.0,
) -> ParetoFront:
    if population < 4 or generations < 1:
        raise ValueError("need population >= 4 and generations >= 1")
    sizes = space.gene_sizes
    if any(s == 0 for s in sizes):
        raise ValueError("design space is empty")
    ordinal = space.ordinal
    rng = np.random.default_rng(seed)
    archive: dict[str, Candidate] = {}
    by_genes: dict[tuple[int, ...], Candidate | None] = {}

    def realize(genes: tuple[int, ...]) -> Candidate | None:
        if genes not in by_genes:
            c = space.decode(genes)
            if c is not None:
                c = archive.get(c.id) or c.with_estimate(evaluate(c))
                archive.setdefault(c.id, c)
            by_genes[genes] = c
        return by_genes[genes]

    def random_genes() -> tuple[int, ...]:
        return tuple(int(rng.integers(s)) for s in sizes)

    def mutate(genes: tuple[int, ...]) -> tuple[int, ...]:
        g = list(genes)
        rate = 1.0 / len(g)
        hit = False
        for i, s in enumerate(sizes):
            if s > 1 and rng.random() < rate:
                hit = True
                if ordinal[i]:
                    step = int(np.rint(rng.normal(0.0, sigma))) or int(rng.choice((-1, 1)))
                    g[i] = int(np.clip(g[i] + step, 0, s - 1))
                else:
                    g[i] = int(rng.integers(s))
        if not hit:
            i = int(rng.integers(len(g)))
            g[i] = int(rng.integers(sizes[i]))
        return tuple(g)

    pop: list[Candidate] = []
    tries = 0
    while len(pop) < population and tries < 50 * population:
        tries += 1
        c = realize(random_genes())
        if c is not None and all(c.id != p.id for p in pop):
            pop.append(c)
    if not pop:
        raise ValueError("design space has no valid candidate")

    def rank_and_crowd(cands: list[Candidate]) -> tuple[dict[int, int], dict[int, float]]:
        objs = np.array([[-c.estimate.accuracy, c.estimate.energy] for c in cands])
        rank, crowd = {}, {}
        for r, fr in enumerate(_sort_fronts(objs)):
            crowd.update(_crowding(objs, fr))
            rank.update({i: r for i in fr})
        return rank, crowd

    for _ in range(generations):
        rank, crowd = rank_and_crowd(pop)

        def pick() -> Candidate:
            i, j = rng.integers(len(pop), size=2)
            ki = (rank[i], -crowd[i], pop[i].id)
            kj = (rank[j], -crowd[j], pop[j].id)
            return pop[i] if ki <= kj else pop[j]

        children: list[Candidate] = []
        attempts = 0
        while len(children) < population and attempts < 20 * population:
            attempts += 1
            a, b = pick(), pick()
            if rng.random() < crossover:
                mask = rng.random(len(sizes)) < 0.5
                genes = tuple(int(x if m else y) for x, y, m in zip(a.genes, b.genes, mask))
            else:
                genes = a.genes
            genes = mutate(genes)
            for _retry in range(3):  # steer away from genomes already seen
                if genes not in by_genes:
                    break
                genes = mutate(genes)
            c = realize(genes)
            if c is not None:
                children.append(c)
        merged: dict[str, Candidate] = {}
        for c in pop + children:
            merged.setdefault(c.id, c)
        pool = list(merged.values())
        rank, crowd = rank_and_crowd(pool)
        order = sorted(range(len(pool)), key=lambda i: (rank[i], -crowd[i], pool[i].id))
        pop = [pool[i] for i in order[:population]]

    return ParetoFront(tuple(nondominated(archive.values())), len(archive), generations)
