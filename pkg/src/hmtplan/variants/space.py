"""Variant design space: Cartesian product of per-family grids times exits."""
from __future__ import annotations

import itertools
from typing import Mapping, Sequence

from hmtplan.errors import VariantError
from hmtplan.ir.graph import ComputationGraph
from hmtplan.variants.ops import FAMILY_ORDER, CompressionOp, Family, VariantConfig, validate_variant


def canonical_config(graph: ComputationGraph, ops: Sequence[CompressionOp | None],
                     exit_index: int | None) -> VariantConfig:
    """Drop absent and identity ops; the final exit is always spelled ``None``.

    Skipped blocks that the chosen early exit never reaches are dropped too,
    since skipping them changes nothing.
    """
    if exit_index is not None and exit_index in (-1, len(graph.exits) - 1):
        exit_index = None
    reach = None
    if exit_index is not None and 0 <= exit_index < len(graph.exits):
        reach = graph.ancestors(graph.exits[: exit_index + 1])
    kept = []
    for op in ops:
        if op is None or op.is_identity():
            continue
        if op.family is Family.DEPTH_SKIP and reach is not None:
            blocks = tuple(b for b in op.blocks if b not in graph.blocks or set(graph.blocks[b].nodes) & reach)
            if not blocks:
                continue
            op = CompressionOp(op.family, op.ratio, blocks, op.depth)
        kept.append(op)
    return VariantConfig(tuple(kept), exit_index)


def enumerate_design_space(
    graph: ComputationGraph,
    grid: Mapping[Family | str, Sequence[CompressionOp | None]],
    exits: Sequence[int | None] | None = None,
) -> list[VariantConfig]:
    """Every valid combination, one option per family, in a deterministic order.

    Families are iterated in :data:`FAMILY_ORDER`, options in the order given,
    exits earliest first. ``None`` in a grid means "family off". Structurally
    equal configs (e.g. an identity ratio and ``None``) are emitted once.
    """
    grid = {Family(k): list(v) for k, v in grid.items()}
    fams = [f for f in FAMILY_ORDER if f in grid and grid[f]]
    if exits is None:
        exits = list(range(len(graph.exits))) if graph.exits else [None]
    out: list[VariantConfig] = []
    seen: set[VariantConfig] = set()
    for choice in itertools.product(*(grid[f] for f in fams)):
        for e in exits:
            cfg = canonical_config(graph, choice, e)
            if cfg in seen:
                continue
            try:
                validate_variant(graph, cfg)
            except VariantError:
                continue
            seen.add(cfg)
            out.append(cfg)
    return out
