"""Meta-structure instance matching: builds the per-node neighbor tables a view aggregates over."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from gems.services.gene import MetaStructureGene, canonicalize
from gems.services.hin_core import Hin

logger = logging.getLogger(__name__)

DEFAULT_EXPANSION_CAP = 20
DEFAULT_LIST_CAP = 50


@dataclass(frozen=True)
class PlanStep:
    """``extend`` binds ``child`` from the neighbors of ``parent``; ``check`` tests an edge between two bound nodes."""

    kind: str
    parent: int
    child: int


@dataclass(frozen=True)
class MatchPlan:
    order: Tuple[int, ...]
    steps: Tuple[PlanStep, ...]

    @property
    def extensions(self) -> int:
        return sum(1 for step in self.steps if step.kind == "extend")

    @property
    def checks(self) -> int:
        return sum(1 for step in self.steps if step.kind == "check")


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Per endpoint node, the opposite endpoints reached through gene instances (with multiplicity)."""

    gene_key: str
    from_type: int
    to_type: int
    neighbors: Tuple[np.ndarray, ...]
    sample_cap: Optional[int]
    list_cap: Optional[int]

    def __getitem__(self, node: int) -> np.ndarray:
        return self.neighbors[node]

    def __len__(self) -> int:
        return len(self.neighbors)

    def instance_count(self) -> int:
        return int(sum(len(row) for row in self.neighbors))

    def same_as(self, other: "NeighborTable") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(mine, theirs) for mine, theirs in zip(self.neighbors, other.neighbors)
        )


def _gene_neighbors(gene: MetaStructureGene) -> List[List[int]]:
    neighbors: List[List[int]] = [[] for _ in range(gene.n)]
    for i, j in gene.edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    return [sorted(row) for row in neighbors]


def plan(gene: MetaStructureGene, hin: Hin) -> MatchPlan:
    """Breadth-first spanning tree rooted at the gene node whose type carries the largest degree."""
    degrees = [hin.type_degree(t) for t in gene.type_list]
    root = max(range(gene.n), key=lambda i: (degrees[i], -i))
    neighbors = _gene_neighbors(gene)
    order = [root]
    visited = {root}
    steps: List[PlanStep] = []
    queue = [root]
    while queue:
        node = queue.pop(0)
        for child in neighbors[node]:
            if child in visited:
                continue
            steps.append(PlanStep("extend", node, child))
            for other in neighbors[child]:
                if other in visited and other != node:
                    steps.append(PlanStep("check", other, child))
            visited.add(child)
            order.append(child)
            queue.append(child)
    return MatchPlan(order=tuple(order), steps=tuple(steps))


def _endpoints(reverse: bool) -> Tuple[int, int]:
    return (1, 0) if reverse else (0, 1)


def _finish(
    gene: MetaStructureGene,
    hin: Hin,
    collected: List[List[int]],
    reverse: bool,
    sample_cap: Optional[int],
    list_cap: Optional[int],
    rng: Optional[np.random.Generator],
) -> NeighborTable:
    own, other = _endpoints(reverse)
    rows = []
    for sinks in collected:
        values = np.asarray(sinks, dtype=np.int64)
        if list_cap is not None and len(values) > list_cap:
            values = values[rng.choice(len(values), size=list_cap, replace=False)]
        rows.append(np.sort(values))
    return NeighborTable(
        gene_key=canonicalize(gene),
        from_type=gene.type_list[own],
        to_type=gene.type_list[other],
        neighbors=tuple(rows),
        sample_cap=sample_cap,
        list_cap=list_cap,
    )


def materialize(
    gene: MetaStructureGene,
    hin: Hin,
    cap: Optional[int] = DEFAULT_EXPANSION_CAP,
    seed: int = 0,
    list_cap: Optional[int] = DEFAULT_LIST_CAP,
    reverse: bool = False,
) -> NeighborTable:
    """Sampled depth-first instance matching over the plan; ``None`` caps mean unlimited.

    ``reverse`` builds the sink-side table (sink node -> source nodes) from the same instances.
    """
    if cap is not None and cap < 1:
        raise ValueError("cap must be at least 1")
    rng = np.random.default_rng(seed)
    match_plan = plan(gene, hin)
    types = gene.type_list
    own, other = _endpoints(reverse)
    collected: List[List[int]] = [[] for _ in range(hin.count(types[own]))]
    binding = [-1] * gene.n

    extensions: List[Tuple[int, int, List[int]]] = []
    for step in match_plan.steps:
        if step.kind == "extend":
            extensions.append((step.parent, step.child, []))
        else:
            extensions[-1][2].append(step.parent)

    def descend(level: int) -> None:
        if level == len(extensions):
            collected[binding[own]].append(binding[other])
            return
        parent, child, checks = extensions[level]
        candidates = hin.neighbors(types[parent], types[child], binding[parent])
        if cap is not None and len(candidates) > cap:
            candidates = rng.choice(candidates, size=cap, replace=False)
        for node in candidates.tolist():
            if all(hin.has_edge(types[bound], types[child], binding[bound], node) for bound in checks):
                binding[child] = node
                descend(level + 1)
        binding[child] = -1

    root = match_plan.order[0]
    for node in range(hin.count(types[root])):
        binding[root] = node
        descend(0)
    table = _finish(gene, hin, collected, reverse, cap, list_cap, rng)
    logger.debug("Materialized %s (%s side): %d instances", table.gene_key, "sink" if reverse else "source", table.instance_count())
    return table


def brute_force_instances(gene: MetaStructureGene, hin: Hin, reverse: bool = False) -> NeighborTable:
    """Exhaustive homomorphic enumeration in gene index order; the oracle for ``materialize``."""
    types = gene.type_list
    neighbors = _gene_neighbors(gene)
    own, other = _endpoints(reverse)
    collected: List[List[int]] = [[] for _ in range(hin.count(types[own]))]
    binding = [-1] * gene.n

    order: List[int] = []
    for start in range(gene.n):
        if start in order:
            continue
        frontier = [start]
        while frontier:
            node = frontier.pop(0)
            if node in order:
                continue
            order.append(node)
            frontier.extend(nbr for nbr in neighbors[node] if nbr not in order)

    def candidates(position: int, bound: List[int]) -> List[int]:
        if not bound:
            return list(range(hin.count(types[position])))
        first = bound[0]
        pool = hin.neighbors(types[first], types[position], binding[first]).tolist()
        return [
            node
            for node in pool
            if all(hin.has_edge(types[b], types[position], binding[b], node) for b in bound[1:])
        ]

    def assign(level: int) -> None:
        if level == len(order):
            collected[binding[own]].append(binding[other])
            return
        position = order[level]
        bound = [nbr for nbr in neighbors[position] if nbr in order[:level]]
        for node in candidates(position, bound):
            binding[position] = node
            assign(level + 1)
        binding[position] = -1

    assign(0)
    return _finish(gene, hin, collected, reverse, None, None, None)


def build_tables(
    gene: MetaStructureGene,
    hin: Hin,
    cap: Optional[int],
    list_cap: Optional[int],
    seed: int,
) -> Tuple[NeighborTable, NeighborTable]:
    """Source-side and sink-side tables for one gene, each on its own derived stream."""
    source_seed, sink_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    return (
        materialize(gene, hin, cap=cap, seed=source_seed, list_cap=list_cap, reverse=False),
        materialize(gene, hin, cap=cap, seed=sink_seed, list_cap=list_cap, reverse=True),
    )


def export_table(table: NeighborTable, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"# {table.gene_key}\n")
        for node, row in enumerate(table.neighbors):
            handle.write(f"{node}\t{','.join(str(v) for v in row.tolist())}\n")
