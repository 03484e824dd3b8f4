"""Gene mutation under the three validity rules, crossover, elimination and reproduction."""
from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence

import numpy as np

from gems.data.models import MutationConfig
from gems.services.gene import (
    ABSENT,
    FORBIDDEN,
    PRESENT,
    MetaStructureGene,
    nodes_on_paths,
    path_signature,
    validate,
)
from gems.services.hin_core import Schema

logger = logging.getLogger(__name__)

Individual = List[MetaStructureGene]


def _drop_nodes(gene: MetaStructureGene, nodes: set) -> MetaStructureGene:
    keep = [i for i in range(gene.n) if i not in nodes]
    return MetaStructureGene(
        type_list=tuple(gene.type_list[i] for i in keep),
        adj=gene.adj[np.ix_(keep, keep)],
        type_names=gene.type_names,
    )


def _append_node(
    gene: MetaStructureGene,
    schema: Schema,
    type_index: int,
    rng: np.random.Generator,
    edge_probability: float,
) -> MetaStructureGene:
    n = gene.n
    adj = np.full((n + 1, n + 1), FORBIDDEN, dtype=np.int8)
    adj[:n, :n] = gene.adj
    for i, t in enumerate(gene.type_list):
        if schema.has_relation(t, type_index):
            adj[i, n] = PRESENT if rng.random() < edge_probability else ABSENT
    return MetaStructureGene(type_list=gene.type_list + (type_index,), adj=adj, type_names=gene.type_names)


def prune_side_branches(gene: MetaStructureGene) -> MetaStructureGene:
    """Drop non-target nodes lying on no simple source-sink path, until nothing changes."""
    while True:
        on_paths = nodes_on_paths(gene)
        dangling = {node for node in range(2, gene.n) if node not in on_paths}
        if not dangling:
            return gene
        gene = _drop_nodes(gene, dangling)


def _flip_edge(gene: MetaStructureGene, rng: np.random.Generator) -> Optional[MetaStructureGene]:
    rows, cols = np.nonzero(np.triu(gene.adj != FORBIDDEN, k=1))
    if not len(rows):
        return None
    pick = int(rng.integers(len(rows)))
    adj = np.array(gene.adj)
    i, j = rows[pick], cols[pick]
    adj[i, j] = ABSENT if adj[i, j] == PRESENT else PRESENT
    return MetaStructureGene(type_list=gene.type_list, adj=adj, type_names=gene.type_names)


def _grow(
    gene: MetaStructureGene,
    schema: Schema,
    cfg: MutationConfig,
    rng: np.random.Generator,
) -> Optional[MetaStructureGene]:
    # Appended nodes keep coming while none of them reaches a source-sink path.
    if gene.n >= cfg.max_nodes:
        return None
    first_new = gene.n
    candidate = gene
    while candidate.n < cfg.max_nodes:
        type_index = int(rng.integers(len(schema.node_types)))
        candidate = _append_node(candidate, schema, type_index, rng, cfg.edge_probability)
        on_paths = nodes_on_paths(candidate)
        if any(node in on_paths for node in range(first_new, candidate.n)):
            break
    return candidate


def _shrink(gene: MetaStructureGene, rng: np.random.Generator) -> Optional[MetaStructureGene]:
    if gene.n <= 2:
        return None
    return _drop_nodes(gene, {int(rng.integers(2, gene.n))})


def _draw_kind(cfg: MutationConfig, rng: np.random.Generator) -> str:
    if rng.random() < 1.0 / 3.0:
        return "edge-flip"
    return "node-add" if rng.random() < cfg.p_complex else "node-del"


def mutate(
    gene: MetaStructureGene,
    schema: Schema,
    cfg: MutationConfig,
    rng: np.random.Generator,
    force: bool = False,
) -> MetaStructureGene:
    """Return a valid gene whose path signature differs from ``gene``, or ``gene`` itself.

    Without ``force`` the mutation only happens with probability ``cfg.p_mutate``.
    """
    if not force and rng.random() >= cfg.p_mutate:
        return gene
    signature = path_signature(gene)
    for _ in range(cfg.max_retries):
        kind = _draw_kind(cfg, rng)
        if kind == "edge-flip":
            candidate = _flip_edge(gene, rng)
        elif kind == "node-add":
            candidate = _grow(gene, schema, cfg, rng)
        else:
            candidate = _shrink(gene, rng)
        if candidate is None:
            continue
        candidate = prune_side_branches(candidate)
        if validate(candidate, schema, max_nodes=cfg.max_nodes):
            continue
        if path_signature(candidate) == signature:
            continue
        return candidate
    logger.debug("Mutation retries exhausted for %s", gene)
    return gene


def crossover(
    individuals: Sequence[Sequence[MetaStructureGene]],
    p_swap: float,
    rng: np.random.Generator,
) -> List[Individual]:
    """Per slot, with probability ``p_swap``, exchange that slot between a random pair."""
    population = [list(ind) for ind in individuals]
    if len(population) < 2:
        return population
    k = len(population[0])
    if any(len(ind) != k for ind in population):
        raise ValueError("all individuals must carry the same number of genes")
    for slot in range(k):
        if rng.random() < p_swap:
            a, b = rng.choice(len(population), size=2, replace=False).tolist()
            population[a][slot], population[b][slot] = population[b][slot], population[a][slot]
    return population


def eliminate(population: Sequence, fitness: Sequence[float], survive_fraction: float) -> List[int]:
    """Indices (ascending) of the top ceil(fraction * N) individuals; ties go to the lower index."""
    if not population:
        raise ValueError("cannot eliminate from an empty population")
    if len(population) != len(fitness):
        raise ValueError("population and fitness lengths differ")
    keep = max(1, min(len(population), math.ceil(survive_fraction * len(population) - 1e-9)))
    ranked = sorted(range(len(population)), key=lambda i: (-fitness[i], i))
    return sorted(ranked[:keep])


def reproduce(
    survivors: Sequence[Sequence[MetaStructureGene]],
    fitness: Sequence[float],
    target_size: int,
    rng: np.random.Generator,
    epsilon: float = 1e-6,
) -> List[Individual]:
    """Keep every survivor, then fill up with copies drawn proportional to shifted fitness."""
    if not survivors:
        raise ValueError("reproduce needs at least one survivor")
    if target_size < len(survivors):
        raise ValueError("target_size is smaller than the survivor count")
    population = [list(ind) for ind in survivors]
    shifted = np.asarray(fitness, dtype=np.float64)
    shifted = shifted - shifted.min() + epsilon
    missing = target_size - len(survivors)
    if missing:
        picks = rng.choice(len(survivors), size=missing, p=shifted / shifted.sum())
        population.extend(list(survivors[i]) for i in picks.tolist())
    return population
