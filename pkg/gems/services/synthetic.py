"""Planted-signal graph generator used for end-to-end checks of the search."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from pydantic import ValidationError

from gems.data.models import SyntheticSpec
from gems.errors import ConfigError, DatasetError
from gems.services.adjsearch import materialize
from gems.services.gene import MetaStructureGene, parse
from gems.services.hin_core import Hin, Schema

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SyntheticGraph:
    schema: Schema
    hin: Hin
    planted: MetaStructureGene


def load_synthetic_spec(path: Path) -> SyntheticSpec:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
        return SyntheticSpec.model_validate(payload)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed synthetic spec ({exc})") from exc
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _draw_relation(
    rng: np.random.Generator, n_a: int, n_b: int, degree: float, same_type: bool, exact: bool = False
) -> np.ndarray:
    pairs: List[np.ndarray] = []
    for a in range(n_a):
        pool = n_b - 1 if same_type else n_b
        k = min(int(round(degree)) if exact else int(rng.poisson(degree)), pool)
        if k <= 0:
            continue
        picks = rng.choice(pool, size=k, replace=False)
        if same_type:
            picks = np.where(picks >= a, picks + 1, picks)
        pairs.append(np.column_stack([np.full(k, a), picks]))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    stacked = np.concatenate(pairs).astype(np.int64)
    if same_type:
        stacked = np.sort(stacked, axis=1)
    return np.unique(stacked, axis=0)


def _orient(schema: Schema, pairs: np.ndarray) -> np.ndarray:
    """(source, sink) pairs laid out in the target relation's declared (a, b) order."""
    return pairs if schema.target.a == schema.source else pairs[:, ::-1]


def generate_synthetic_hin(spec: SyntheticSpec, seed: int = 0) -> SyntheticGraph:
    """Draw context relations, seed positives, then plant target edges wherever the gene connects a pair."""
    if spec.p_signal <= spec.p_noise:
        raise DatasetError("p_signal must exceed p_noise for the planted gene to carry signal")
    try:
        schema = Schema.from_file(spec.schema_file())
    except ValidationError as exc:
        raise ConfigError(f"synthetic spec describes an invalid schema: {exc}") from exc
    planted = parse(spec.planted_gene, schema)
    counts = [spec.node_types[name] for name in schema.node_types]
    rng = np.random.default_rng(seed)

    edges: Dict[str, np.ndarray] = {}
    for rel in spec.relations:
        if rel.name == schema.target_relation:
            continue
        a, b = schema.type_index(rel.a), schema.type_index(rel.b)
        edges[rel.name] = _draw_relation(rng, counts[a], counts[b], rel.degree, a == b, rel.exact)

    n_users, n_items = counts[schema.source], counts[schema.sink]
    seeds = np.zeros((n_users, n_items), dtype=bool)
    per_user = min(spec.seed_interactions, n_items)
    for user in range(n_users):
        seeds[user, rng.choice(n_items, size=per_user, replace=False)] = True
    edges[schema.target_relation] = _orient(schema, np.argwhere(seeds))
    seed_hin = Hin.build(schema, counts, edges)

    table = materialize(planted, seed_hin, cap=None, list_cap=None)
    signal = np.zeros_like(seeds)
    for user in range(n_users):
        signal[user, np.unique(table[user])] = True
    probs = np.where(signal, spec.p_signal, spec.p_noise)
    target = seeds | (rng.random(seeds.shape) < probs)
    edges[schema.target_relation] = _orient(schema, np.argwhere(target))
    hin = Hin.build(schema, counts, edges)
    logger.info(
        "Synthetic graph: %d target edges (%d seeds, %d pairs reachable by %s)",
        int(target.sum()),
        int(seeds.sum()),
        int(signal.sum()),
        planted,
    )
    return SyntheticGraph(schema=schema, hin=hin, planted=planted)
