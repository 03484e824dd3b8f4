"""Typed heterogeneous graph storage, dataset ingestion, splitting and negative sampling."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import ValidationError

from gems.data.models import SchemaFile
from gems.errors import DatasetError, EdgeFileError, SchemaError

logger = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}
MIN_TARGET_EDGES = 10


@dataclass(frozen=True)
class Relation:
    """Undirected relation between node types ``a`` and ``b`` (type indices)."""

    name: str
    a: int
    b: int


@dataclass(frozen=True)
class Schema:
    node_types: Tuple[str, ...]
    relations: Tuple[Relation, ...]
    source: int
    sink: int
    target_relation: str
    _by_pair: Dict[FrozenSet[int], Relation] = field(init=False, repr=False, compare=False)
    _by_name: Dict[str, Relation] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_pair", {frozenset((rel.a, rel.b)): rel for rel in self.relations})
        object.__setattr__(self, "_by_name", {rel.name: rel for rel in self.relations})

    @classmethod
    def from_file(cls, payload: SchemaFile) -> "Schema":
        index = {name: i for i, name in enumerate(payload.node_types)}
        relations = tuple(Relation(rel.name, index[rel.a], index[rel.b]) for rel in payload.relations)
        return cls(
            node_types=tuple(payload.node_types),
            relations=relations,
            source=index[payload.target.source],
            sink=index[payload.target.sink],
            target_relation=payload.target.relation,
        )

    def to_file(self) -> SchemaFile:
        return SchemaFile.model_validate(
            {
                "node_types": list(self.node_types),
                "relations": [
                    {"name": rel.name, "a": self.node_types[rel.a], "b": self.node_types[rel.b]}
                    for rel in self.relations
                ],
                "target": {
                    "source": self.node_types[self.source],
                    "sink": self.node_types[self.sink],
                    "relation": self.target_relation,
                },
            }
        )

    def type_index(self, name: str) -> int:
        try:
            return self.node_types.index(name)
        except ValueError:
            raise SchemaError(f"unknown node type {name!r}") from None

    def relation_between(self, a: int, b: int) -> Optional[Relation]:
        return self._by_pair.get(frozenset((a, b)))

    def has_relation(self, a: int, b: int) -> bool:
        return frozenset((a, b)) in self._by_pair

    def relation_named(self, name: str) -> Optional[Relation]:
        return self._by_name.get(name)

    @property
    def target(self) -> Relation:
        return self._by_name[self.target_relation]


@dataclass(frozen=True)
class Adjacency:
    """CSR neighbor index for one (from-type, to-type) direction."""

    indptr: np.ndarray
    indices: np.ndarray

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)


def _csr(src: np.ndarray, dst: np.ndarray, n_rows: int) -> Adjacency:
    order = np.lexsort((dst, src))
    counts = np.bincount(src, minlength=n_rows) if len(src) else np.zeros(n_rows, dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Adjacency(indptr=indptr, indices=dst[order].astype(np.int64))


@dataclass(frozen=True, eq=False)
class Hin:
    """The typed multigraph: per-relation edge lists plus symmetric neighbor indexes."""

    schema: Schema
    node_counts: Tuple[int, ...]
    edges: Dict[str, np.ndarray]
    adjacency: Dict[Tuple[int, int], Adjacency] = field(init=False, repr=False)
    _edge_keys: Dict[Tuple[int, int], Set[Tuple[int, int]]] = field(init=False, repr=False)

    def __post_init__(self):
        adjacency: Dict[Tuple[int, int], Adjacency] = {}
        edge_keys: Dict[Tuple[int, int], Set[Tuple[int, int]]] = {}
        for rel in self.schema.relations:
            pairs = self.edges.get(rel.name, np.zeros((0, 2), dtype=np.int64))
            a_ids, b_ids = pairs[:, 0], pairs[:, 1]
            if rel.a == rel.b:
                src = np.concatenate([a_ids, b_ids])
                dst = np.concatenate([b_ids, a_ids])
                adjacency[(rel.a, rel.a)] = _csr(src, dst, self.node_counts[rel.a])
                edge_keys[(rel.a, rel.a)] = set(zip(src.tolist(), dst.tolist()))
            else:
                adjacency[(rel.a, rel.b)] = _csr(a_ids, b_ids, self.node_counts[rel.a])
                adjacency[(rel.b, rel.a)] = _csr(b_ids, a_ids, self.node_counts[rel.b])
                forward = set(zip(a_ids.tolist(), b_ids.tolist()))
                edge_keys[(rel.a, rel.b)] = forward
                edge_keys[(rel.b, rel.a)] = {(y, x) for x, y in forward}
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "_edge_keys", edge_keys)

    @classmethod
    def build(cls, schema: Schema, node_counts: Sequence[int], edges: Dict[str, Iterable[Tuple[int, int]]]) -> "Hin":
        """Validate ids, normalize same-type pairs and drop duplicates."""
        counts = tuple(int(c) for c in node_counts)
        normalized: Dict[str, np.ndarray] = {}
        for rel in schema.relations:
            raw = np.asarray(list(edges.get(rel.name, [])), dtype=np.int64).reshape(-1, 2)
            if len(raw) and (raw.min() < 0 or raw[:, 0].max() >= counts[rel.a] or raw[:, 1].max() >= counts[rel.b]):
                raise EdgeFileError(f"relation {rel.name!r} references a node id outside the declared counts")
            if rel.a == rel.b and len(raw):
                loops = raw[:, 0] == raw[:, 1]
                if loops.any():
                    logger.warning("Dropping %d self-loop(s) in relation %s", int(loops.sum()), rel.name)
                    raw = raw[~loops]
                raw = np.sort(raw, axis=1)
            unique = np.unique(raw, axis=0) if len(raw) else raw
            if len(unique) != len(raw):
                logger.warning("Deduplicated %d repeated edge(s) in relation %s", len(raw) - len(unique), rel.name)
            normalized[rel.name] = unique
        return cls(schema=schema, node_counts=counts, edges=normalized)

    def count(self, type_index: int) -> int:
        return self.node_counts[type_index]

    def neighbors(self, from_type: int, to_type: int, node: int) -> np.ndarray:
        adj = self.adjacency.get((from_type, to_type))
        if adj is None:
            return np.zeros(0, dtype=np.int64)
        return adj.neighbors(node)

    def has_edge(self, from_type: int, to_type: int, x: int, y: int) -> bool:
        keys = self._edge_keys.get((from_type, to_type))
        return keys is not None and (x, y) in keys

    def degree(self, type_index: int, relation: str) -> np.ndarray:
        """Per-node degree of ``type_index`` nodes within one relation."""
        rel = self.schema.relation_named(relation)
        if rel is None or type_index not in (rel.a, rel.b):
            return np.zeros(self.node_counts[type_index], dtype=np.int64)
        other = rel.b if type_index == rel.a else rel.a
        return self.adjacency[(type_index, other)].degree()

    def type_degree(self, type_index: int) -> int:
        """Total edge endpoints carried by a node type across all its relations."""
        total = 0
        for rel in self.schema.relations:
            if type_index in (rel.a, rel.b):
                total += int(self.degree(type_index, rel.name).sum())
        return total

    def target_pairs(self) -> np.ndarray:
        """Target-relation edges oriented as (source id, sink id)."""
        rel = self.schema.target
        pairs = self.edges[rel.name]
        if rel.a != self.schema.source:
            pairs = pairs[:, ::-1]
        return np.ascontiguousarray(pairs)

    def restrict_target(self, pairs: np.ndarray) -> "Hin":
        """Return a graph whose target-relation edges are exactly ``pairs`` (source, sink)."""
        rel = self.schema.target
        oriented = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if rel.a != self.schema.source:
            oriented = oriented[:, ::-1]
        edges = dict(self.edges)
        edges[rel.name] = oriented
        return Hin.build(self.schema, self.node_counts, edges)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Positive (user, item) records with split tags and train item frequencies."""

    positives: np.ndarray
    split_tags: np.ndarray
    item_frequency: np.ndarray
    n_users: int
    n_items: int
    _user_items: Dict[int, FrozenSet[int]] = field(init=False, repr=False)
    _train_items: Dict[int, FrozenSet[int]] = field(init=False, repr=False)

    def __post_init__(self):
        everything: Dict[int, Set[int]] = {}
        train: Dict[int, Set[int]] = {}
        for (user, item), tag in zip(self.positives.tolist(), self.split_tags.tolist()):
            everything.setdefault(user, set()).add(item)
            if tag == TRAIN:
                train.setdefault(user, set()).add(item)
        object.__setattr__(self, "_user_items", {u: frozenset(s) for u, s in everything.items()})
        object.__setattr__(self, "_train_items", {u: frozenset(s) for u, s in train.items()})

    def split(self, name: str) -> np.ndarray:
        return self.positives[self.split_tags == SPLIT_NAMES[name]]

    def user_items(self, user: int) -> FrozenSet[int]:
        """Every known positive of ``user`` across train, val and test."""
        return self._user_items.get(user, frozenset())

    def train_items(self, user: int) -> FrozenSet[int]:
        return self._train_items.get(user, frozenset())


def load_schema(path: Path) -> Schema:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed schema file ({exc})") from exc
    try:
        return Schema.from_file(SchemaFile.model_validate(payload))
    except ValidationError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def write_schema(schema: Schema, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(schema.to_file().model_dump(), handle, indent=2)
        handle.write("\n")


def _resolve_relation(schema: Schema, token: str, line_no: int) -> Tuple[object, bool]:
    """Find the relation a line names; the flag says whether its ids arrive as (b, a)."""
    rel = schema.relation_named(token)
    if rel is not None:
        return rel, False
    left, sep, right = token.partition("-")
    if sep and left in schema.node_types and right in schema.node_types:
        a, b = schema.node_types.index(left), schema.node_types.index(right)
        rel = schema.relation_between(a, b)
        if rel is not None:
            return rel, (rel.a, rel.b) != (a, b)
    raise EdgeFileError(f"line {line_no}: unknown relation {token!r}")


def load_hin(schema: Schema, edges_path: Path) -> Hin:
    """Read ``relation<TAB>src<TAB>dst`` lines with optional ``#count <type> <n>`` headers."""
    edges_path = Path(edges_path)
    declared: Dict[int, int] = {}
    collected: Dict[str, List[Tuple[int, int]]] = {rel.name: [] for rel in schema.relations}
    with edges_path.open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 3 and parts[0] == "count":
                    if parts[1] not in schema.node_types:
                        raise EdgeFileError(f"line {line_no}: count header for unknown type {parts[1]!r}")
                    try:
                        declared[schema.node_types.index(parts[1])] = int(parts[2])
                    except ValueError:
                        raise EdgeFileError(f"line {line_no}: bad count {parts[2]!r}") from None
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise EdgeFileError(f"line {line_no}: expected relation<TAB>src<TAB>dst")
            rel, swapped = _resolve_relation(schema, fields[0].strip(), line_no)
            try:
                src, dst = int(fields[1]), int(fields[2])
            except ValueError:
                raise EdgeFileError(f"line {line_no}: node ids must be integers") from None
            if src < 0 or dst < 0:
                raise EdgeFileError(f"line {line_no}: node ids must be non-negative")
            if swapped:
                src, dst = dst, src
            for type_index, node in ((rel.a, src), (rel.b, dst)):
                if type_index in declared and node >= declared[type_index]:
                    raise EdgeFileError(
                        f"line {line_no}: id {node} overflows declared count "
                        f"{declared[type_index]} of type {schema.node_types[type_index]}"
                    )
            collected[rel.name].append((src, dst))

    counts = []
    for type_index in range(len(schema.node_types)):
        if type_index in declared:
            counts.append(declared[type_index])
            continue
        seen = [-1]
        for rel in schema.relations:
            pairs = collected[rel.name]
            if not pairs:
                continue
            if rel.a == type_index:
                seen.append(max(p[0] for p in pairs))
            if rel.b == type_index:
                seen.append(max(p[1] for p in pairs))
        counts.append(max(seen) + 1)
    hin = Hin.build(schema, counts, collected)
    logger.info(
        "Loaded %s: %s",
        edges_path,
        ", ".join(f"{name}={len(pairs)}" for name, pairs in hin.edges.items()),
    )
    return hin


def write_hin(hin: Hin, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for name, count in zip(hin.schema.node_types, hin.node_counts):
            handle.write(f"#count {name} {count}\n")
        for rel in hin.schema.relations:
            for src, dst in hin.edges[rel.name].tolist():
                handle.write(f"{rel.name}\t{src}\t{dst}\n")


def _bucket_sizes(total: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    n_train = int(round(total * ratios[0]))
    n_val = min(int(round(total * ratios[1])), total - n_train)
    return n_train, n_val, total - n_train - n_val


def split_dataset(
    hin: Hin,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 7,
    strategy: str = "global",
) -> InteractionDataset:
    """Tag every target edge train/val/test by a seeded permutation."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0, atol=1e-9):
        raise DatasetError("split ratios must be three non-negative fractions summing to 1")
    positives = hin.target_pairs()
    total = len(positives)
    if total < MIN_TARGET_EDGES:
        raise DatasetError(f"only {total} target edges; at least {MIN_TARGET_EDGES} are needed to split")

    rng = np.random.default_rng(seed)
    tags = np.empty(total, dtype=np.int8)
    if strategy == "global":
        groups = [np.arange(total)]
    elif strategy == "per_user":
        groups = [np.flatnonzero(positives[:, 0] == user) for user in np.unique(positives[:, 0])]
    else:
        raise DatasetError(f"unknown split strategy {strategy!r}")
    for members in groups:
        order = members[rng.permutation(len(members))]
        n_train, n_val, _ = _bucket_sizes(len(members), ratios)
        tags[order[:n_train]] = TRAIN
        tags[order[n_train:n_train + n_val]] = VAL
        tags[order[n_train + n_val:]] = TEST

    n_items = hin.count(hin.schema.sink)
    frequency = np.bincount(positives[tags == TRAIN, 1], minlength=n_items).astype(np.int64)
    return InteractionDataset(
        positives=positives,
        split_tags=tags,
        item_frequency=frequency,
        n_users=hin.count(hin.schema.source),
        n_items=n_items,
    )


def _sampling_weights(ds: InteractionDataset, exponent: float) -> np.ndarray:
    weights = ds.item_frequency.astype(np.float64)
    if exponent != 1.0:
        weights = np.where(weights > 0, weights ** exponent, 0.0)
    return weights


def sample_negatives(
    ds: InteractionDataset,
    user: int,
    k: int,
    exclude: Iterable[int],
    rng: np.random.Generator,
    exponent: float = 1.0,
) -> List[int]:
    """Draw ``k`` items with replacement, proportional to train frequency, never from ``exclude``."""
    if k < 1:
        raise DatasetError("k must be at least 1")
    allowed = np.ones(ds.n_items, dtype=bool)
    excluded = np.fromiter((i for i in exclude if 0 <= i < ds.n_items), dtype=np.int64)
    allowed[excluded] = False
    if not allowed.any():
        raise DatasetError(f"user {user}: every item is excluded, nothing to sample")
    weights = np.where(allowed, _sampling_weights(ds, exponent), 0.0)
    if weights.sum() <= 0:
        weights = allowed.astype(np.float64)
    return rng.choice(ds.n_items, size=k, p=weights / weights.sum()).tolist()


def sample_negatives_batch(
    ds: InteractionDataset,
    users: np.ndarray,
    k: int,
    rng: np.random.Generator,
    exclude: Sequence[FrozenSet[int]],
    exponent: float = 1.0,
    max_rounds: int = 50,
) -> np.ndarray:
    """Vectorized rejection sampler: one row of ``k`` negatives per user."""
    weights = _sampling_weights(ds, exponent)
    if weights.sum() <= 0:
        raise DatasetError("item frequencies are all zero; no train positives to sample from")
    probs = weights / weights.sum()
    draws = rng.choice(ds.n_items, size=(len(users), k), p=probs)
    pending = [(row, col) for row in range(len(users)) for col in range(k) if draws[row, col] in exclude[row]]
    for _ in range(max_rounds):
        if not pending:
            break
        redraw = rng.choice(ds.n_items, size=len(pending), p=probs)
        still = []
        for (row, col), item in zip(pending, redraw.tolist()):
            if item in exclude[row]:
                still.append((row, col))
            else:
                draws[row, col] = item
        pending = still
    for row in sorted({row for row, _ in pending}):
        cols = [col for r, col in pending if r == row]
        draws[row, cols] = sample_negatives(ds, int(users[row]), len(cols), exclude[row], rng, exponent)
    return draws
