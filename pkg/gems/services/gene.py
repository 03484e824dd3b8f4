"""Meta-structure gene encoding: schema masking, validation, canonical keys and the text grammar."""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from gems.errors import GeneGrammarError, GeneValidationError
from gems.services.hin_core import Schema

MAX_GENE_NODES = 6
FORBIDDEN, ABSENT, PRESENT = -1, 0, 1

_GENE_PATTERN = re.compile(r"\[([^\[\]()]*)\]((?:\(\d+-\d+\))*)")
_EDGE_PATTERN = re.compile(r"\((\d+)-(\d+)\)")

GeneKey = str


@dataclass(frozen=True, eq=False)
class MetaStructureGene:
    """Ordered type list plus upper-triangular adjacency with -1 marking schema-forbidden cells.

    ``type_names`` is the schema vocabulary the indices in ``type_list`` point into.
    """

    type_list: Tuple[int, ...]
    adj: np.ndarray
    type_names: Tuple[str, ...]

    def __post_init__(self):
        adj = np.array(self.adj, dtype=np.int8, copy=True)
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)
        object.__setattr__(self, "type_list", tuple(int(t) for t in self.type_list))

    @property
    def n(self) -> int:
        return len(self.type_list)

    @property
    def edges(self) -> Tuple[Tuple[int, int], ...]:
        rows, cols = np.nonzero(np.triu(self.adj == PRESENT, k=1))
        return tuple(sorted(zip(rows.tolist(), cols.tolist())))

    @property
    def types(self) -> Tuple[str, ...]:
        return tuple(self.type_names[t] for t in self.type_list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetaStructureGene):
            return NotImplemented
        return (
            self.type_list == other.type_list
            and self.type_names == other.type_names
            and np.array_equal(self.adj, other.adj)
        )

    def __hash__(self) -> int:
        return hash((self.type_list, self.adj.tobytes()))

    def __str__(self) -> str:
        return serialize(self)

    def __repr__(self) -> str:
        return f"MetaStructureGene({serialize(self)})"


def mask_matrix(schema: Schema, type_list: Sequence[int]) -> np.ndarray:
    """0 at upper cells whose type pair is a schema relation, -1 everywhere else."""
    n = len(type_list)
    mask = np.full((n, n), FORBIDDEN, dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            if schema.has_relation(type_list[i], type_list[j]):
                mask[i, j] = ABSENT
    return mask


def free_cells(schema: Schema, type_list: Sequence[int]) -> int:
    return int((mask_matrix(schema, type_list) == ABSENT).sum())


def _type_indices(schema: Schema, types: Sequence[Union[int, str]]) -> List[int]:
    indices = []
    for t in types:
        if isinstance(t, str):
            if t not in schema.node_types:
                raise GeneValidationError(f"[{','.join(map(str, types))}]", ["unknown-type"])
            indices.append(schema.node_types.index(t))
        else:
            indices.append(int(t))
    return indices


def from_edges(
    schema: Schema,
    types: Sequence[Union[int, str]],
    edges: Iterable[Tuple[int, int]],
) -> MetaStructureGene:
    """Build a gene without validating it; edges may even land on forbidden cells."""
    type_list = _type_indices(schema, types)
    adj = mask_matrix(schema, type_list)
    n = len(type_list)
    for i, j in edges:
        if not 0 <= i < j < n:
            raise GeneGrammarError(f"edge ({i}-{j}) must satisfy 0 <= i < j < {n}")
        adj[i, j] = PRESENT
    return MetaStructureGene(type_list=tuple(type_list), adj=adj, type_names=schema.node_types)


def new_direct_gene(schema: Schema) -> MetaStructureGene:
    """The direct target interaction, e.g. ``[U,B](0-1)``."""
    return from_edges(schema, [schema.source, schema.sink], [(0, 1)])


def _neighbor_lists(gene: MetaStructureGene) -> List[List[int]]:
    present = gene.adj == PRESENT
    sym = np.triu(present, k=1)
    sym = sym | sym.T
    return [np.flatnonzero(sym[i]).tolist() for i in range(gene.n)]


def simple_paths(gene: MetaStructureGene) -> List[Tuple[int, ...]]:
    """All simple node-index paths from node 0 to node 1 over present edges."""
    if gene.n < 2:
        return []
    neighbors = _neighbor_lists(gene)
    paths: List[Tuple[int, ...]] = []
    stack: List[Tuple[int, Tuple[int, ...]]] = [(0, (0,))]
    while stack:
        node, path = stack.pop()
        if node == 1:
            paths.append(path)
            continue
        for nxt in neighbors[node]:
            if nxt not in path:
                stack.append((nxt, path + (nxt,)))
    return sorted(paths)


def nodes_on_paths(gene: MetaStructureGene) -> set:
    return {node for path in simple_paths(gene) for node in path}


def path_signature(gene: MetaStructureGene) -> Tuple[str, ...]:
    """Sorted multiset of type sequences along the simple source-sink paths."""
    names = gene.types
    return tuple(sorted("-".join(names[node] for node in path) for path in simple_paths(gene)))


def validate(gene: MetaStructureGene, schema: Schema, max_nodes: int = MAX_GENE_NODES) -> List[str]:
    """Name every broken gene rule; an empty list means the gene is valid."""
    violations: List[str] = []
    n = gene.n
    if n < 2:
        return ["too-few-nodes"]
    if n > max_nodes:
        violations.append("too-many-nodes")
    if gene.type_names != schema.node_types or any(not 0 <= t < len(schema.node_types) for t in gene.type_list):
        violations.append("unknown-type")
        return violations
    if (gene.type_list[0], gene.type_list[1]) != (schema.source, schema.sink):
        violations.append("wrong-targets")

    upper = np.triu_indices(n, k=1)
    cells = gene.adj[upper]
    mask = mask_matrix(schema, gene.type_list)[upper]
    if not np.isin(cells, (FORBIDDEN, ABSENT, PRESENT)).all():
        violations.append("bad-cell-value")
    if (((mask == ABSENT) & (cells == FORBIDDEN)) | ((mask == FORBIDDEN) & (cells == ABSENT))).any():
        violations.append("mask-mismatch")
    if ((mask == FORBIDDEN) & (cells == PRESENT)).any():
        violations.append("forbidden-link")

    on_paths = nodes_on_paths(gene)
    if not on_paths:
        violations.append("targets-disconnected")
    if any(node not in on_paths for node in range(2, n)):
        violations.append("side-branch")
    return violations


def _format(types: Sequence[str], edges: Iterable[Tuple[int, int]]) -> str:
    return "[" + ",".join(types) + "]" + "".join(f"({i}-{j})" for i, j in sorted(edges))


def serialize(gene: MetaStructureGene) -> str:
    return _format(gene.types, gene.edges)


def canonicalize(gene: MetaStructureGene) -> GeneKey:
    """Minimum serialized form over every relabeling of the non-target nodes."""
    types = gene.types
    edges = gene.edges
    best: Optional[str] = None
    for perm in itertools.permutations(range(2, gene.n)):
        order = (0, 1) + perm
        position = {old: new for new, old in enumerate(order)}
        relabeled = [tuple(sorted((position[i], position[j]))) for i, j in edges]
        candidate = _format([types[old] for old in order], relabeled)
        if best is None or candidate < best:
            best = candidate
    return best if best is not None else _format(types, edges)


def parse(
    text: str,
    schema: Schema,
    check: bool = True,
    max_nodes: int = MAX_GENE_NODES,
) -> MetaStructureGene:
    """Read ``[T0,T1,...](i-j)...``; with ``check`` the gene must also pass validate."""
    stripped = text.strip()
    match = _GENE_PATTERN.fullmatch(stripped)
    if not match:
        raise GeneGrammarError(f"malformed gene string {stripped!r}")
    types = [token.strip() for token in match.group(1).split(",")]
    if any(not token for token in types):
        raise GeneGrammarError(f"empty type name in {stripped!r}")
    n = len(types)
    edges = []
    for left, right in _EDGE_PATTERN.findall(match.group(2)):
        i, j = int(left), int(right)
        if i >= j:
            raise GeneGrammarError(f"edge ({i}-{j}) in {stripped!r} must have i < j")
        if j >= n:
            raise GeneGrammarError(f"edge ({i}-{j}) in {stripped!r} references a node beyond {n - 1}")
        if (i, j) in edges:
            raise GeneGrammarError(f"edge ({i}-{j}) repeated in {stripped!r}")
        edges.append((i, j))
    unknown = [t for t in types if t not in schema.node_types]
    if unknown:
        raise GeneValidationError(stripped, ["unknown-type"])
    gene = from_edges(schema, types, edges)
    if check:
        violations = validate(gene, schema, max_nodes=max_nodes)
        if violations:
            raise GeneValidationError(stripped, violations)
    return gene


def search_space_size(m: int, n: int, k: int) -> int:
    """C(m^n * 2^(n*n), k), the unconstrained number of k-gene individuals."""
    if min(m, n, k) < 1:
        raise ValueError("m, n and k must all be at least 1")
    return math.comb(m ** n * 2 ** (n * n), k)


def reduced_search_space_size(schema: Schema, n: int, k: int) -> int:
    """Individuals left once targets are pinned and forbidden cells are masked out."""
    if n < 2 or k < 1:
        raise ValueError("n must be at least 2 and k at least 1")
    total = 0
    for rest in itertools.product(range(len(schema.node_types)), repeat=n - 2):
        total += 2 ** free_cells(schema, (schema.source, schema.sink) + rest)
    return math.comb(total, k)


def load_genes(path, schema: Schema, max_nodes: int = MAX_GENE_NODES) -> List[MetaStructureGene]:
    """Read one gene per line; blank and ``#`` lines are skipped and text after a tab is ignored."""
    genes = []
    with open(path, "r", encoding="utf-8") as handle:
        for raw in handle:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            genes.append(parse(line.split("\t")[0], schema, check=True, max_nodes=max_nodes))
    return genes
