"""
Pydantic models for schema files, run configuration and run manifests.
"""
from __future__ import annotations

import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _probability(value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    return value


class RelationSpec(BaseModel):
    """One undirected relation between two node types."""

    name: str
    a: str
    b: str

    @field_validator("name", "a", "b")
    @classmethod
    def non_empty(cls, value: str) -> str:
        cleaned = value.strip()
        if not cleaned:
            raise ValueError("names must be non-empty")
        return cleaned


class TargetSpec(BaseModel):
    source: str
    sink: str
    relation: str


class SchemaFile(BaseModel):
    """On-disk schema layout: node types, relations and the target pair."""

    node_types: List[str]
    relations: List[RelationSpec]
    target: TargetSpec

    @field_validator("node_types")
    @classmethod
    def unique_types(cls, value: List[str]) -> List[str]:
        cleaned = [name.strip() for name in value]
        if not cleaned:
            raise ValueError("node_types must contain at least one type")
        if any(not name for name in cleaned):
            raise ValueError("node type names must be non-empty")
        if len(set(cleaned)) != len(cleaned):
            raise ValueError("node type names must be unique")
        for name in cleaned:
            if any(ch in name for ch in ",[]()-\t"):
                raise ValueError(f"node type name {name!r} contains a reserved character")
        return cleaned

    @model_validator(mode="after")
    def check_references(self):
        declared = set(self.node_types)
        names = set()
        pairs = set()
        for rel in self.relations:
            for endpoint in (rel.a, rel.b):
                if endpoint not in declared:
                    raise ValueError(f"relation {rel.name!r} names undeclared type {endpoint!r}")
            if rel.name in names:
                raise ValueError(f"duplicate relation name {rel.name!r}")
            pair = frozenset((rel.a, rel.b))
            if pair in pairs:
                raise ValueError(f"type pair {rel.a}-{rel.b} has more than one relation")
            names.add(rel.name)
            pairs.add(pair)
        target = self.target
        for endpoint in (target.source, target.sink):
            if endpoint not in declared:
                raise ValueError(f"target names undeclared type {endpoint!r}")
        match = [rel for rel in self.relations if rel.name == target.relation]
        if not match:
            raise ValueError(f"target relation {target.relation!r} is not declared")
        if frozenset((match[0].a, match[0].b)) != frozenset((target.source, target.sink)):
            raise ValueError("target relation does not join the target source and sink types")
        return self


class MutationConfig(BaseModel):
    """Per-gene mutation settings."""

    p_mutate: float = 0.6
    p_complex: float = 0.5
    max_retries: int = 32
    max_nodes: int = 6
    edge_probability: float = 0.5

    @field_validator("p_mutate", "p_complex", "edge_probability")
    @classmethod
    def probabilities(cls, value: float) -> float:
        return _probability(value)

    @field_validator("max_retries")
    @classmethod
    def positive_retries(cls, value: int) -> int:
        if value < 1:
            raise ValueError("max_retries must be at least 1")
        return value

    @field_validator("max_nodes")
    @classmethod
    def node_bound(cls, value: int) -> int:
        if not 2 <= value <= 7:
            raise ValueError("max_nodes must lie in [2, 7]")
        return value


class TrainConfig(BaseModel):
    """Inner multi-view GCN training settings."""

    embedding_dim: int = 64
    margin: float = 0.3
    l2: float = 0.05
    lr: float = 0.01
    warmup_epochs: int = 2
    decay: float = 0.98
    negatives: int = 4
    eval_negatives: int = 100
    batch_size: int = 32
    epochs: int = 30
    negative_exponent: float = 1.0
    seed: int = 0

    @field_validator("margin")
    @classmethod
    def positive_margin(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("margin must be positive")
        return value

    @field_validator("l2")
    @classmethod
    def non_negative_l2(cls, value: float) -> float:
        if value < 0:
            raise ValueError("l2 weight must be non-negative")
        return value

    @field_validator("decay")
    @classmethod
    def decay_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        return value

    @field_validator("embedding_dim", "negatives", "eval_negatives", "batch_size")
    @classmethod
    def at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator("epochs", "warmup_epochs")
    @classmethod
    def non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must be non-negative")
        return value


class PredictorConfig(BaseModel):
    enabled: bool = True
    dim: int = 16
    hidden: int = 32
    epochs: int = 200
    lr: float = 0.01
    batch_size: Optional[int] = None
    filter_quantile: float = 0.25

    @field_validator("filter_quantile")
    @classmethod
    def quantile_range(cls, value: float) -> float:
        return _probability(value)

    @field_validator("batch_size")
    @classmethod
    def batch_range(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 1:
            raise ValueError("batch_size must be at least 1 (or null for full batch)")
        return value


class SearchConfig(BaseModel):
    """Everything the generational loop needs, mirrored by the JSON run config."""

    model_config = ConfigDict(extra="forbid")

    population: int = 20
    genes_per_individual: int = 5
    generations: int = 10
    p_mutate_early: float = 0.6
    p_mutate_late: float = 0.3
    mutation_switch_generation: int = 5
    p_complex: float = 0.5
    max_retries: int = 32
    max_gene_nodes: int = 6
    edge_probability: float = 0.5
    p_swap: float = 0.2
    survive_fraction: float = 0.5
    fitness_epsilon: float = 1e-6
    random_init: bool = False
    random_init_steps: int = 3
    assign_retries: int = 8
    expansion_cap: Optional[int] = 20
    list_cap: Optional[int] = 50
    frequency_window: int = 5
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 7
    split_strategy: Literal["global", "per_user"] = "global"
    seed: int = 0
    train: TrainConfig = Field(default_factory=TrainConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)

    @field_validator("p_mutate_early", "p_mutate_late", "p_complex", "p_swap", "edge_probability")
    @classmethod
    def probabilities(cls, value: float) -> float:
        return _probability(value)

    @field_validator("population")
    @classmethod
    def population_size(cls, value: int) -> int:
        if value < 2:
            raise ValueError("population must be at least 2")
        return value

    @field_validator("genes_per_individual", "generations", "max_retries", "frequency_window")
    @classmethod
    def at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator("random_init_steps")
    @classmethod
    def init_steps(cls, value: int) -> int:
        if value < 1:
            raise ValueError("random_init_steps must be at least 1")
        return value

    @field_validator("mutation_switch_generation", "assign_retries")
    @classmethod
    def non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must not be negative")
        return value

    @field_validator("max_gene_nodes")
    @classmethod
    def gene_size(cls, value: int) -> int:
        if not 2 <= value <= 7:
            raise ValueError("max_gene_nodes must lie in [2, 7]")
        return value

    @field_validator("survive_fraction")
    @classmethod
    def survive_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("survive_fraction must lie in (0, 1]")
        return value

    @field_validator("expansion_cap", "list_cap")
    @classmethod
    def cap_range(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 1:
            raise ValueError("caps must be at least 1 (or null for unlimited)")
        return value

    @field_validator("split_ratios")
    @classmethod
    def ratios_sum(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(part < 0 for part in value) or not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError("split_ratios must be non-negative and sum to 1")
        return value

    def mutation_config(self, generation: int) -> MutationConfig:
        """Two-phase schedule: the early rate until the switch generation, then the late rate."""
        p_mutate = self.p_mutate_early if generation < self.mutation_switch_generation else self.p_mutate_late
        return MutationConfig(
            p_mutate=p_mutate,
            p_complex=self.p_complex,
            max_retries=self.max_retries,
            max_nodes=self.max_gene_nodes,
            edge_probability=self.edge_probability,
        )


class SyntheticRelation(RelationSpec):
    """A relation plus the number of b-neighbors drawn per a-node.

    ``degree`` is a Poisson mean unless ``exact`` is set, in which case every
    a-node gets exactly ``round(degree)`` distinct neighbors.
    """

    degree: float = 1.0
    exact: bool = False

    @field_validator("degree")
    @classmethod
    def non_negative_degree(cls, value: float) -> float:
        if value < 0:
            raise ValueError("degree must be non-negative")
        return value


class SyntheticSpec(BaseModel):
    """Planted-graph description consumed by the synthetic generator."""

    node_types: Dict[str, int]
    relations: List[SyntheticRelation]
    target: TargetSpec
    planted_gene: str
    seed_interactions: int = 3
    p_signal: float = 0.5
    p_noise: float = 0.01

    @field_validator("p_signal", "p_noise")
    @classmethod
    def probabilities(cls, value: float) -> float:
        return _probability(value)

    @field_validator("node_types")
    @classmethod
    def positive_counts(cls, value: Dict[str, int]) -> Dict[str, int]:
        for name, count in value.items():
            if count < 1:
                raise ValueError(f"type {name!r} needs at least one node")
        return value

    def schema_file(self) -> SchemaFile:
        return SchemaFile(
            node_types=list(self.node_types),
            relations=[RelationSpec(name=rel.name, a=rel.a, b=rel.b) for rel in self.relations],
            target=self.target,
        )


class RunManifest(BaseModel):
    """Echo of a CLI invocation, written next to its outputs."""

    command: str
    config_path: Optional[str] = None
    input_paths: Dict[str, str] = Field(default_factory=dict)
    output_dir: Optional[str] = None
    seed: int
    timestamp: str
    argv: List[str] = Field(default_factory=list)
    settings: Dict[str, object] = Field(default_factory=dict)
