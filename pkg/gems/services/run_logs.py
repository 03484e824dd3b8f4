"""Utilities for per-generation run records and their JSON-lines writers."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Any, Dict, List, Optional

STAT_LABELS: Dict[str, str] = {
    "mean_fitness": "Mean Fitness",
    "max_fitness": "Max Fitness",
    "best_real_fitness": "Best Real Fitness",
    "evaluated": "Evaluated",
    "filtered": "Filtered",
    "distinct_genes": "Distinct Genes",
}


@dataclass
class IndividualEntry:
    gene_keys: List[str]
    fitness: float
    evaluated: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"gene_keys": list(self.gene_keys), "fitness": self.fitness, "evaluated": self.evaluated}


@dataclass
class GenerationLog:
    generation: int
    status: str = "running"
    individuals: List[IndividualEntry] = field(default_factory=list)
    stats: Dict[str, Any] = field(default_factory=dict)
    predictor_mse: Optional[float] = None
    predictor_spearman: Optional[float] = None
    filter_threshold: Optional[float] = None
    started: float = 0.0
    seconds: Optional[float] = None

    @property
    def mean_fitness(self) -> float:
        return float(self.stats.get("mean_fitness", 0.0))

    @property
    def max_fitness(self) -> float:
        return float(self.stats.get("max_fitness", 0.0))


def start_generation(generation: int) -> GenerationLog:
    return GenerationLog(generation=generation, started=time.perf_counter())


def complete_generation(
    log: GenerationLog,
    individuals: List[IndividualEntry],
    *,
    best_real_fitness: float,
    predictor_mse: Optional[float] = None,
    predictor_spearman: Optional[float] = None,
    filter_threshold: Optional[float] = None,
) -> GenerationLog:
    fitness = [entry.fitness for entry in individuals]
    log.status = "completed"
    log.individuals = individuals
    log.stats = {
        "mean_fitness": sum(fitness) / len(fitness) if fitness else 0.0,
        "max_fitness": max(fitness) if fitness else 0.0,
        "best_real_fitness": best_real_fitness,
        "evaluated": sum(1 for entry in individuals if entry.evaluated),
        "filtered": sum(1 for entry in individuals if not entry.evaluated),
        "distinct_genes": len({key for entry in individuals for key in entry.gene_keys}),
    }
    log.predictor_mse = predictor_mse
    log.predictor_spearman = predictor_spearman
    log.filter_threshold = filter_threshold
    log.seconds = time.perf_counter() - log.started
    return log


def _build_change_summary(
    current: Optional[Dict[str, Any]],
    previous: Optional[Dict[str, Any]],
) -> Dict[str, Any]:
    if not current:
        return {"message": "No statistics recorded for this generation.", "diff": [], "has_changes": False}

    diff_items = []
    if previous:
        for key, label in STAT_LABELS.items():
            curr = current.get(key)
            prev = previous.get(key)
            if isinstance(curr, (int, float)) and isinstance(prev, (int, float)):
                delta = curr - prev
                if delta != 0:
                    diff_items.append(
                        {"field": key, "label": label, "delta": delta, "current": curr, "previous": prev}
                    )

    if diff_items:
        preview = ", ".join(f"{item['label']}: {item['delta']:+.4g}" for item in diff_items[:3])
        if len(diff_items) > 3:
            preview += f" (+{len(diff_items) - 3} more)"
        message = f"Changes since previous generation: {preview}"
    elif previous:
        message = "No changes since previous generation."
    else:
        message = "Initial generation."
    return {"message": message, "diff": diff_items, "has_changes": bool(diff_items)}


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or value != value or value in (float("inf"), float("-inf")):
        return None
    return value


def serialize_generation(log: GenerationLog, previous: Optional[GenerationLog] = None) -> Dict[str, Any]:
    """Deterministic record of one generation; wall-clock time is kept out."""
    change_summary = _build_change_summary(log.stats, previous.stats if previous else None)
    return {
        "generation": log.generation,
        "status": log.status,
        "individuals": [entry.to_dict() for entry in log.individuals],
        "mean_fitness": log.stats.get("mean_fitness"),
        "max_fitness": log.stats.get("max_fitness"),
        "stats": log.stats,
        "predictor_mse": log.predictor_mse,
        "predictor_spearman": log.predictor_spearman,
        "filter_threshold": _finite_or_none(log.filter_threshold),
        "change_summary": change_summary["message"],
        "differences": change_summary["diff"],
        "has_changes": change_summary["has_changes"],
    }


def serialize_timing(log: GenerationLog) -> Dict[str, Any]:
    return {"generation": log.generation, "seconds": log.seconds}


class JsonLinesWriter:
    """Single append-only writer; each call lands as one complete line."""

    def __init__(self, path: Path):
        self._path = Path(path)
        self._lock = Lock()
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._path.write_text("", encoding="utf-8")

    @property
    def path(self) -> Path:
        return self._path

    def append(self, payload: Dict[str, Any]) -> None:
        line = json.dumps(payload, sort_keys=True)
        with self._lock:
            with self._path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")


def read_json_lines(path: Path) -> List[Dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
