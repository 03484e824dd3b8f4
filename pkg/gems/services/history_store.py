"""Append-only history of real-evaluated individuals, used to train the fitness predictor."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Dict, List, Optional, Sequence, Tuple

from gems.services.gene import MetaStructureGene, canonicalize, parse
from gems.services.hin_core import Schema
from gems.services.predictor import Sample, normalize_metric


@dataclass(frozen=True)
class HistoryRecord:
    generation: int
    gene_keys: Tuple[str, ...]
    raw_metric: float


class HistoryStore:
    """Records (individual, metric) pairs; persists to JSON lines when given a path."""

    def __init__(self, path: Optional[Path] = None):
        self._path = Path(path) if path is not None else None
        self._lock = Lock()
        self._records: List[HistoryRecord] = []
        self._genes: Dict[str, MetaStructureGene] = {}

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def _persist(self) -> None:
        if self._path is None:
            return
        self._path.parent.mkdir(parents=True, exist_ok=True)
        raws = [record.raw_metric for record in self._records]
        tmp_path = self._path.with_name(self._path.name + ".tmp")
        with tmp_path.open("w", encoding="utf-8") as handle:
            for record in self._records:
                payload = {
                    "generation": record.generation,
                    "gene_keys": list(record.gene_keys),
                    "raw_metric": record.raw_metric,
                    "normalized": normalize_metric(raws, record.raw_metric),
                }
                handle.write(json.dumps(payload, sort_keys=True) + "\n")
        tmp_path.replace(self._path)

    def append(self, generation: int, genes: Sequence[MetaStructureGene], raw_metric: float) -> HistoryRecord:
        """Add one real evaluation; metrics outside [0, 1] are refused."""
        if not 0.0 <= raw_metric <= 1.0:
            raise ValueError(f"raw metric {raw_metric} lies outside [0, 1]")
        keys = tuple(canonicalize(gene) for gene in genes)
        record = HistoryRecord(generation=generation, gene_keys=keys, raw_metric=float(raw_metric))
        with self._lock:
            for key, gene in zip(keys, genes):
                self._genes.setdefault(key, gene)
            self._records.append(record)
            self._persist()
        return record

    def records(self) -> List[HistoryRecord]:
        with self._lock:
            return list(self._records)

    def raw_metrics(self) -> List[float]:
        with self._lock:
            return [record.raw_metric for record in self._records]

    def normalized_for_generation(self, generation: int) -> List[float]:
        """Normalized metrics (over the whole history) of one generation's records."""
        with self._lock:
            raws = [record.raw_metric for record in self._records]
            return [normalize_metric(raws, r.raw_metric) for r in self._records if r.generation == generation]

    def samples(self) -> List[Sample]:
        """Predictor training pairs: each record's genes with its globally normalized metric."""
        with self._lock:
            raws = [record.raw_metric for record in self._records]
            return [
                ([self._genes[key] for key in record.gene_keys], normalize_metric(raws, record.raw_metric))
                for record in self._records
            ]

    def reset(self, delete_file: bool = False) -> None:
        with self._lock:
            self._records = []
            self._genes = {}
        if delete_file and self._path is not None and self._path.exists():
            try:
                self._path.unlink()
            except OSError:
                pass

    @classmethod
    def load(cls, path: Path, schema: Schema) -> "HistoryStore":
        """Rebuild a store from its JSON-lines export; the file keeps being the persistence target."""
        store = cls(path)
        with Path(path).open("r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                payload = json.loads(line)
                keys = tuple(payload["gene_keys"])
                for key in keys:
                    store._genes.setdefault(key, parse(key, schema, check=False))
                store._records.append(
                    HistoryRecord(int(payload["generation"]), keys, float(payload["raw_metric"]))
                )
        return store


__all__ = ["HistoryRecord", "HistoryStore"]
