"""Sampled-negative ranking evaluation: HR@K, MRR@K and NDCG@K."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from gems.errors import DatasetError
from gems.services.hin_core import InteractionDataset, sample_negatives

logger = logging.getLogger(__name__)

DEFAULT_KS = (3, 10, 50)
EVAL_NEGATIVES = 100
REPORT_KEYS = ("HR@3", "MRR@10", "NDCG@10", "MRR@50", "NDCG@50")

# Maps (user, candidate item ids) to one score per candidate.
Scorer = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RankRecord:
    user: int
    item: int
    rank: int


@dataclass(frozen=True)
class Candidates:
    """A user, its held-out positive and the sampled negatives; position 0 holds the positive."""

    user: int
    items: np.ndarray

    @property
    def positive(self) -> int:
        return int(self.items[0])


@dataclass
class EvaluationReport:
    metrics: Dict[str, float]
    records: List[RankRecord] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def as_json(self) -> Dict[str, object]:
        ordered: Dict[str, object] = {key: self.metrics[key] for key in REPORT_KEYS if key in self.metrics}
        for key in sorted(self.metrics):
            ordered.setdefault(key, self.metrics[key])
        ordered["records"] = len(self.records)
        return ordered


def rank_of_positive(scores: Sequence[Tuple[int, float]], positive: int) -> int:
    """1-based rank under descending score; equal scores order by lower item id."""
    hits = [score for item, score in scores if item == positive]
    if len(hits) != 1:
        raise ValueError(f"positive item {positive} must appear exactly once among the scored items")
    mine = hits[0]
    ahead = sum(
        1 for item, score in scores if item != positive and (score > mine or (score == mine and item < positive))
    )
    return ahead + 1


def _rank_first(items: np.ndarray, scores: np.ndarray) -> int:
    positive, mine = items[0], scores[0]
    rest_items, rest_scores = items[1:], scores[1:]
    ahead = (rest_scores > mine) | ((rest_scores == mine) & (rest_items < positive))
    return int(ahead.sum()) + 1


def hr_at_k(rank: int, k: int) -> int:
    return 1 if rank <= k else 0


def mrr_at_k(rank: int, k: int) -> float:
    return 1.0 / rank if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def sample_candidates(
    dataset: InteractionDataset,
    split: str = "test",
    n_negatives: int = EVAL_NEGATIVES,
    seed: int = 0,
    exponent: float = 1.0,
) -> List[Candidates]:
    """Per record, negatives drawn on a stream keyed by (seed, user, item) so record order never matters."""
    records = dataset.split(split)
    candidates = []
    for user, item in records.tolist():
        rng = np.random.default_rng(np.random.SeedSequence([seed, user, item]))
        negatives = sample_negatives(dataset, user, n_negatives, dataset.user_items(user), rng, exponent)
        candidates.append(Candidates(user=user, items=np.asarray([item] + negatives, dtype=np.int64)))
    return candidates


def evaluate_candidates(
    scorer: Scorer,
    candidates: Sequence[Candidates],
    ks: Sequence[int] = DEFAULT_KS,
) -> EvaluationReport:
    if not candidates:
        raise DatasetError("nothing to evaluate: the split holds no records")
    records = []
    for entry in candidates:
        scores = np.asarray(scorer(entry.user, entry.items), dtype=np.float64)
        records.append(RankRecord(entry.user, entry.positive, _rank_first(entry.items, scores)))
    metrics: Dict[str, float] = {}
    for k in ks:
        metrics[f"HR@{k}"] = math.fsum(hr_at_k(r.rank, k) for r in records) / len(records)
        metrics[f"MRR@{k}"] = math.fsum(mrr_at_k(r.rank, k) for r in records) / len(records)
        metrics[f"NDCG@{k}"] = math.fsum(ndcg_at_k(r.rank, k) for r in records) / len(records)
    return EvaluationReport(metrics=metrics, records=records)


def evaluate_model(
    scorer: Scorer,
    dataset: InteractionDataset,
    split: str = "test",
    ks: Sequence[int] = DEFAULT_KS,
    seed: int = 0,
    n_negatives: int = EVAL_NEGATIVES,
    exponent: float = 1.0,
) -> EvaluationReport:
    """Rank every record's positive among frequency-sampled negatives the user never interacted with."""
    candidates = sample_candidates(dataset, split, n_negatives, seed, exponent)
    report = evaluate_candidates(scorer, candidates, ks)
    logger.debug("Evaluated %d %s records: %s", len(candidates), split, report.metrics)
    return report


def random_rank_ndcg(k: int = 10, list_size: int = EVAL_NEGATIVES + 1) -> float:
    """Expected NDCG@k when the positive's rank is uniform over the candidate list."""
    return math.fsum(1.0 / math.log2(r + 1) for r in range(1, min(k, list_size) + 1)) / list_size
