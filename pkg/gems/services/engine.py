"""
Genetic meta-structure search.

Each generation mutates the gene pool, crosses individuals over, de-duplicates
genes inside an individual, lets the fitness predictor skip unpromising
individuals, trains a multi-view GCN for the rest, keeps the fittest and
refills the population. The predictor is retrained from the growing history
between generations.
"""
from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from gems.data.models import MutationConfig, SearchConfig
from gems.errors import GemsError, SearchAbort
from gems.services.adjsearch import build_tables
from gems.services.evolve_ops import crossover, eliminate, mutate, reproduce
from gems.services.gene import MetaStructureGene, canonicalize, new_direct_gene, parse
from gems.services.hin_core import Hin, InteractionDataset, Schema
from gems.services.history_store import HistoryStore
from gems.services.mvgcn import TrainResult, Views, build_views, init_params, save_checkpoint, train
from gems.services.predictor import (
    denormalize_metric,
    filter_threshold,
    init_predictor,
    normalize_metric,
    predict,
    spearman,
    train_predictor,
)
from gems.services.run_logs import (
    GenerationLog,
    IndividualEntry,
    JsonLinesWriter,
    complete_generation,
    serialize_generation,
    serialize_timing,
    start_generation,
)

logger = logging.getLogger(__name__)

ROLES = {"mutate": 0, "crossover": 1, "assign": 2, "evaluate": 3, "reproduce": 4, "predictor": 5, "init": 6}


def stream(master_seed: int, generation: int, index: int, role: str) -> np.random.Generator:
    """Independent generator for one (generation, individual, role) slot of a run."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(generation, index, ROLES[role])))


def stream_seed(master_seed: int, generation: int, index: int, role: str) -> int:
    sequence = np.random.SeedSequence(master_seed, spawn_key=(generation, index, ROLES[role]))
    return int(sequence.generate_state(1)[0])


@dataclass
class Individual:
    genes: List[MetaStructureGene]
    fitness: float = 0.0
    evaluated: bool = False

    @property
    def keys(self) -> List[str]:
        return [canonicalize(gene) for gene in self.genes]


@dataclass
class SearchResult:
    logs: List[GenerationLog]
    population: List[Individual]
    frequency: pd.DataFrame
    history: HistoryStore
    best: Optional[Individual] = None
    best_seed: Optional[int] = None
    train_hin: Optional[Hin] = field(default=None, repr=False)


def _gene_table_seed(table_entropy: int, key: str) -> int:
    # Equal genes get equal tables, wherever they sit in the individual.
    sequence = np.random.SeedSequence([table_entropy, zlib.crc32(key.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def _seed_parts(seed: int) -> Tuple[int, int, int]:
    table, init, training = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(part.generate_state(1)[0]) for part in (table, init, training))


def individual_views(
    genes: Sequence[MetaStructureGene],
    train_hin: Hin,
    expansion_cap: Optional[int],
    list_cap: Optional[int],
    seed: int,
) -> Views:
    """Neighbor tables for every gene on the train-only graph, turned into view operators."""
    table_entropy, _, _ = _seed_parts(seed)
    schema = train_hin.schema
    tables = []
    for gene in genes:
        # Tables are built on the canonical labeling so relabeled copies sample identically.
        key = canonicalize(gene)
        canonical = parse(key, schema, check=False)
        tables.append(build_tables(canonical, train_hin, expansion_cap, list_cap, _gene_table_seed(table_entropy, key)))
    return build_views(tables, train_hin.count(schema.source), train_hin.count(schema.sink))


def train_individual(
    genes: Sequence[MetaStructureGene],
    train_hin: Hin,
    dataset: InteractionDataset,
    cfg: SearchConfig,
    seed: int,
) -> Tuple[TrainResult, Views]:
    """Materialize tables, train a fresh model and return it with its views; pure in its arguments."""
    _, init_seed, train_seed = _seed_parts(seed)
    views = individual_views(genes, train_hin, cfg.expansion_cap, cfg.list_cap, seed)
    schema = train_hin.schema
    params = init_params(
        train_hin.count(schema.source),
        train_hin.count(schema.sink),
        cfg.train.embedding_dim,
        views.gene_keys,
        seed=init_seed,
    )
    return train(params, dataset, views, cfg.train, seed=train_seed), views


def evaluate_individual(
    genes: Sequence[MetaStructureGene],
    train_hin: Hin,
    dataset: InteractionDataset,
    cfg: SearchConfig,
    seed: int,
) -> float:
    """Best validation NDCG@10 of a freshly trained model over ``genes``."""
    result, _ = train_individual(genes, train_hin, dataset, cfg, seed)
    return result.best_ndcg


@dataclass(frozen=True, eq=False)
class _EvaluationContext:
    train_hin: Hin
    dataset: InteractionDataset
    cfg: SearchConfig


_WORKER_CONTEXT: Optional[_EvaluationContext] = None


def _init_worker(context: _EvaluationContext) -> None:
    global _WORKER_CONTEXT
    _WORKER_CONTEXT = context


def _evaluate_job(genes: List[MetaStructureGene], seed: int) -> float:
    context = _WORKER_CONTEXT
    return evaluate_individual(genes, context.train_hin, context.dataset, context.cfg, seed)


class _Evaluator:
    """Runs evaluations in-process or on a worker pool; results are keyed by individual index."""

    def __init__(self, context: _EvaluationContext, workers: int):
        self._context = context
        self._pool: Optional[ProcessPoolExecutor] = None
        if workers > 1:
            self._pool = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(context,))

    def run(self, generation: int, jobs: Dict[int, Tuple[List[MetaStructureGene], int]]) -> Dict[int, float]:
        results: Dict[int, float] = {}
        if self._pool is None:
            for index, (genes, seed) in sorted(jobs.items()):
                try:
                    results[index] = evaluate_individual(
                        genes, self._context.train_hin, self._context.dataset, self._context.cfg, seed
                    )
                except GemsError as exc:
                    raise SearchAbort(generation, index, exc) from exc
            return results
        futures = {index: self._pool.submit(_evaluate_job, genes, seed) for index, (genes, seed) in jobs.items()}
        for index in sorted(futures):
            try:
                results[index] = futures[index].result()
            except GemsError as exc:
                raise SearchAbort(generation, index, exc) from exc
        return results

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True, cancel_futures=True)


def _assign(
    genes: List[MetaStructureGene],
    schema: Schema,
    cfg: MutationConfig,
    retries: int,
    rng: np.random.Generator,
) -> List[MetaStructureGene]:
    """Re-mutate genes that repeat an earlier gene of the same individual."""
    seen = set()
    assigned = []
    for gene in genes:
        key = canonicalize(gene)
        attempts = 0
        while key in seen and attempts < retries:
            gene = mutate(gene, schema, cfg, rng, force=True)
            key = canonicalize(gene)
            attempts += 1
        if key in seen:
            logger.warning("Keeping duplicate gene %s after %d re-mutations", key, retries)
        seen.add(key)
        assigned.append(gene)
    return assigned


def _initial_population(cfg: SearchConfig, schema: Schema) -> List[List[MetaStructureGene]]:
    direct = new_direct_gene(schema)
    population = []
    mutation_cfg = cfg.mutation_config(0)
    for index in range(cfg.population):
        genes = [direct] * cfg.genes_per_individual
        if cfg.random_init:
            rng = stream(cfg.seed, 0, index, "init")
            randomized = []
            for gene in genes:
                for _ in range(cfg.random_init_steps):
                    gene = mutate(gene, schema, mutation_cfg, rng, force=True)
                randomized.append(gene)
            genes = randomized
        population.append(genes)
    return population


def gene_frequency(logs: Sequence[GenerationLog], window: int = 5) -> pd.DataFrame:
    """Canonical gene counts over the last ``window`` generations, most frequent first."""
    keys = [key for log in logs[-window:] for entry in log.individuals for key in entry.gene_keys]
    counts = pd.Series(keys, dtype=object).value_counts()
    frame = counts.rename_axis("gene_key").reset_index(name="count")
    frame = frame.sort_values(["count", "gene_key"], ascending=[False, True], kind="mergesort")
    return frame.reset_index(drop=True)


def write_frequency(frame: pd.DataFrame, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for key, count in zip(frame["gene_key"], frame["count"]):
            handle.write(f"{key}\t{int(count)}\n")


def run_search(
    cfg: SearchConfig,
    schema: Schema,
    hin: Hin,
    dataset: InteractionDataset,
    workers: int = 1,
    out_dir: Optional[Path] = None,
) -> SearchResult:
    """The generational loop; with ``out_dir`` every generation is appended to the run records."""
    train_hin = hin.restrict_target(dataset.split("train"))
    evaluator = _Evaluator(_EvaluationContext(train_hin, dataset, cfg), workers)
    out_dir = Path(out_dir) if out_dir is not None else None
    history = HistoryStore(out_dir / "history.jsonl" if out_dir else None)
    log_writer = JsonLinesWriter(out_dir / "generations.jsonl") if out_dir else None
    timing_writer = JsonLinesWriter(out_dir / "timings.jsonl") if out_dir else None

    predictor_params = init_predictor(
        len(schema.node_types), cfg.predictor.dim, cfg.predictor.hidden, seed=stream_seed(cfg.seed, 0, 0, "predictor")
    )
    predictor_ready = False
    previous_normalized: List[float] = []
    best_real = float("-inf")
    logs: List[GenerationLog] = []
    population = _initial_population(cfg, schema)
    evaluated: List[Individual] = []
    try:
        for generation in range(cfg.generations):
            log = start_generation(generation)
            mutation_cfg = cfg.mutation_config(generation)
            genomes = []
            for index, genes in enumerate(population):
                rng = stream(cfg.seed, generation, index, "mutate")
                genomes.append([mutate(gene, schema, mutation_cfg, rng) for gene in genes])
            genomes = crossover(genomes, cfg.p_swap, stream(cfg.seed, generation, 0, "crossover"))
            genomes = [
                _assign(genes, schema, mutation_cfg, cfg.assign_retries, stream(cfg.seed, generation, index, "assign"))
                for index, genes in enumerate(genomes)
            ]

            threshold = float("-inf")
            predictions: Dict[int, float] = {}
            filtered: set = set()
            if cfg.predictor.enabled and predictor_ready:
                threshold = filter_threshold(previous_normalized, cfg.predictor.filter_quantile)
                predictions = {index: predict(predictor_params, genes) for index, genes in enumerate(genomes)}
                below = sorted((score, index) for index, score in predictions.items() if score < threshold)
                limit = int(math.floor(cfg.predictor.filter_quantile * len(genomes)))
                filtered = {index for _, index in below[:limit]}

            jobs = {
                index: (genes, stream_seed(cfg.seed, generation, index, "evaluate"))
                for index, genes in enumerate(genomes)
                if index not in filtered
            }
            scores = evaluator.run(generation, jobs)
            prior_raws = history.raw_metrics()
            evaluated = []
            for index, genes in enumerate(genomes):
                if index in filtered:
                    fitness = denormalize_metric(prior_raws, predictions[index])
                    evaluated.append(Individual(genes, fitness, evaluated=False))
                else:
                    evaluated.append(Individual(genes, scores[index], evaluated=True))
            for index in sorted(scores):
                history.append(generation, genomes[index], scores[index])

            held_out = None
            real = sorted(scores)
            if predictions and len(real) >= 2:
                raws = history.raw_metrics()
                held_out = spearman(
                    [predictions[index] for index in real],
                    [normalize_metric(raws, scores[index]) for index in real],
                )
            if real:
                best_real = max(best_real, max(scores[index] for index in real))

            fitness = [individual.fitness for individual in evaluated]
            survivors = eliminate(evaluated, fitness, cfg.survive_fraction)
            population = reproduce(
                [evaluated[index].genes for index in survivors],
                [fitness[index] for index in survivors],
                cfg.population,
                stream(cfg.seed, generation, 0, "reproduce"),
                cfg.fitness_epsilon,
            )

            mse = None
            if cfg.predictor.enabled and len(history):
                fit = train_predictor(
                    predictor_params,
                    history.samples(),
                    cfg.predictor.epochs,
                    cfg.predictor.lr,
                    seed=stream_seed(cfg.seed, generation, 1, "predictor"),
                    batch_size=cfg.predictor.batch_size,
                )
                predictor_params = fit.params
                predictor_ready = True
                mse = fit.mse
            previous_normalized = history.normalized_for_generation(generation)

            complete_generation(
                log,
                [IndividualEntry(ind.keys, ind.fitness, ind.evaluated) for ind in evaluated],
                best_real_fitness=best_real,
                predictor_mse=mse,
                predictor_spearman=held_out,
                filter_threshold=threshold if predictions else None,
            )
            if log_writer is not None:
                log_writer.append(serialize_generation(log, logs[-1] if logs else None))
                timing_writer.append(serialize_timing(log))
            logs.append(log)
            logger.info(
                "Generation %d: mean=%.4f max=%.4f best=%.4f filtered=%d (%.1fs)",
                generation,
                log.mean_fitness,
                log.max_fitness,
                best_real,
                len(filtered),
                log.seconds,
            )
    finally:
        evaluator.close()

    best = None
    best_seed = None
    real_final = [(ind.fitness, -index) for index, ind in enumerate(evaluated) if ind.evaluated]
    if real_final:
        _, neg_index = max(real_final)
        best = evaluated[-neg_index]
        best_seed = stream_seed(cfg.seed, cfg.generations - 1, -neg_index, "evaluate")
    return SearchResult(
        logs=logs,
        population=evaluated,
        frequency=gene_frequency(logs, cfg.frequency_window),
        history=history,
        best=best,
        best_seed=best_seed,
        train_hin=train_hin,
    )


def save_best_checkpoint(
    result: SearchResult,
    dataset: InteractionDataset,
    cfg: SearchConfig,
    path: Path,
) -> Optional[TrainResult]:
    """Retrain the best final individual with its own evaluation seed and store the model."""
    if result.best is None or result.best_seed is None:
        logger.warning("No real-evaluated individual in the final generation; skipping checkpoint")
        return None
    trained, _ = train_individual(result.best.genes, result.train_hin, dataset, cfg, result.best_seed)
    save_checkpoint(trained.params, path, checkpoint_meta(cfg, result.best_seed, trained.best_ndcg))
    return trained


def checkpoint_meta(cfg: SearchConfig, seed: int, val_ndcg: float) -> Dict[str, object]:
    return {
        "seed": seed,
        "val_ndcg": val_ndcg,
        "expansion_cap": cfg.expansion_cap,
        "list_cap": cfg.list_cap,
        "split_ratios": list(cfg.split_ratios),
        "split_seed": cfg.split_seed,
        "split_strategy": cfg.split_strategy,
        "negative_exponent": cfg.train.negative_exponent,
        "eval_negatives": cfg.train.eval_negatives,
    }
