"""Tests for the generational search loop."""
import shutil
import tempfile
import unittest
import os
import sys
from unittest import mock
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from pathlib import Path

import numpy as np

from gems.data.models import PredictorConfig
from gems.errors import DatasetError, SearchAbort
from gems.services.engine import (
    evaluate_individual,
    gene_frequency,
    individual_views,
    run_search,
    stream,
    write_frequency,
    _initial_population,
)
from gems.services.gene import parse, validate
from gems.services.hin_core import Hin, split_dataset
from gems.services.run_logs import IndividualEntry, complete_generation, read_json_lines, start_generation
from tests.helpers import planted_graph, tiny_search_config


class TestStreams(unittest.TestCase):

    def test_streams_are_reproducible_and_distinct(self):
        first = stream(5, 1, 2, "mutate").random(4)
        again = stream(5, 1, 2, "mutate").random(4)
        other_role = stream(5, 1, 2, "crossover").random(4)
        other_index = stream(5, 1, 3, "mutate").random(4)
        self.assertTrue(np.array_equal(first, again))
        self.assertFalse(np.array_equal(first, other_role))
        self.assertFalse(np.array_equal(first, other_index))


class TestFrequency(unittest.TestCase):

    def _log(self, generation, keys):
        entries = [IndividualEntry(list(group), 0.1, True) for group in keys]
        return complete_generation(start_generation(generation), entries, best_real_fitness=0.1)

    def test_counts_sorted_by_count_then_key(self):
        logs = [
            self._log(0, [["[U,B](0-1)"]]),
            self._log(1, [["b"], ["a"], ["b"]]),
            self._log(2, [["a", "c"], ["b"]]),
        ]
        frame = gene_frequency(logs, window=2)
        self.assertEqual(frame["gene_key"].tolist(), ["b", "a", "c"])
        self.assertEqual(frame["count"].tolist(), [3, 2, 1])

    def test_written_file(self):
        tmpdir = Path(tempfile.mkdtemp())
        try:
            frame = gene_frequency([self._log(0, [["x"], ["y"], ["x"]])])
            write_frequency(frame, tmpdir / "final_genes.txt")
            self.assertEqual((tmpdir / "final_genes.txt").read_text(encoding="utf-8"), "x\t2\ny\t1\n")
        finally:
            shutil.rmtree(tmpdir)


class TestEvaluation(unittest.TestCase):
    """Single-individual training on the planted graph."""

    @classmethod
    def setUpClass(cls):
        cls.graph = planted_graph(seed=1)
        cls.dataset = split_dataset(cls.graph.hin, seed=7)
        cls.train_hin = cls.graph.hin.restrict_target(cls.dataset.split("train"))
        cls.cfg = tiny_search_config()

    def test_fixed_seed_is_repeatable(self):
        genes = [self.graph.planted]
        first = evaluate_individual(genes, self.train_hin, self.dataset, self.cfg, seed=13)
        second = evaluate_individual(genes, self.train_hin, self.dataset, self.cfg, seed=13)
        self.assertEqual(first, second)
        self.assertTrue(0.0 <= first <= 1.0)

    def test_gene_without_instances_still_trains(self):
        schema = self.graph.schema
        edges = dict(self.train_hin.edges)
        edges["U-U"] = np.zeros((0, 2), dtype=np.int64)
        bare = Hin.build(schema, self.train_hin.node_counts, edges)
        gene = parse("[U,I,U](0-2)(1-2)", schema)
        views = individual_views([gene], bare, 5, 10, seed=0)
        self.assertEqual(views.source[0].nnz, 0)
        fitness = evaluate_individual([gene], bare, self.dataset, self.cfg, seed=1)
        self.assertTrue(0.0 <= fitness <= 1.0)

    def test_relabeled_genes_get_identical_views(self):
        schema = self.graph.schema
        first = parse("[U,I,I,C](0-2)(1-3)(2-3)", schema)
        second = parse("[U,I,C,I](0-3)(1-2)(2-3)", schema)
        views_a = individual_views([first], self.train_hin, 5, 10, seed=3)
        views_b = individual_views([second], self.train_hin, 5, 10, seed=3)
        self.assertEqual(views_a.gene_keys, views_b.gene_keys)
        self.assertEqual((views_a.source[0] != views_b.source[0]).nnz, 0)
        self.assertEqual((views_a.sink[0] != views_b.sink[0]).nnz, 0)


class TestRunSearch(unittest.TestCase):
    """The full loop on a tiny configuration."""

    @classmethod
    def setUpClass(cls):
        cls.graph = planted_graph(seed=1)
        cls.dataset = split_dataset(cls.graph.hin, seed=7)

    def setUp(self):
        self._tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self._tmpdir)

    def _run(self, cfg, out_dir=None):
        return run_search(cfg, self.graph.schema, self.graph.hin, self.dataset, workers=1, out_dir=out_dir)

    def test_single_generation_without_predictor(self):
        result = self._run(tiny_search_config(seed=3))
        self.assertEqual(len(result.logs), 1)
        self.assertEqual(len(result.population), 2)
        self.assertTrue(all(individual.evaluated for individual in result.population))
        self.assertEqual(len(result.history), 2)
        self.assertIsNotNone(result.best)
        self.assertEqual(result.logs[0].stats["filtered"], 0)

    def test_same_seed_same_records(self):
        cfg = tiny_search_config(seed=8, generations=2, population=3)
        self._run(cfg, self._tmpdir / "first")
        self._run(cfg, self._tmpdir / "second")
        for name in ("generations.jsonl", "history.jsonl"):
            first = (self._tmpdir / "first" / name).read_bytes()
            second = (self._tmpdir / "second" / name).read_bytes()
            self.assertEqual(first, second, name)
        self.assertEqual(len(read_json_lines(self._tmpdir / "first" / "timings.jsonl")), 2)

    def test_predictor_filters_at_most_a_quantile(self):
        cfg = tiny_search_config(
            seed=2,
            generations=2,
            population=4,
            predictor=PredictorConfig(enabled=True, dim=4, hidden=4, epochs=5, filter_quantile=0.25),
        )
        result = self._run(cfg, self._tmpdir)
        first, second = result.logs
        self.assertEqual(first.stats["filtered"], 0)
        self.assertIsNotNone(first.predictor_mse)
        self.assertIsNone(first.filter_threshold)
        self.assertLessEqual(second.stats["filtered"], 1)
        self.assertIsNotNone(second.filter_threshold)
        self.assertEqual(len(result.history), 4 + second.stats["evaluated"])

    def test_random_initial_population_is_valid(self):
        cfg = tiny_search_config(random_init=True, population=5, genes_per_individual=2)
        population = _initial_population(cfg, self.graph.schema)
        self.assertEqual(len(population), 5)
        for genes in population:
            for gene in genes:
                self.assertEqual(validate(gene, self.graph.schema, max_nodes=cfg.max_gene_nodes), [])

    def test_worker_pool_matches_in_process_records(self):
        cfg = tiny_search_config(seed=4, generations=2, population=3)
        run_search(cfg, self.graph.schema, self.graph.hin, self.dataset, workers=1, out_dir=self._tmpdir / "serial")
        run_search(cfg, self.graph.schema, self.graph.hin, self.dataset, workers=2, out_dir=self._tmpdir / "pool")
        for name in ("generations.jsonl", "history.jsonl"):
            serial = (self._tmpdir / "serial" / name).read_bytes()
            pool = (self._tmpdir / "pool" / name).read_bytes()
            self.assertEqual(serial, pool, name)

    def test_best_real_fitness_never_drops(self):
        for seed in range(3):
            result = self._run(tiny_search_config(seed=seed, generations=3, population=3))
            best = [log.stats["best_real_fitness"] for log in result.logs]
            self.assertEqual(len(best), 3)
            for earlier, later in zip(best, best[1:]):
                self.assertGreaterEqual(later, earlier)

    def test_evaluation_error_names_the_individual(self):
        failure = DatasetError("target relation vanished")
        with mock.patch("gems.services.engine.evaluate_individual", side_effect=failure):
            with self.assertRaises(SearchAbort) as caught:
                self._run(tiny_search_config(seed=0))
        self.assertEqual(caught.exception.generation, 0)
        self.assertEqual(caught.exception.individual, 0)
        self.assertIs(caught.exception.cause, failure)


if __name__ == "__main__":
    unittest.main()
