"""Tests for schema loading, graph storage, splitting and negative sampling."""
import json
import shutil
import tempfile
import unittest
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from pathlib import Path

import numpy as np

from gems.errors import DatasetError, EdgeFileError, SchemaError
from gems.services.hin_core import (
    TEST,
    TRAIN,
    VAL,
    InteractionDataset,
    load_hin,
    load_schema,
    sample_negatives,
    sample_negatives_batch,
    split_dataset,
    write_hin,
)
from tests.helpers import YELP_EDGES, YELP_SCHEMA, write_text, yelp_hin, yelp_schema


def _grid_hin(n_users, n_items):
    """Every user linked to every item."""
    pairs = [(u, b) for u in range(n_users) for b in range(n_items)]
    return yelp_hin(counts=(n_users, n_items, 1, 1, 1), U_B=pairs)


def _frequency_dataset(frequency, n_users=1):
    frequency = np.asarray(frequency, dtype=np.int64)
    positives = np.array([[0, int(np.argmax(frequency))]], dtype=np.int64)
    return InteractionDataset(
        positives=positives,
        split_tags=np.array([TRAIN], dtype=np.int8),
        item_frequency=frequency,
        n_users=n_users,
        n_items=len(frequency),
    )


class TestSchema(unittest.TestCase):
    """Schema files and their validation."""

    def setUp(self):
        self._tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self._tmpdir)

    def test_yelp_schema_shape(self):
        schema = load_schema(YELP_SCHEMA)
        self.assertEqual(len(schema.node_types), 5)
        self.assertEqual(len(schema.relations), 5)
        self.assertEqual(schema.node_types[schema.source], "U")
        self.assertEqual(schema.node_types[schema.sink], "B")
        self.assertTrue(schema.has_relation(schema.type_index("U"), schema.type_index("U")))
        self.assertFalse(schema.has_relation(schema.type_index("U"), schema.type_index("A")))

    def test_single_type_self_relation_is_valid(self):
        path = write_text(
            self._tmpdir / "schema.json",
            json.dumps(
                {
                    "node_types": ["U"],
                    "relations": [{"name": "U-U", "a": "U", "b": "U"}],
                    "target": {"source": "U", "sink": "U", "relation": "U-U"},
                }
            ),
        )
        schema = load_schema(path)
        self.assertEqual(schema.node_types, ("U",))
        self.assertEqual(schema.source, schema.sink)

    def test_undeclared_type_is_rejected(self):
        path = write_text(
            self._tmpdir / "schema.json",
            json.dumps(
                {
                    "node_types": ["U", "B"],
                    "relations": [{"name": "U-B", "a": "U", "b": "B"}, {"name": "U-X", "a": "U", "b": "X"}],
                    "target": {"source": "U", "sink": "B", "relation": "U-B"},
                }
            ),
        )
        with self.assertRaises(SchemaError):
            load_schema(path)

    def test_malformed_json_is_a_schema_error(self):
        path = write_text(self._tmpdir / "schema.json", "{not json")
        with self.assertRaises(SchemaError):
            load_schema(path)


class TestHinLoading(unittest.TestCase):
    """Edge files and the neighbor indexes built from them."""

    def setUp(self):
        self._tmpdir = Path(tempfile.mkdtemp())
        self.schema = yelp_schema()

    def tearDown(self):
        shutil.rmtree(self._tmpdir)

    def test_three_edges_symmetric_adjacency(self):
        path = write_text(
            self._tmpdir / "edges.tsv",
            "#count U 2\n#count B 3\nU-B\t0\t1\nU-B\t0\t2\nU-B\t1\t2\n",
        )
        hin = load_hin(self.schema, path)
        u, b = self.schema.type_index("U"), self.schema.type_index("B")
        self.assertEqual(len(hin.edges["U-B"]), 3)
        self.assertEqual(hin.neighbors(u, b, 0).tolist(), [1, 2])
        self.assertEqual(hin.neighbors(b, u, 2).tolist(), [0, 1])
        self.assertTrue(hin.has_edge(b, u, 1, 0))
        self.assertFalse(hin.has_edge(u, b, 1, 1))

    def test_reversed_type_pair_is_accepted(self):
        path = write_text(self._tmpdir / "edges.tsv", "B-U\t2\t0\n")
        hin = load_hin(self.schema, path)
        self.assertEqual(hin.edges["U-B"].tolist(), [[0, 2]])

    def test_empty_file_with_declared_counts(self):
        path = write_text(self._tmpdir / "edges.tsv", "#count U 3\n#count B 2\n")
        hin = load_hin(self.schema, path)
        self.assertEqual(hin.count(self.schema.type_index("U")), 3)
        self.assertTrue(all(len(pairs) == 0 for pairs in hin.edges.values()))

    def test_unknown_relation(self):
        path = write_text(self._tmpdir / "edges.tsv", "U-X\t0\t1\n")
        with self.assertRaises(EdgeFileError):
            load_hin(self.schema, path)

    def test_id_beyond_declared_count(self):
        path = write_text(self._tmpdir / "edges.tsv", "#count U 2\nU-B\t5\t0\n")
        with self.assertRaises(EdgeFileError):
            load_hin(self.schema, path)

    def test_self_loops_and_duplicates_are_dropped(self):
        path = write_text(self._tmpdir / "edges.tsv", "U-U\t1\t1\nU-U\t0\t1\nU-U\t1\t0\n")
        hin = load_hin(self.schema, path)
        self.assertEqual(hin.edges["U-U"].tolist(), [[0, 1]])

    def test_written_graph_reloads(self):
        hin = load_hin(self.schema, YELP_EDGES)
        target = self._tmpdir / "copy.tsv"
        write_hin(hin, target)
        reloaded = load_hin(self.schema, target)
        self.assertEqual(reloaded.node_counts, hin.node_counts)
        for name, pairs in hin.edges.items():
            self.assertTrue(np.array_equal(reloaded.edges[name], pairs))

    def test_restrict_target_keeps_context_relations(self):
        hin = yelp_hin(U_B=[(0, 0), (1, 1), (2, 2)], U_U=[(0, 1)])
        restricted = hin.restrict_target(np.array([[1, 1]]))
        self.assertEqual(restricted.target_pairs().tolist(), [[1, 1]])
        self.assertEqual(restricted.edges["U-U"].tolist(), [[0, 1]])

    def test_type_degree_counts_every_relation(self):
        hin = yelp_hin(U_B=[(0, 0), (1, 1)], U_U=[(0, 1)])
        self.assertEqual(hin.type_degree(0), 2 + 2)
        self.assertEqual(hin.type_degree(1), 2)


class TestSplit(unittest.TestCase):
    """Seeded train/val/test tagging."""

    def test_bucket_sizes(self):
        dataset = split_dataset(_grid_hin(10, 10), (0.8, 0.1, 0.1), seed=7)
        self.assertEqual(len(dataset.split("train")), 80)
        self.assertEqual(len(dataset.split("val")), 10)
        self.assertEqual(len(dataset.split("test")), 10)

    def test_same_seed_same_tags(self):
        hin = _grid_hin(10, 10)
        first = split_dataset(hin, seed=7)
        second = split_dataset(hin, seed=7)
        self.assertTrue(np.array_equal(first.split_tags, second.split_tags))

    def test_different_seeds_same_sizes(self):
        hin = _grid_hin(100, 10)
        first = split_dataset(hin, seed=1)
        second = split_dataset(hin, seed=2)
        self.assertFalse(np.array_equal(first.split_tags, second.split_tags))
        for tag in (TRAIN, VAL, TEST):
            self.assertEqual(int((first.split_tags == tag).sum()), int((second.split_tags == tag).sum()))

    def test_per_user_split_tags_every_user(self):
        dataset = split_dataset(_grid_hin(5, 10), (0.8, 0.1, 0.1), seed=3, strategy="per_user")
        for user in range(5):
            mine = dataset.split_tags[dataset.positives[:, 0] == user]
            self.assertEqual(int((mine == TRAIN).sum()), 8)

    def test_train_frequencies(self):
        dataset = split_dataset(_grid_hin(10, 10), seed=7)
        self.assertEqual(int(dataset.item_frequency.sum()), 80)

    def test_too_few_edges(self):
        with self.assertRaises(DatasetError):
            split_dataset(_grid_hin(3, 3))

    def test_bad_ratios(self):
        with self.assertRaises(DatasetError):
            split_dataset(_grid_hin(10, 10), (0.5, 0.1, 0.1))


class TestNegativeSampling(unittest.TestCase):
    """Frequency-weighted draws of non-interacted items."""

    def test_frequency_proportional(self):
        dataset = _frequency_dataset([3, 1])
        draws = sample_negatives(dataset, 0, 10000, [], np.random.default_rng(0))
        share = draws.count(0) / len(draws)
        self.assertAlmostEqual(share, 0.75, delta=0.02)

    def test_single_item_with_mass(self):
        dataset = _frequency_dataset([0, 5, 0])
        draws = sample_negatives(dataset, 0, 2, [], np.random.default_rng(0))
        self.assertEqual(draws, [1, 1])

    def test_excluded_items_never_drawn(self):
        dataset = _frequency_dataset([5, 5, 5, 5])
        draws = sample_negatives(dataset, 0, 500, [0, 2], np.random.default_rng(4))
        self.assertTrue(set(draws) <= {1, 3})

    def test_whole_catalog_excluded(self):
        dataset = _frequency_dataset([1, 1])
        with self.assertRaises(DatasetError):
            sample_negatives(dataset, 0, 1, [0, 1], np.random.default_rng(0))

    def test_batch_respects_exclusions(self):
        dataset = _frequency_dataset([10, 1, 1, 1])
        users = np.array([0, 0, 0])
        exclude = [frozenset({0}), frozenset({0, 1}), frozenset()]
        draws = sample_negatives_batch(dataset, users, 20, np.random.default_rng(2), exclude)
        self.assertEqual(draws.shape, (3, 20))
        for row, banned in zip(draws.tolist(), exclude):
            self.assertFalse(set(row) & banned)


if __name__ == "__main__":
    unittest.main()
