"""Tests for meta-structure instance matching."""
import shutil
import tempfile
import unittest
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from pathlib import Path

import numpy as np

from gems.services.adjsearch import brute_force_instances, build_tables, export_table, materialize, plan
from gems.services.gene import new_direct_gene, parse
from tests.helpers import yelp_hin, yelp_schema

GENES = (
    "[U,B](0-1)",
    "[U,B,U](0-2)(1-2)",
    "[U,B,U](0-1)(0-2)(1-2)",
    "[U,B,U,B](0-3)(1-2)(2-3)",
    "[U,B,U,B](0-1)(0-3)(1-2)(2-3)",
    "[U,B,B,A](0-2)(1-3)(2-3)",
)


def _random_hin(seed, n_users=30, n_items=25):
    rng = np.random.default_rng(seed)
    u_b = {(int(u), int(b)) for u, b in zip(rng.integers(0, n_users, 90), rng.integers(0, n_items, 90))}
    u_u = {tuple(sorted((int(a), int(b)))) for a, b in zip(rng.integers(0, n_users, 30), rng.integers(0, n_users, 30)) if a != b}
    b_a = {(int(b), int(a)) for b, a in zip(rng.integers(0, n_items, 30), rng.integers(0, 4, 30))}
    return yelp_hin(counts=(n_users, n_items, 1, 1, 4), U_B=sorted(u_b), U_U=sorted(u_u), B_A=sorted(b_a))


class TestPlan(unittest.TestCase):
    """Spanning-tree extensions plus junction checks."""

    def setUp(self):
        self.schema = yelp_schema()
        self.hin = yelp_hin(U_B=[(0, 0), (1, 1)], U_U=[(0, 1)])

    def _counts(self, text):
        match_plan = plan(parse(text, self.schema, check=False), self.hin)
        return match_plan.extensions, match_plan.checks

    def test_direct(self):
        self.assertEqual(self._counts("[U,B](0-1)"), (1, 0))

    def test_triangle(self):
        self.assertEqual(self._counts("[U,B,U](0-1)(0-2)(1-2)"), (2, 1))

    def test_four_cycle(self):
        self.assertEqual(self._counts("[U,B,U,B](0-1)(0-3)(1-2)(2-3)"), (3, 1))

    def test_root_is_busiest_type(self):
        match_plan = plan(parse("[U,B,U](0-2)(1-2)", self.schema), self.hin)
        self.assertEqual(match_plan.order[0], 0)


class TestMaterialize(unittest.TestCase):
    """Sampled matching against the exhaustive oracle."""

    def setUp(self):
        self.schema = yelp_schema()
        self._tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self._tmpdir)

    def test_unlimited_caps_match_oracle(self):
        hin = _random_hin(0)
        for text in GENES:
            gene = parse(text, self.schema, check=False)
            for reverse in (False, True):
                sampled = materialize(gene, hin, cap=None, list_cap=None, reverse=reverse)
                exact = brute_force_instances(gene, hin, reverse=reverse)
                self.assertTrue(sampled.same_as(exact), f"{text} reverse={reverse}")

    def test_direct_gene_lists_edges(self):
        hin = yelp_hin(U_B=[(0, 1), (0, 2)])
        table = materialize(new_direct_gene(self.schema), hin)
        self.assertEqual(table[0].tolist(), [1, 2])
        self.assertEqual(table[1].tolist(), [])

    def test_collaborative_gene_on_a_square(self):
        hin = yelp_hin(U_B=[(0, 0), (1, 0), (1, 1), (0, 1)])
        gene = parse("[U,B,U,B](0-3)(1-2)(2-3)", self.schema)
        table = materialize(gene, hin, cap=None, list_cap=None)
        self.assertIn(1, table[0].tolist())
        self.assertTrue(table.same_as(brute_force_instances(gene, hin)))

    def test_gene_without_instances(self):
        hin = yelp_hin(U_B=[(0, 0), (1, 1)])
        table = materialize(parse("[U,B,U](0-2)(1-2)", self.schema), hin)
        self.assertEqual(table.instance_count(), 0)
        self.assertEqual(len(table), 4)

    def test_empty_graph(self):
        table = materialize(new_direct_gene(self.schema), yelp_hin())
        self.assertTrue(all(len(row) == 0 for row in table.neighbors))

    def test_same_seed_same_table(self):
        hin = _random_hin(1)
        gene = parse("[U,B,U,B](0-3)(1-2)(2-3)", self.schema)
        first = materialize(gene, hin, cap=2, seed=9, list_cap=3)
        second = materialize(gene, hin, cap=2, seed=9, list_cap=3)
        self.assertTrue(first.same_as(second))

    def test_list_cap_bounds_rows(self):
        hin = _random_hin(2)
        table = materialize(parse("[U,B,U,B](0-3)(1-2)(2-3)", self.schema), hin, cap=None, list_cap=3)
        self.assertTrue(all(len(row) <= 3 for row in table.neighbors))
        self.assertTrue(all(np.all(np.diff(row) >= 0) for row in table.neighbors))

    def test_capped_rows_are_sub_multisets(self):
        hin = _random_hin(3)
        gene = parse("[U,B,U](0-2)(1-2)", self.schema)
        exact = brute_force_instances(gene, hin)
        sampled = materialize(gene, hin, cap=1, list_cap=None, seed=4)
        for node in range(len(exact)):
            allowed = exact[node].tolist()
            for value in sampled[node].tolist():
                self.assertIn(value, allowed)
                allowed.remove(value)

    def test_bad_cap(self):
        with self.assertRaises(ValueError):
            materialize(new_direct_gene(self.schema), yelp_hin(), cap=0)

    def test_sink_side_table(self):
        hin = yelp_hin(U_B=[(0, 1), (2, 1)])
        source, sink = build_tables(new_direct_gene(self.schema), hin, None, None, seed=0)
        self.assertEqual(source[2].tolist(), [1])
        self.assertEqual(sink[1].tolist(), [0, 2])
        self.assertEqual(sink.from_type, self.schema.sink)

    def test_export(self):
        hin = yelp_hin(U_B=[(0, 1), (0, 2)])
        table = materialize(new_direct_gene(self.schema), hin)
        target = self._tmpdir / "table.tsv"
        export_table(table, target)
        lines = target.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "# [U,B](0-1)")
        self.assertEqual(lines[1], "0\t1,2")


if __name__ == "__main__":
    unittest.main()
