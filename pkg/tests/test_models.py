"""Tests for load-time validation of the run configuration models."""
import unittest
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from pydantic import ValidationError

from gems.data.models import PredictorConfig, SearchConfig, SyntheticRelation


class TestSearchConfigRanges(unittest.TestCase):

    def test_defaults_load(self):
        cfg = SearchConfig()
        self.assertEqual(cfg.max_gene_nodes, 6)
        self.assertEqual(cfg.mutation_config(0).p_mutate, cfg.p_mutate_early)
        self.assertEqual(cfg.mutation_config(cfg.mutation_switch_generation).p_mutate, cfg.p_mutate_late)

    def test_rejected_values(self):
        bad = [
            {"max_gene_nodes": 1},
            {"max_gene_nodes": 8},
            {"mutation_switch_generation": -1},
            {"assign_retries": -1},
            {"random_init_steps": 0},
            {"population": 1},
            {"survive_fraction": 0.0},
            {"split_ratios": (0.5, 0.3, 0.1)},
            {"p_swap": 1.5},
        ]
        for overrides in bad:
            with self.subTest(**{key: str(value) for key, value in overrides.items()}):
                with self.assertRaises(ValidationError):
                    SearchConfig(**overrides)

    def test_boundary_values_accepted(self):
        cfg = SearchConfig(max_gene_nodes=2, mutation_switch_generation=0, assign_retries=0, random_init_steps=1)
        self.assertEqual(cfg.mutation_config(0).p_mutate, cfg.p_mutate_late)
        self.assertEqual(SearchConfig(max_gene_nodes=7).mutation_config(0).max_nodes, 7)

    def test_unknown_field(self):
        with self.assertRaises(ValidationError):
            SearchConfig(populaton=10)


class TestNestedConfigRanges(unittest.TestCase):

    def test_predictor_batch_size(self):
        self.assertIsNone(PredictorConfig().batch_size)
        self.assertEqual(PredictorConfig(batch_size=16).batch_size, 16)
        with self.assertRaises(ValidationError):
            PredictorConfig(batch_size=0)

    def test_relation_degree(self):
        with self.assertRaises(ValidationError):
            SyntheticRelation(name="U-I", a="U", b="I", degree=-1.0)


if __name__ == "__main__":
    unittest.main()
