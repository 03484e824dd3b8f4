"""Shared builders for the unit tests."""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from pathlib import Path

from gems.data.models import PredictorConfig, SearchConfig, TrainConfig
from gems.services.hin_core import Hin, load_schema
from gems.services.synthetic import generate_synthetic_hin, load_synthetic_spec
from gems.settings import CONFIG_DIR, PROJECT_ROOT

SAMPLE_DIR = PROJECT_ROOT / "sample_data"
YELP_SCHEMA = SAMPLE_DIR / "yelp_like_schema.json"
YELP_EDGES = SAMPLE_DIR / "yelp_like_edges.tsv"
YELP_GENES = SAMPLE_DIR / "yelp_fixed_genes.txt"


def yelp_schema():
    return load_schema(YELP_SCHEMA)


def yelp_hin(counts=(4, 4, 1, 1, 1), **edges):
    """Small graph over the Yelp-shaped schema; keyword names use ``_`` for ``-`` (``U_B=[(0, 1)]``)."""
    schema = yelp_schema()
    return Hin.build(schema, counts, {name.replace("_", "-"): pairs for name, pairs in edges.items()})


def planted_graph(seed=1):
    spec = load_synthetic_spec(CONFIG_DIR / "synthetic_default.json")
    return generate_synthetic_hin(spec, seed=seed)


def tiny_search_config(**overrides):
    """Search settings small enough for a unit test to train every individual."""
    payload = {
        "population": 2,
        "genes_per_individual": 1,
        "generations": 1,
        "max_gene_nodes": 4,
        "expansion_cap": 5,
        "list_cap": 10,
        "train": TrainConfig(embedding_dim=4, epochs=1, batch_size=256, eval_negatives=20),
        "predictor": PredictorConfig(enabled=False, dim=4, hidden=4, epochs=5),
    }
    payload.update(overrides)
    return SearchConfig(**payload)


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
