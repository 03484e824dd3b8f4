#!/usr/bin/env python3
"""
End-to-end smoke check: planted synthetic graph, gradient checks and a short search.
Run this script after installing requirements to verify the package works.

Usage:
    python scripts/smoke_check.py
    python scripts/smoke_check.py --skip-search
"""

import sys
import tempfile
from pathlib import Path

# Add project root to path
project_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(project_root))

# Load .env file
from dotenv import load_dotenv
load_dotenv(project_root / ".env")

from gems.settings import settings


def check_synthetic(out_dir: Path):
    """Generate the default planted graph and split it."""
    print("\n" + "=" * 60)
    print("SYNTHETIC GRAPH")
    print("=" * 60)

    try:
        from gems.services.hin_core import split_dataset
        from gems.services.synthetic import generate_synthetic_hin, load_synthetic_spec

        spec = load_synthetic_spec(settings.synth_spec_path)
        graph = generate_synthetic_hin(spec, seed=0)
        dataset = split_dataset(graph.hin)
        print(f"Spec: {settings.synth_spec_path}")
        print(f"  - Node counts: {dict(zip(graph.schema.node_types, graph.hin.node_counts))}")
        print(f"  - Target edges: {len(dataset.positives)}")
        print(f"  - Planted gene: {graph.planted}")
        return graph, dataset
    except Exception as e:
        print(f"FAILED: {str(e)}")
        return None, None


def check_gradients():
    """Finite-difference checks for the GCN and the predictor."""
    print("\n" + "=" * 60)
    print("GRADIENT CHECK")
    print("=" * 60)

    try:
        from gems.services import mvgcn, predictor

        micro = mvgcn.micro_instance(seed=1)
        gcn_error = mvgcn.grad_check(micro.params, micro.views, micro.users, micro.items, micro.negatives, 0.3, 0.05)
        params, samples = predictor.micro_instance(seed=1)
        predictor_error = max(predictor.gradient_errors(params, samples).values())
        print(f"  - GCN max relative error: {gcn_error:.2e}")
        print(f"  - Predictor max relative error: {predictor_error:.2e}")
        if gcn_error < 1e-4 and predictor_error < 1e-4:
            print("SUCCESS: analytic gradients match")
            return True
        print("FAILED: relative error above 1e-4")
        return False
    except Exception as e:
        print(f"FAILED: {str(e)}")
        return False


def check_search(graph, dataset, out_dir: Path):
    """Two generations of a small search on the planted graph."""
    print("\n" + "=" * 60)
    print("SHORT SEARCH")
    print("=" * 60)

    if graph is None:
        print("FAILED: no synthetic graph to search")
        return False

    try:
        from gems.data.models import SearchConfig, TrainConfig
        from gems.services.engine import run_search

        cfg = SearchConfig(
            population=4,
            genes_per_individual=2,
            generations=2,
            max_gene_nodes=4,
            expansion_cap=5,
            train=TrainConfig(embedding_dim=8, epochs=3, batch_size=128),
        )
        result = run_search(cfg, graph.schema, graph.hin, dataset, workers=1, out_dir=out_dir)
        for log in result.logs:
            print(f"  - Generation {log.generation}: mean={log.mean_fitness:.4f} max={log.max_fitness:.4f}")
        print(f"  - Most frequent gene: {result.frequency['gene_key'].iloc[0]}")
        print("SUCCESS: search completed")
        return True
    except Exception as e:
        print(f"FAILED: {str(e)}")
        return False


def main():
    """Run smoke checks."""
    print("GEMS - Smoke Check Utility")
    print(f"Project Root: {project_root}")

    skip_search = "--skip-search" in sys.argv

    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        graph, dataset = check_synthetic(Path(tmp))
        results["synthetic"] = graph is not None
        results["gradients"] = check_gradients()
        if not skip_search:
            results["search"] = check_search(graph, dataset, Path(tmp) / "search")

    # Summary
    print("\n" + "=" * 60)
    print("SUMMARY")
    print("=" * 60)

    all_passed = True
    for check, passed in results.items():
        status = "PASS" if passed else "FAIL"
        print(f"  {check.upper():10} {status}")
        if not passed:
            all_passed = False

    if all_passed:
        print("\nAll smoke checks passed! You're ready to run a search.")
    else:
        print("\nSome checks failed. See the messages above.")

    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
