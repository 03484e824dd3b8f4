"""
Command-line entry point: ``python -m gems <command>``.

Human-readable progress goes to stderr through logging; machine-readable
results are printed to stdout as JSON. Exit codes: 0 success, 1 bad input or
configuration, 2 runtime abort or I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import find_dotenv, load_dotenv

# The settings singleton reads the environment at import, so .env goes in first.
load_dotenv(find_dotenv(usecwd=True))

from pydantic import ValidationError

from gems.data.models import RunManifest, SearchConfig
from gems.errors import CheckpointMismatchError, ConfigError, InputError, RuntimeAbort
from gems.services import mvgcn, predictor
from gems.services.adjsearch import brute_force_instances, export_table
from gems.services.engine import (
    checkpoint_meta,
    individual_views,
    run_search,
    save_best_checkpoint,
    stream_seed,
    train_individual,
    write_frequency,
)
from gems.services.evalkit import evaluate_model
from gems.services.gene import MetaStructureGene, canonicalize, free_cells, load_genes, serialize
from gems.services.hin_core import Hin, InteractionDataset, Schema, load_hin, load_schema, split_dataset, write_hin, write_schema
from gems.services.synthetic import generate_synthetic_hin, load_synthetic_spec
from gems.settings import settings

logger = logging.getLogger("gems")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_BOUND = 1e-4
LARGEST_GENE = 7


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _emit(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _fresh_seed() -> int:
    return int(np.random.SeedSequence().generate_state(1)[0])


def _resolve_seed(args: argparse.Namespace, fallback: Optional[int] = None) -> int:
    if args.seed is not None:
        return args.seed
    return fallback if fallback is not None else _fresh_seed()


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else settings.output_path / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(
    args: argparse.Namespace,
    out: Path,
    seed: int,
    argv: Sequence[str],
    config_path: Optional[Path] = None,
    inputs: Optional[Dict[str, str]] = None,
) -> RunManifest:
    manifest = RunManifest(
        command=args.command,
        config_path=str(config_path) if config_path else None,
        input_paths=inputs or {},
        output_dir=str(out),
        seed=seed,
        timestamp=datetime.now(timezone.utc).isoformat(),
        argv=list(argv),
        settings=settings.get_config_status(),
    )
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return manifest


def load_search_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> Tuple[SearchConfig, Dict[str, Any]]:
    """Read a JSON run config, apply flag overrides and validate; returns the config and the raw payload."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed config ({exc})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "predictor_enabled":
            payload.setdefault("predictor", {})["enabled"] = value
        else:
            payload[key] = value
    return SearchConfig.model_validate(payload), payload


def _search_config(args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> Tuple[SearchConfig, Path, int]:
    config_path = Path(args.config) if args.config else settings.search_config_path
    overrides = dict(extra or {})
    cfg, payload = load_search_config(config_path, overrides)
    seed = _resolve_seed(args, payload.get("seed"))
    return cfg.model_copy(update={"seed": seed}), config_path, seed


def _load_data(args: argparse.Namespace, cfg: SearchConfig) -> Tuple[Schema, Hin, InteractionDataset]:
    schema = load_schema(Path(args.schema))
    hin = load_hin(schema, Path(args.edges))
    dataset = split_dataset(hin, cfg.split_ratios, cfg.split_seed, cfg.split_strategy)
    return schema, hin, dataset


def _read_genes(path: Path, schema: Schema, max_nodes: int) -> List[MetaStructureGene]:
    genes = load_genes(path, schema, max_nodes)
    if not genes:
        raise ConfigError(f"{path}: the genes file lists no genes")
    return genes


def _write_genes(genes: Sequence[MetaStructureGene], path: Path) -> None:
    path.write_text("".join(canonicalize(gene) + "\n" for gene in genes), encoding="utf-8")


def cmd_synth(args: argparse.Namespace, argv: Sequence[str]) -> int:
    spec_path = Path(args.config) if args.config else settings.synth_spec_path
    spec = load_synthetic_spec(spec_path)
    seed = _resolve_seed(args, 0)
    out = _out_dir(args)
    graph = generate_synthetic_hin(spec, seed)
    write_schema(graph.schema, out / "schema.json")
    write_hin(graph.hin, out / "edges.tsv")
    (out / "planted_gene.txt").write_text(serialize(graph.planted) + "\n", encoding="utf-8")
    _write_manifest(args, out, seed, argv, spec_path)
    _emit(
        {
            "out": str(out),
            "planted_gene": canonicalize(graph.planted),
            "node_counts": dict(zip(graph.schema.node_types, graph.hin.node_counts)),
            "target_edges": int(len(graph.hin.target_pairs())),
        }
    )
    return EXIT_OK


def cmd_search(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg, config_path, seed = _search_config(
        args,
        {
            "generations": args.generations,
            "population": args.population,
            "genes_per_individual": args.genes_per_individual,
            "predictor_enabled": False if args.no_predictor else None,
        },
    )
    schema, hin, dataset = _load_data(args, cfg)
    out = _out_dir(args)
    (out / "config.json").write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
    _write_manifest(args, out, seed, argv, config_path, {"schema": args.schema, "edges": args.edges})

    workers = args.workers if args.workers is not None else settings.workers
    result = run_search(cfg, schema, hin, dataset, workers=workers, out_dir=out)
    write_frequency(result.frequency, out / "final_genes.txt")
    summary: Dict[str, Any] = {
        "out": str(out),
        "generations": len(result.logs),
        "top_genes": result.frequency["gene_key"].head(3).tolist(),
        "best_real_fitness": result.logs[-1].stats.get("best_real_fitness") if result.logs else None,
    }
    if result.best is not None:
        _write_genes(result.best.genes, out / "best_genes.txt")
        trained = save_best_checkpoint(result, dataset, cfg, out / "checkpoint.npz")
        summary["best_genes"] = result.best.keys
        summary["best_val_ndcg"] = trained.best_ndcg if trained else None
    _emit(summary)
    return EXIT_OK


def _test_report(result: mvgcn.TrainResult, views: mvgcn.Views, dataset: InteractionDataset, cfg: SearchConfig, seed: int):
    scorer = mvgcn.EmbeddingScorer.from_params(result.params, views)
    return evaluate_model(
        scorer,
        dataset,
        "test",
        seed=seed,
        n_negatives=cfg.train.eval_negatives,
        exponent=cfg.train.negative_exponent,
    )


def cmd_fixed(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg, config_path, seed = _search_config(args)
    schema, hin, dataset = _load_data(args, cfg)
    genes = _read_genes(Path(args.genes), schema, cfg.max_gene_nodes)
    out = _out_dir(args)
    _write_manifest(
        args, out, seed, argv, config_path, {"schema": args.schema, "edges": args.edges, "genes": args.genes}
    )
    train_hin = hin.restrict_target(dataset.split("train"))
    eval_seed = stream_seed(seed, 0, 0, "evaluate")
    result, views = train_individual(genes, train_hin, dataset, cfg, eval_seed)
    report = _test_report(result, views, dataset, cfg, seed)
    mvgcn.save_checkpoint(result.params, out / "checkpoint.npz", checkpoint_meta(cfg, eval_seed, result.best_ndcg))
    _write_genes(genes, out / "best_genes.txt")
    payload = report.as_json()
    payload["val_NDCG@10"] = result.best_ndcg
    payload["genes"] = [canonicalize(gene) for gene in genes]
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(payload)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    params, meta = mvgcn.load_checkpoint(Path(args.checkpoint))
    schema = load_schema(Path(args.schema))
    hin = load_hin(schema, Path(args.edges))
    dataset = split_dataset(hin, meta["split_ratios"], meta["split_seed"], meta["split_strategy"])
    genes = _read_genes(Path(args.genes), schema, LARGEST_GENE)
    by_key = {canonicalize(gene): gene for gene in genes}
    if sorted(by_key) != sorted(params.gene_keys) or len(genes) != len(params.gene_keys):
        raise CheckpointMismatchError(
            f"genes file {args.genes} lists {sorted(by_key)} but the checkpoint was trained on {sorted(params.gene_keys)}"
        )
    ordered = [by_key[key] for key in params.gene_keys]
    train_hin = hin.restrict_target(dataset.split("train"))
    if params.x_src.shape[0] != dataset.n_users or params.x_snk.shape[0] != dataset.n_items:
        raise CheckpointMismatchError("checkpoint node counts do not match the loaded graph")
    views = individual_views(ordered, train_hin, meta["expansion_cap"], meta["list_cap"], meta["seed"])
    seed = _resolve_seed(args, 0)
    out = _out_dir(args)
    _write_manifest(
        args, out, seed, argv, None, {"checkpoint": args.checkpoint, "genes": args.genes, "edges": args.edges}
    )
    report = evaluate_model(
        mvgcn.EmbeddingScorer.from_params(params, views),
        dataset,
        "test",
        seed=seed,
        n_negatives=meta.get("eval_negatives", 100),
        exponent=meta.get("negative_exponent", 1.0),
    )
    _emit(report.as_json())
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, argv: Sequence[str]) -> int:
    seed = _resolve_seed(args, 0)
    out = _out_dir(args)
    _write_manifest(args, out, seed, argv)
    seeds = np.random.SeedSequence(seed).generate_state(args.trials)
    gcn_worst: Dict[str, float] = {}
    predictor_worst: Dict[str, float] = {}
    for trial_seed in seeds.tolist():
        micro = mvgcn.micro_instance(seed=trial_seed, d=args.d, n_views=args.views)
        errors = mvgcn.gradient_errors(micro.params, micro.views, micro.users, micro.items, micro.negatives, 0.3, 0.05)
        for name, value in errors.items():
            gcn_worst[name] = max(gcn_worst.get(name, 0.0), value)
        params, samples = predictor.micro_instance(seed=trial_seed)
        for name, value in predictor.gradient_errors(params, samples).items():
            predictor_worst[name] = max(predictor_worst.get(name, 0.0), value)
    gcn_max = max(gcn_worst.values())
    predictor_max = max(predictor_worst.values())
    passed = gcn_max < GRADCHECK_BOUND and predictor_max < GRADCHECK_BOUND
    _emit(
        {
            "mvgcn_max_rel_error": gcn_max,
            "predictor_max_rel_error": predictor_max,
            "mvgcn": gcn_worst,
            "predictor": predictor_worst,
            "trials": args.trials,
            "passed": passed,
        }
    )
    if not passed:
        logger.error("Gradient check failed: mvgcn %.3g, predictor %.3g", gcn_max, predictor_max)
    return EXIT_OK if passed else EXIT_RUNTIME


def cmd_inspect_genes(args: argparse.Namespace, argv: Sequence[str]) -> int:
    schema = load_schema(Path(args.schema))
    hin = load_hin(schema, Path(args.edges))
    largest = max(hin.node_counts)
    if largest > settings.brute_force_node_limit and not (args.force or settings.allow_large_inspect):
        raise ConfigError(
            f"graph has {largest} nodes in one type, above the exhaustive-matching limit "
            f"{settings.brute_force_node_limit}; pass --force to inspect anyway"
        )
    genes = _read_genes(Path(args.genes), schema, LARGEST_GENE)
    export_dir = Path(args.export_dir) if args.export_dir else None
    rows = []
    for index, gene in enumerate(genes):
        table = brute_force_instances(gene, hin)
        logger.info("%s  instances=%d", serialize(gene), table.instance_count())
        if export_dir is not None:
            export_table(table, export_dir / f"gene_{index}.tsv")
        rows.append(
            {
                "gene": serialize(gene),
                "key": canonicalize(gene),
                "free_cells": free_cells(schema, gene.type_list),
                "instances": table.instance_count(),
                "sources_with_instances": sum(1 for row in table.neighbors if len(row)),
            }
        )
    _emit(rows)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg, config_path, seed = _search_config(args)
    schema, hin, dataset = _load_data(args, cfg)
    genes = _read_genes(Path(args.genes), schema, cfg.max_gene_nodes)
    out = _out_dir(args)
    _write_manifest(
        args, out, seed, argv, config_path, {"schema": args.schema, "edges": args.edges, "genes": args.genes}
    )
    train_hin = hin.restrict_target(dataset.split("train"))
    eval_seed = stream_seed(seed, 0, 0, "evaluate")
    lines = []
    for l2 in args.l2:
        for dim in args.dims:
            point = cfg.model_copy(update={"train": cfg.train.model_copy(update={"l2": l2, "embedding_dim": dim})})
            result, views = train_individual(genes, train_hin, dataset, point, eval_seed)
            payload = _test_report(result, views, dataset, point, seed).as_json()
            payload.update({"l2": l2, "embedding_dim": dim, "val_NDCG@10": result.best_ndcg})
            line = json.dumps(payload, sort_keys=True)
            lines.append(line)
            sys.stdout.write(line + "\n")
            sys.stdout.flush()
    (out / "sweep.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "search": cmd_search,
    "fixed": cmd_fixed,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect-genes": cmd_inspect_genes,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (fresh one when omitted)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--log-level", default=None, help="overrides GEMS_LOG_LEVEL")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--schema", required=True)
    data.add_argument("--edges", required=True)

    parser = argparse.ArgumentParser(prog="gems", description="Genetic meta-structure search for recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate a planted synthetic graph")
    synth.add_argument("--config", default=None, help="synthetic spec JSON")

    search = sub.add_parser("search", parents=[common, data], help="run the genetic search")
    search.add_argument("--config", default=None)
    search.add_argument("--workers", type=int, default=None)
    search.add_argument("--no-predictor", action="store_true")
    search.add_argument("--generations", type=int, default=None)
    search.add_argument("--population", type=int, default=None)
    search.add_argument("--genes-per-individual", type=int, default=None)

    fixed = sub.add_parser("fixed", parents=[common, data], help="train once on a hand-picked gene set")
    fixed.add_argument("--config", default=None)
    fixed.add_argument("--genes", required=True)

    evaluate = sub.add_parser("eval", parents=[common, data], help="test metrics of a saved checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--genes", required=True)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gradcheck.add_argument("--d", type=int, default=4)
    gradcheck.add_argument("--views", type=int, default=2)
    gradcheck.add_argument("--trials", type=int, default=3)

    inspect = sub.add_parser("inspect-genes", parents=[common, data], help="exact instance counts for genes")
    inspect.add_argument("--genes", required=True)
    inspect.add_argument("--force", action="store_true")
    inspect.add_argument("--export-dir", default=None)

    sweep = sub.add_parser("sweep", parents=[common, data], help="L2 weight and dimension sensitivity grid")
    sweep.add_argument("--config", default=None)
    sweep.add_argument("--genes", required=True)
    sweep.add_argument("--l2", type=float, nargs="+", default=[0.0, 0.01, 0.05, 0.1])
    sweep.add_argument("--dims", type=int, nargs="+", default=[16, 32, 64])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level or settings.log_level)
    try:
        return COMMANDS[args.command](args, argv)
    except (InputError, ValidationError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (RuntimeAbort, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
