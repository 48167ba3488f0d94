"""Experiment command line: train, eval, analyze, prune, bench, export-boundaries.

Every verb reads one JSON config (same schema everywhere), applies
--set/--seed overrides, validates fail-closed, and writes the resolved
config next to its outputs so any artifact can be regenerated bitwise by
re-running from resolved.json.

Exit codes: 0 success, 1 configuration/input error (diagnostic on stderr),
2 numerical failure (non-finite loss, message includes the failing step).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from treeff import analysis, boundaries, efficiency, fff, lm, pruning, serialize, tasks, train
from treeff.numeric import DivergenceError

VERBS = ("train", "eval", "analyze", "prune", "bench", "export-boundaries")


def parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override {text!r} must look like key=value")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def load_config(config_path: str | None, overrides, seed: int | None) -> train.TrainConfig:
    doc = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ValueError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ValueError(f"config file {path} is not valid JSON: {err}")
        if not isinstance(doc, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
    for key, value in overrides:
        doc[key] = value
    if seed is not None:
        doc["seed"] = seed
    return train.config_from_dict(doc)


def write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_resolved(out_dir: Path, config: train.TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "resolved.json", train.config_to_dict(config))


def resolve_checkpoint(config: train.TrainConfig, config_path: str | None) -> Path:
    """Explicit config.checkpoint wins; otherwise look next to the config."""
    if config.checkpoint:
        path = Path(config.checkpoint)
    elif config_path:
        path = Path(config_path).parent / "checkpoint.fff"
    else:
        raise ValueError(
            "no checkpoint: set the 'checkpoint' config key or pass a config "
            "that lives next to one"
        )
    if not path.exists():
        raise ValueError(f"checkpoint not found: {path}")
    return path


def fresh_model(config: train.TrainConfig):
    """Initialize the configured model without training (seeded)."""
    init_rng, _, _ = train.rng_streams(config.seed, 3)
    if config.task == "checkerboard":
        return train.build_ff_block(config, init_rng, 2, 2), None
    lm_data = train.build_lm_data(config)
    model = lm.init_lm(
        init_rng,
        len(lm_data.chars),
        config.context,
        config.d_model,
        config.n_blocks,
        lambda r: train.build_ff_block(config, r, config.d_model, config.d_model),
        tied=config.tied_head,
    )
    return model, lm_data


def require_forest(model) -> fff.ForestParams:
    if isinstance(model, fff.ForestParams):
        return model
    if isinstance(model, lm.TinyLMParams):
        for block in model.blocks:
            if isinstance(block.ff, fff.ForestParams):
                return block.ff
    raise ValueError("this command needs a tree-routed (fff) block in the model")


def probe_ledger(model: fff.ForestParams, config: train.TrainConfig):
    """Route probe inputs through a standalone tree block and tally visits.

    centered_uniform draws from the block's nominal input square [-1, 1)^2;
    the task probe draws checkerboard points and applies the same centering
    the training pipeline uses.  Chunked so probe_samples can be large.
    """
    _, _, probe_rng = train.rng_streams(config.seed, 3)
    ledger = analysis.UtilizationLedger(trees=model.trees, depth=model.depth)
    remaining = config.probe_samples
    while remaining > 0:
        take = min(remaining, 32_768)
        if config.probe == "centered_uniform":
            x = probe_rng.uniform(-1.0, 1.0, size=(take, model.d_in))
        else:
            raw, _ = tasks.gen_checkerboard(probe_rng, take, config.grid)
            x = tasks.centered(raw)
        _, cache = fff.forward_masked(model, x)
        ledger.record_batch(cache.route)
        remaining -= take
    return ledger


def ledger_report(ledger, depth: int) -> dict:
    emp = analysis.empirical_leaf_distribution(ledger)
    pareto = analysis.build_tree_prior(analysis.pareto_target(2.0, fff.num_leaves(depth)))
    uniform = analysis.build_tree_prior(analysis.uniform_target(fff.num_leaves(depth)))
    return {
        "samples": ledger.total,
        "max_path_share": analysis.max_path_share(ledger),
        "dead_leaf_fraction": analysis.dead_leaf_fraction(ledger),
        "uniform_share_bound": 3.0 * 2.0 ** (-depth),
        "tv_to_pareto_2.0": analysis.prior_distance(emp, pareto),
        "tv_to_uniform": analysis.prior_distance(emp, uniform),
    }


def cmd_train(config: train.TrainConfig, out_dir: Path, config_path) -> None:
    result = train.run_training(config, out_dir=out_dir)
    if result.final_eval is not None:
        ev = result.final_eval
        extra = f" ppl {ev.ppl:.4f}" if ev.ppl is not None else ""
        print(f"train done: eval loss {ev.loss:.6f} acc {ev.acc:.4f}{extra}")
    else:
        print("train done: 0 steps, wrote init checkpoint")


def cmd_eval(config: train.TrainConfig, out_dir: Path, config_path) -> None:
    model = serialize.read_checkpoint(resolve_checkpoint(config, config_path))
    if config.task == "checkerboard":
        _, _, eval_rng = train.rng_streams(config.seed, 3)
        raw, eval_y = tasks.gen_checkerboard(eval_rng, config.eval_size, config.grid)
        result = train.eval_checkerboard(model, tasks.centered(raw), eval_y)
    else:
        lm_data = train.build_lm_data(config)
        result = train.eval_lm(model, lm_data.eval_tokens, config.context)
    doc = {"loss": result.loss, "acc": result.acc, "ppl": result.ppl}
    if result.ledgers:
        doc["utilization"] = ledger_report(result.ledgers[0], result.ledgers[0].depth)
        write_json(out_dir / "utilization.json", analysis.utilization_to_json(result.ledgers[0]))
    write_json(out_dir / "report.json", doc)
    print(f"eval: loss {result.loss:.17g} acc {result.acc:.4f}")


def cmd_analyze(config: train.TrainConfig, out_dir: Path, config_path) -> None:
    """Utilization statistics for a checkpoint, or for a fresh seeded model
    when no checkpoint is reachable (initialization-scheme check)."""
    try:
        model = serialize.read_checkpoint(resolve_checkpoint(config, config_path))
        source = "checkpoint"
    except ValueError:
        model, _ = fresh_model(config)
        source = "fresh_init"
    if isinstance(model, lm.TinyLMParams):
        lm_data = train.build_lm_data(config)
        result = train.eval_lm(model, lm_data.eval_tokens, config.context)
        if not result.ledgers:
            raise ValueError("model has no tree-routed block to analyze")
        ledger = result.ledgers[0]
        depth = ledger.depth
    else:
        forest = require_forest(model)
        ledger = probe_ledger(forest, config)
        depth = forest.depth
    doc = ledger_report(ledger, depth)
    doc["model_source"] = source
    write_json(out_dir / "report.json", doc)
    write_json(out_dir / "utilization.json", analysis.utilization_to_json(ledger))
    print(
        f"analyze[{source}]: max share {doc['max_path_share']:.4f} "
        f"dead {doc['dead_leaf_fraction']:.4f}"
    )


def cmd_prune(config: train.TrainConfig, out_dir: Path, config_path) -> None:
    """Post-training static pruning sweep on the checkerboard task."""
    if config.task != "checkerboard":
        raise ValueError("prune sweep is defined for the checkerboard task")
    model = require_forest(serialize.read_checkpoint(resolve_checkpoint(config, config_path)))
    ledger = probe_ledger(model, config)
    _, _, eval_rng = train.rng_streams(config.seed, 3)
    raw, eval_y = tasks.gen_checkerboard(eval_rng, config.eval_size, config.grid)
    eval_x = tasks.centered(raw)
    base_logits, _ = fff.forward_sequential(model, eval_x)
    baseline = tasks.accuracy(base_logits, eval_y)
    rows = []
    for fraction in config.prune_fractions:
        mask = pruning.build_prune_mask(ledger, fraction)
        logits, _ = pruning.forward_pruned(model, eval_x, mask, mode=config.pruned_mode)
        acc = tasks.accuracy(logits, eval_y)
        rows.append({
            "fraction": fraction,
            "pruned_leaves": mask.pruned_leaf_count(),
            "accuracy": acc,
            "delta_vs_unpruned": acc - baseline,
        })
    write_json(out_dir / "report.json", {
        "baseline_accuracy": baseline,
        "pruned_mode": config.pruned_mode,
        "sweep": rows,
    })
    summary = ", ".join(f"{r['fraction']:.2f}:{r['accuracy']:.4f}" for r in rows)
    print(f"prune: baseline {baseline:.4f} | {summary}")


def cmd_bench(config: train.TrainConfig, out_dir: Path, config_path) -> None:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = fff.num_nodes(config.bench_depth)
    trees = max(1, -(-config.bench_width // n))  # ceil: total width >= bench_width
    result = efficiency.bench_layer(
        rng,
        trees,
        config.bench_depth,
        config.d_model,
        config.d_model,
        batch=config.bench_batch,
        repeats=config.bench_repeats,
        dense_sanity=True,
    )
    report = efficiency.sparsity_report(
        trees, config.bench_depth, config.d_model, result["d_ff_dense"]
    )
    rows = efficiency.depth_sweep(
        rng,
        total_nodes=trees * n,
        d_in=config.d_model,
        d_out=config.d_model,
        batch=config.bench_batch,
        repeats=config.bench_repeats,
    )
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write(efficiency.sweep_to_csv(rows))
    doc = report.to_json()
    doc["timing"] = result
    write_json(out_dir / "report.json", doc)
    print(
        f"bench: P={trees} D={config.bench_depth} width {result['d_ff_dense']} "
        f"speedup {result['speedup']:.2f}x "
        f"(sparse {result['sparse_mean_ms']:.3f} ms, dense {result['dense_mean_ms']:.3f} ms)"
    )


def cmd_export_boundaries(config: train.TrainConfig, out_dir: Path, config_path) -> None:
    model = require_forest(serialize.read_checkpoint(resolve_checkpoint(config, config_path)))
    transform = boundaries.CENTERED if config.task == "checkerboard" else boundaries.IDENTITY
    segments = boundaries.boundary_segments(model, transform=transform)
    with open(out_dir / "boundaries.csv", "w") as fh:
        fh.write(boundaries.segments_to_csv(segments))
    rasters = boundaries.raster_leaf_ids(model, config.boundary_resolution, transform=transform)
    maxval = max(1, fff.num_leaves(model.depth) - 1)
    for p in range(model.trees):
        with open(out_dir / f"tree{p}.pgm", "w") as fh:
            fh.write(boundaries.raster_to_pgm(rasters[p], maxval=maxval))
    write_json(out_dir / "palette.json", boundaries.palette_json(model))
    print(f"export-boundaries: {len(segments)} segments, {model.trees} rasters")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "prune": cmd_prune,
    "bench": cmd_bench,
    "export-boundaries": cmd_export_boundaries,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treeff",
        description="Tree-routed sparse feed-forward experiments",
    )
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory (default run/<verb>)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override, repeatable, applied after the file",
    )
    parser.add_argument("--seed", type=int, default=None, help="shortcut for --set seed=N")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = [parse_override(item) for item in args.overrides]
        config = load_config(args.config, overrides, args.seed)
        out_dir = Path(args.out) if args.out else Path("run") / args.verb
        write_resolved(out_dir, config)
        COMMANDS[args.verb](config, out_dir, args.config)
    except DivergenceError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
