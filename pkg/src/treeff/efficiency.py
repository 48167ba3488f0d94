"""Sparsity accounting, analytic FLOPs, and layer wall-clock benchmarks.

All FLOP figures count a multiply-accumulate as 2 FLOPs.  The analytic
model must agree exactly with the instrumented FlopCounter: both describe
one routing dot product plus one output accumulation at each of the
P*(D+1) visited nodes per sample.

Two sparsity normalizations are reported because "relative FLOPs" is
ambiguous: layer-relative compares the tree layer against a dense FF of
the same total width (one hidden unit per node), model-relative folds in
a fixed attention FLOP share that conditional routing cannot remove.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from treeff import baselines, fff
from treeff.numeric import FlopCounter


def mlp_block_sparsity(depth: int) -> float:
    """Fraction of a tree's nodes left untouched by one input: 1 - (D+1)/N."""
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    return 1.0 - (depth + 1) / fff.num_nodes(depth)


def fff_layer_flops(trees: int, depth: int, d_in: int, d_out: int, batch: int = 1) -> int:
    """Executed FLOPs of the sequential forward: P*(D+1) nodes per sample,
    each costing a d_in MAC dot product and a d_out MAC accumulation."""
    return 2 * batch * trees * (depth + 1) * (d_in + d_out)


def dense_ff_flops(d_in: int, d_hidden: int, d_out: int, batch: int = 1) -> int:
    """FLOPs of the two dense matmuls of a feed-forward block."""
    return 2 * batch * (d_in * d_hidden + d_hidden * d_out)


@dataclass
class EfficiencyReport:
    """Analytic sparsity/FLOPs for one layer geometry, plus optional timing."""

    trees: int
    depth: int
    d_in: int
    d_out: int
    d_ff_dense: int
    mlp_block_sparsity: float
    relative_flops_layer: float
    relative_flops_model: float
    overall_model_sparsity: float
    fff_flops_per_token: int
    dense_flops_per_token: int
    attention_flops_per_token: int
    timing: dict | None = None

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in (
            "trees", "depth", "d_in", "d_out", "d_ff_dense",
            "mlp_block_sparsity", "relative_flops_layer", "relative_flops_model",
            "overall_model_sparsity", "fff_flops_per_token",
            "dense_flops_per_token", "attention_flops_per_token",
        )}
        doc["timing"] = self.timing
        return doc


def sparsity_report(
    trees: int,
    depth: int,
    d_model: int,
    d_ff_dense: int,
    attention_flops_per_token: int = 0,
    d_out: int | None = None,
) -> EfficiencyReport:
    """Analytic EfficiencyReport for an FFF layer inside a model.

    d_model is the layer input width (d_out defaults to it, the usual
    residual-stream shape).  relative_flops_layer compares executed FLOPs
    against the dense FF of width d_ff_dense; the model-relative figure
    adds attention_flops_per_token to both sides of that ratio.
    """
    if min(trees, d_model, d_ff_dense) < 1 or depth < 0:
        raise ValueError("dims must be positive and depth >= 0")
    d_out = d_model if d_out is None else d_out
    fff_fl = fff_layer_flops(trees, depth, d_model, d_out)
    dense_fl = dense_ff_flops(d_model, d_ff_dense, d_out)
    rel_layer = fff_fl / dense_fl
    model_dense = dense_fl + attention_flops_per_token
    model_fff = fff_fl + attention_flops_per_token
    return EfficiencyReport(
        trees=trees,
        depth=depth,
        d_in=d_model,
        d_out=d_out,
        d_ff_dense=d_ff_dense,
        mlp_block_sparsity=mlp_block_sparsity(depth),
        relative_flops_layer=rel_layer,
        relative_flops_model=model_fff / model_dense,
        overall_model_sparsity=1.0 - model_fff / model_dense,
        fff_flops_per_token=fff_fl,
        dense_flops_per_token=dense_fl,
        attention_flops_per_token=attention_flops_per_token,
    )


def _time_calls(fn, repeats: int, warmup: int) -> tuple[float, float]:
    """Mean and std of wall-clock milliseconds over `repeats` timed calls."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.array(samples)
    return float(arr.mean()), float(arr.std())


def bench_layer(
    rng: np.random.Generator,
    trees: int,
    depth: int,
    d_in: int,
    d_out: int,
    batch: int = 32,
    repeats: int = 5,
    warmup: int = 2,
    dense_sanity: bool = False,
) -> dict:
    """Wall-clock of sequential sparse execution vs a width-matched dense FF.

    The dense block gets one hidden unit per tree node (d_ff = P*N), which
    matches per-unit parameter counts exactly.  Also verifies that the
    instrumented FLOP counter equals the analytic model, and optionally
    times a second identical dense block as a noise floor for the ratio.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    d_ff = trees * fff.num_nodes(depth)
    forest = fff.init_forest(rng, trees, depth, d_in, d_out)
    dense = baselines.init_dense(rng, d_in, d_ff, d_out)
    x = rng.uniform(-1.0, 1.0, size=(batch, d_in))

    counter = FlopCounter()
    fff.forward_sequential(forest, x, counter=counter)
    analytic = fff_layer_flops(trees, depth, d_in, d_out, batch)
    if counter.flops != analytic:
        raise AssertionError(
            f"instrumented FLOPs {counter.flops} != analytic {analytic}"
        )

    sparse_ms, sparse_std = _time_calls(
        lambda: fff.forward_sequential(forest, x, check=False), repeats, warmup
    )
    dense_ms, dense_std = _time_calls(
        lambda: baselines.dense_forward(dense, x, check=False), repeats, warmup
    )
    out = {
        "trees": trees,
        "depth": depth,
        "d_in": d_in,
        "d_out": d_out,
        "d_ff_dense": d_ff,
        "batch": batch,
        "repeats": repeats,
        "sparse_mean_ms": sparse_ms,
        "sparse_std_ms": sparse_std,
        "dense_mean_ms": dense_ms,
        "dense_std_ms": dense_std,
        "speedup": dense_ms / sparse_ms if sparse_ms > 0 else float("inf"),
        "executed_flops": counter.flops,
        "analytic_flops": analytic,
        "flops_ratio_dense_over_sparse": dense_ff_flops(d_in, d_ff, d_out, batch) / analytic,
    }
    if dense_sanity:
        dense2 = baselines.init_dense(rng, d_in, d_ff, d_out)
        ms2, _ = _time_calls(
            lambda: baselines.dense_forward(dense2, x, check=False), repeats, warmup
        )
        out["dense_vs_dense_ratio"] = dense_ms / ms2 if ms2 > 0 else float("inf")
    return out


def depth_sweep(
    rng: np.random.Generator,
    total_nodes: int = 4095,
    depths: range = range(0, 12),
    d_in: int = 64,
    d_out: int = 64,
    batch: int = 32,
    repeats: int = 5,
    warmup: int = 2,
) -> list[dict]:
    """Per-depth rows at a fixed node budget: deeper trees execute fewer FLOPs.

    rel_flops is the exact active fraction (D+1)/N, so the column decreases
    strictly with depth regardless of integer rounding in the tree count;
    wall-clock columns come from bench_layer with P = max(1, budget // N).
    """
    rows = []
    for depth in depths:
        n = fff.num_nodes(depth)
        trees = max(1, total_nodes // n)
        bench = bench_layer(
            rng, trees, depth, d_in, d_out, batch=batch, repeats=repeats, warmup=warmup
        )
        rows.append({
            "depth": depth,
            "sparsity": mlp_block_sparsity(depth),
            "rel_flops": (depth + 1) / n,
            "mean_ms": bench["sparse_mean_ms"],
            "std_ms": bench["sparse_std_ms"],
            "speedup": bench["speedup"],
        })
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    """CSV with the depth-sweep schema used by the bench verb."""
    lines = ["depth,sparsity,rel_flops,mean_ms,std_ms,speedup"]
    for r in rows:
        lines.append(
            f"{r['depth']},{r['sparsity']:.17g},{r['rel_flops']:.17g},"
            f"{r['mean_ms']:.17g},{r['std_ms']:.17g},{r['speedup']:.17g}"
        )
    return "\n".join(lines) + "\n"
