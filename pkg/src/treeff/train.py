"""Training loop, optimizers, and experiment configuration.

One TrainConfig drives every task/block combination.  Reproducibility is
the contract: all randomness flows from numpy SeedSequence children of
config.seed (plus a separate corpus seed so different model seeds train on
the same text), eval sets are fixed up front, and metrics are written with
full float precision, so identical configs produce identical artifacts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from treeff import analysis, baselines, fff, lm, serialize, tasks
from treeff.numeric import DivergenceError
from treeff.params import pair_params_with_grads

METRICS_HEADER = ["step", "split", "loss", "acc", "ppl", "max_path_share", "dead_leaf_frac"]


@dataclass
class TrainConfig:
    # experiment identity
    seed: int = 42
    task: str = "checkerboard"  # checkerboard | char_lm
    block: str = "fff"  # dense | fff | moe
    # tree block
    variant: str = "pre_gelu"  # pre_gelu | post_gelu
    trees: int = 4
    depth: int = 3
    # dense block
    d_hidden: int = 64
    # mixture block; d_expert 0 means "match the dense parameter count"
    experts: int = 8
    top_k: int = 2
    d_expert: int = 0
    # checkerboard task
    grid: int = 4
    # checkpoint to evaluate/analyze/prune; empty means "next to the config
    # file" for those verbs (train ignores this field)
    checkpoint: str = ""
    # char LM task
    d_model: int = 32
    n_blocks: int = 1
    context: int = 32
    corpus_chars: int = 50_000
    corpus_seed: int = 1234
    tied_head: bool = True
    # optimization; the default recipe is tuned so the dense checkerboard
    # baseline clears 0.95 accuracy in 2000 steps (large batch keeps the
    # early routing gradients quiet enough for tree blocks to train too)
    optimizer: str = "adamw"  # adamw | sgd
    lr: float = 0.1
    lr_schedule: str = "cosine"  # constant | cosine
    warmup_steps: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0  # 0 disables clipping
    batch_size: int = 4096
    steps: int = 2000
    # evaluation and logging
    eval_cadence: int = 200
    eval_size: int = 10_000
    log_every: int = 10
    # analysis / pruning / bench knobs (used by those verbs, kept in one
    # schema so every run records a complete resolved config)
    probe: str = "task"  # task | centered_uniform
    probe_samples: int = 100_000
    prune_fractions: tuple = (0.0, 0.25, 0.5, 0.75, 0.9)
    pruned_mode: str = "reroute"  # reroute | zero
    drift_steps: int = 100
    drift_batch: int = 10_000
    bench_batch: int = 512
    bench_repeats: int = 5
    bench_width: int = 2048
    bench_depth: int = 6
    boundary_resolution: int = 256

    def validate(self) -> None:
        checks = [
            (self.task in ("checkerboard", "char_lm"), f"unknown task {self.task!r}"),
            (self.block in ("dense", "fff", "moe"), f"unknown block {self.block!r}"),
            (self.variant in fff.VARIANTS, f"unknown variant {self.variant!r}"),
            (self.optimizer in ("adamw", "sgd"), f"unknown optimizer {self.optimizer!r}"),
            (self.lr_schedule in ("constant", "cosine"), f"unknown lr schedule {self.lr_schedule!r}"),
            (self.probe in ("task", "centered_uniform"), f"unknown probe {self.probe!r}"),
            (self.pruned_mode in ("reroute", "zero"), f"unknown pruned mode {self.pruned_mode!r}"),
            (self.trees >= 1 and self.depth >= 0, "trees must be >= 1 and depth >= 0"),
            (self.steps >= 0 and self.batch_size >= 1, "bad steps/batch_size"),
            (self.grid >= 1, "grid must be >= 1"),
            (all(0.0 <= f < 1.0 for f in self.prune_fractions), "prune fractions must lie in [0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)


def config_to_dict(config: TrainConfig) -> dict:
    doc = asdict(config)
    doc["prune_fractions"] = list(config.prune_fractions)
    return doc


CONFIG_VALUE_CHECKS = {
    "int": ("an integer", lambda v: isinstance(v, int) and not isinstance(v, bool)),
    "float": ("a number", lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)),
    "str": ("a string", lambda v: isinstance(v, str)),
    "bool": ("true or false", lambda v: isinstance(v, bool)),
}


def config_from_dict(doc: dict) -> TrainConfig:
    """Fail-closed: unknown keys and wrongly typed values are rejected."""
    import difflib

    known = {f.name: f.type for f in fields(TrainConfig)}
    for key in doc:
        if key not in known:
            close = difflib.get_close_matches(key, sorted(known), n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ValueError(f"unknown config key {key!r}{hint}")
    clean = dict(doc)
    if "prune_fractions" in clean:
        raw = clean["prune_fractions"]
        numeric = CONFIG_VALUE_CHECKS["float"][1]
        if not isinstance(raw, (list, tuple)) or not all(numeric(v) for v in raw):
            raise ValueError("config key 'prune_fractions' expects a list of numbers")
        clean["prune_fractions"] = tuple(float(v) for v in raw)
    for key, value in clean.items():
        if known[key] not in CONFIG_VALUE_CHECKS:
            continue
        label, accepts = CONFIG_VALUE_CHECKS[known[key]]
        if not accepts(value):
            raise ValueError(f"config key {key!r} expects {label}, got {value!r}")
        if known[key] == "float":
            clean[key] = float(value)
    config = TrainConfig(**clean)
    config.validate()
    return config


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, triples, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for _, param, grad in triples:
            param -= lr * grad


class AdamW:
    """Decoupled weight decay; bias-corrected moments."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state: dict = {}

    def step(self, triples, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, param, grad in triples:
            if name not in self.state:
                self.state[name] = (np.zeros_like(param), np.zeros_like(param))
            m, v = self.state[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param -= lr * (update + self.weight_decay * param)


def clip_grad_norm(triples, max_norm: float) -> float:
    """Scale all grads in place so the global L2 norm is <= max_norm."""
    total = 0.0
    for _, _, grad in triples:
        total += float(np.sum(grad * grad))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, _, grad in triples:
            grad *= scale
    return norm


def lr_at(config: TrainConfig, step: int) -> float:
    """Learning rate for 1-indexed update `step`."""
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if config.lr_schedule == "constant":
        return config.lr
    span = max(1, config.steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return AdamW(
        config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def build_ff_block(config: TrainConfig, rng, d_in: int, d_out: int):
    if config.block == "dense":
        return baselines.init_dense(rng, d_in, config.d_hidden, d_out)
    if config.block == "fff":
        return fff.init_forest(rng, config.trees, config.depth, d_in, d_out, variant=config.variant)
    if config.block == "moe":
        width = config.d_expert or baselines.match_expert_width(d_in, config.d_hidden, d_out, config.experts)
        return baselines.init_moe(rng, d_in, width, d_out, config.experts, config.top_k)
    raise ValueError(f"unknown block {config.block!r}")


@dataclass
class LMData:
    chars: list
    stoi: dict
    train_tokens: np.ndarray
    eval_tokens: np.ndarray


def build_lm_data(config: TrainConfig) -> LMData:
    """Corpus is keyed by corpus_seed only, so model seeds share the text."""
    corpus_rng = np.random.Generator(np.random.PCG64(config.corpus_seed))
    text = tasks.bracket_corpus(corpus_rng, config.corpus_chars)
    chars, stoi = tasks.build_vocab(text)
    tokens = tasks.encode(text, stoi)
    split = int(0.9 * tokens.size)
    return LMData(chars=chars, stoi=stoi, train_tokens=tokens[:split], eval_tokens=tokens[split:])


def rng_streams(seed: int, count: int):
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


@dataclass
class EvalResult:
    loss: float
    acc: float
    ppl: float | None
    ledgers: list  # UtilizationLedger per tree-routed block


def fresh_ledgers(model) -> list:
    out = []
    for block in _routed_blocks(model):
        out.append(analysis.UtilizationLedger(trees=block.trees, depth=block.depth))
    return out


def _routed_blocks(model) -> list:
    if isinstance(model, fff.ForestParams):
        return [model]
    if isinstance(model, lm.TinyLMParams):
        return [b.ff for b in model.blocks if isinstance(b.ff, fff.ForestParams)]
    return []


def eval_checkerboard(model, x: np.ndarray, labels: np.ndarray) -> EvalResult:
    logits, cache = lm.block_ff_forward(model, x)
    loss, _ = tasks.cross_entropy(logits, labels)
    ledgers = fresh_ledgers(model)
    if ledgers:
        ledgers[0].record_batch(cache.route)
    return EvalResult(loss=loss, acc=tasks.accuracy(logits, labels), ppl=None, ledgers=ledgers)


def eval_lm(model: lm.TinyLMParams, eval_tokens: np.ndarray, context: int, max_windows: int = 256, chunk: int = 64) -> EvalResult:
    starts = np.arange(0, eval_tokens.size - context - 1, context)[:max_windows]
    if starts.size == 0:
        raise ValueError("eval split shorter than one context window")
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    windows = eval_tokens[idx]
    ledgers = fresh_ledgers(model)
    total_nll, total_correct, total_tokens = 0.0, 0, 0
    for lo in range(0, windows.shape[0], chunk):
        piece = windows[lo : lo + chunk]
        xs, ys = piece[:, :-1], piece[:, 1:]
        logits, cache = lm.lm_forward(model, xs)
        flat = logits.reshape(-1, model.vocab)
        loss, _ = tasks.cross_entropy(flat, ys.reshape(-1))
        total_nll += loss * ys.size
        total_correct += int(np.sum(np.argmax(flat, axis=1) == ys.reshape(-1)))
        total_tokens += ys.size
        for ledger, route in zip(ledgers, lm.lm_route_masks(model, cache)):
            ledger.record_batch(route)
    mean_loss = total_nll / total_tokens
    return EvalResult(
        loss=mean_loss,
        acc=total_correct / total_tokens,
        ppl=tasks.perplexity(total_nll, total_tokens),
        ledgers=ledgers,
    )


@dataclass
class TrainResult:
    config: TrainConfig
    model: object
    final_eval: EvalResult | None
    train_ledgers: list
    eval_ledgers: list
    metrics_rows: list
    lm_data: LMData | None = None


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _metrics_row(step, split, loss=None, acc=None, ppl=None, share=None, dead=None):
    return [str(step), split] + [_format_cell(v) for v in (loss, acc, ppl, share, dead)]


def run_training(config: TrainConfig, out_dir: Path | None = None) -> TrainResult:
    """Train per config; optionally write metrics.csv / checkpoint.fff /
    utilization.json under out_dir.  Raises DivergenceError (with the step)
    if the loss goes non-finite."""
    config.validate()
    init_rng, data_rng, eval_rng = rng_streams(config.seed, 3)

    lm_data = None
    if config.task == "checkerboard":
        model = build_ff_block(config, init_rng, 2, 2)
        raw_x, eval_y = tasks.gen_checkerboard(eval_rng, config.eval_size, config.grid)
        eval_x = tasks.centered(raw_x)
    else:
        lm_data = build_lm_data(config)
        vocab = len(lm_data.chars)
        model = lm.init_lm(
            init_rng,
            vocab,
            config.context,
            config.d_model,
            config.n_blocks,
            lambda r: build_ff_block(config, r, config.d_model, config.d_model),
            tied=config.tied_head,
        )

    optimizer = make_optimizer(config)
    train_ledgers = fresh_ledgers(model)
    rows = []
    last_eval = None
    eval_ledgers = []

    def run_eval(step: int):
        nonlocal last_eval, eval_ledgers
        if config.task == "checkerboard":
            result = eval_checkerboard(model, eval_x, eval_y)
        else:
            result = eval_lm(model, lm_data.eval_tokens, config.context)
        last_eval = result
        eval_ledgers = result.ledgers
        share = analysis.max_path_share(result.ledgers[0]) if result.ledgers else None
        dead = analysis.dead_leaf_fraction(result.ledgers[0]) if result.ledgers else None
        rows.append(_metrics_row(step, "eval", result.loss, result.acc, result.ppl, share, dead))

    for step in range(1, config.steps + 1):
        # divergence is detected explicitly below, so numpy's overflow
        # warnings on the way there are pure noise
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                if config.task == "checkerboard":
                    raw, batch_y = tasks.gen_checkerboard(data_rng, config.batch_size, config.grid)
                    batch_x = tasks.centered(raw)
                    logits, cache = lm.block_ff_forward(model, batch_x)
                    loss, g_logits = tasks.cross_entropy(logits, batch_y)
                    acc = tasks.accuracy(logits, batch_y)
                    ppl = None
                    if train_ledgers:
                        train_ledgers[0].record_batch(cache.route)
                    grads, _ = lm.block_ff_backward(model, cache, g_logits)
                else:
                    xs, ys = tasks.sample_windows(data_rng, lm_data.train_tokens, config.batch_size, config.context)
                    logits, cache = lm.lm_forward(model, xs)
                    flat = logits.reshape(-1, model.vocab)
                    loss, g_flat = tasks.cross_entropy(flat, ys.reshape(-1))
                    acc = tasks.accuracy(flat, ys.reshape(-1))
                    ppl = math.exp(loss)
                    for ledger, route in zip(train_ledgers, lm.lm_route_masks(model, cache)):
                        ledger.record_batch(route)
                    grads = lm.lm_backward(model, cache, g_flat.reshape(logits.shape))
        except DivergenceError as err:
            raise DivergenceError(f"{err} at step {step}", step=step) from None

        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)

        triples = pair_params_with_grads(model, grads)
        if config.clip_norm > 0:
            clip_grad_norm(triples, config.clip_norm)
        optimizer.step(triples, lr=lr_at(config, step))

        if config.log_every > 0 and step % config.log_every == 0:
            rows.append(_metrics_row(step, "train", loss, acc, ppl))
        if config.eval_cadence > 0 and step % config.eval_cadence == 0 and step != config.steps:
            run_eval(step)

    if config.steps > 0:
        run_eval(config.steps)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            writer.writerows(rows)
        serialize.write_checkpoint(out_dir / "checkpoint.fff", model)
        ledger = eval_ledgers[0] if eval_ledgers else (train_ledgers[0] if train_ledgers else None)
        if ledger is not None:
            import json

            doc = analysis.utilization_to_json(ledger)
            doc["source"] = "final_eval_pass"
            with open(out_dir / "utilization.json", "w") as fh:
                json.dump(doc, fh, indent=1)

    return TrainResult(
        config=config,
        model=model,
        final_eval=last_eval,
        train_ledgers=train_ledgers,
        eval_ledgers=eval_ledgers,
        metrics_rows=rows,
        lm_data=lm_data,
    )


@dataclass
class DriftReport:
    predicted: np.ndarray  # per-step predicted change of the probed logit
    observed: np.ndarray  # actual per-step change
    identity_gap: float  # max |observed - (-lr (m^T g_w + g_b))|
    sign_agreement: float  # fraction of steps with matching drift sign


def drift_experiment(config: TrainConfig, tree: int = 0, node: int = 0) -> DriftReport:
    """Plain-SGD training of a tree block on the checkerboard stream while
    probing one node's mean routing logit.

    Checks two things per step: the exact SGD identity
    delta_mu = -lr * (m^T g_w + g_b) (algebra, so to float precision), and
    the predictive form reconstructed from recorded (gz, h) pairs.
    """
    if config.block != "fff":
        raise ValueError("drift experiment probes a tree block")
    init_rng, data_rng, probe_rng = rng_streams(config.seed, 3)
    model = build_ff_block(config, init_rng, 2, 2)
    probe_raw, _ = tasks.gen_checkerboard(probe_rng, config.drift_batch, config.grid)
    probe = analysis.DriftProbe.from_batch(tree, node, tasks.centered(probe_raw))
    optimizer = SGD(config.lr)

    predicted, observed, identity_gap = [], [], 0.0
    n = model.node_count()
    for _ in range(config.drift_steps):
        raw, y = tasks.gen_checkerboard(data_rng, config.drift_batch, config.grid)
        x = tasks.centered(raw)
        logits, cache = lm.block_ff_forward(model, x)
        loss, g_logits = tasks.cross_entropy(logits, y)
        grads = fff.backward(model, cache, g_logits)
        # per-sample logit gradients at the probed node (masked form keeps
        # the full (B, P, N) layout around in g via recompute)
        g_z = _per_sample_logit_grad(model, cache, g_logits)[:, tree, node]
        probe.record_step(g_z, x)

        mu_before = probe.mean_logit(model)
        g_w = grads.g_w_in[tree, node]
        g_b = grads.g_b_in[tree, node]
        closed_form = -config.lr * (float(probe.m @ g_w) + float(g_b))
        optimizer.step(pair_params_with_grads(model, grads))
        delta = probe.mean_logit(model) - mu_before
        identity_gap = max(identity_gap, abs(delta - closed_form))
        observed.append(delta)

    predicted = analysis.predict_drift(probe, config.lr)
    observed = np.array(observed)
    both = (predicted != 0) | (observed != 0)
    agree = np.sign(predicted[both]) == np.sign(observed[both])
    return DriftReport(
        predicted=predicted,
        observed=observed,
        identity_gap=identity_gap,
        sign_agreement=float(agree.mean()) if both.any() else 1.0,
    )


def _per_sample_logit_grad(model: fff.ForestParams, cache, g_logits: np.ndarray) -> np.ndarray:
    """(B, P, N) per-sample gradient at every routing logit (0 off-path)."""
    from treeff.numeric import gelu_prime

    p, n = model.trees, model.node_count()
    batch = g_logits.shape[0]
    w_out_flat = model.w_out.reshape(p * n, model.d_out)
    if model.variant == fff.PRE_GELU:
        g_out = g_logits
    else:
        g_out = g_logits * gelu_prime(cache.u)
    g_a = (g_out @ w_out_flat.T).reshape(batch, p, n)
    if model.variant == fff.PRE_GELU:
        return cache.route.mask * g_a * gelu_prime(cache.z)
    return cache.route.mask * g_a
