"""Optimizers, schedules, the training loop, and the drift experiment."""

import csv
import math

import numpy as np
import pytest

from treeff import fff, serialize, train
from treeff.numeric import DivergenceError
from treeff.params import pair_params_with_grads


def reference_adamw(params, grad_steps, lr, beta1, beta2, eps, wd):
    """Independently coded AdamW: recompute moments from the full gradient
    history each step instead of carrying running state."""
    p = params.copy()
    history = []
    for t, g in enumerate(grad_steps, start=1):
        history.append(g)
        weights = np.array([beta1 ** (t - k) for k in range(1, t + 1)])
        m = (1 - beta1) * sum(w * gk for w, gk in zip(weights, history))
        weights2 = np.array([beta2 ** (t - k) for k in range(1, t + 1)])
        v = (1 - beta2) * sum(w * gk * gk for w, gk in zip(weights2, history))
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
    return p


class TestOptimizers:
    def test_adamw_matches_reference(self):
        rng = np.random.default_rng(0)
        start = rng.normal(size=7)
        grads = [rng.normal(size=7) for _ in range(5)]
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.95, 1e-8, 0.01
        param = start.copy()
        opt = train.AdamW(lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        for g in grads:
            opt.step([("p", param, g.copy())])
        expect = reference_adamw(start, grads, lr, b1, b2, eps, wd)
        assert np.max(np.abs(param - expect)) <= 1e-12

    def test_adamw_first_step_sign_consistent(self):
        g = np.array([0.5, -2.0, 1e-3])
        param = np.zeros(3)
        train.AdamW(0.01, weight_decay=0.0).step([("p", param, g)])
        # bias correction makes the first step ~ lr * sign(g)
        assert np.allclose(param, -0.01 * np.sign(g), atol=1e-4)

    def test_adamw_zero_grads_no_decay_is_identity(self):
        param = np.array([1.0, -2.0, 3.0])
        before = param.copy()
        opt = train.AdamW(0.1, weight_decay=0.0)
        for _ in range(3):
            opt.step([("p", param, np.zeros(3))])
        assert np.array_equal(param, before)

    def test_adamw_degenerate_betas(self):
        g = np.array([2.0, -0.5])
        param = np.zeros(2)
        train.AdamW(0.1, beta1=0.0, beta2=0.0, eps=1e-8, weight_decay=0.0).step([("p", param, g)])
        assert np.allclose(param, -0.1 * g / (np.abs(g) + 1e-8), atol=0, rtol=1e-15)

    def test_adamw_state_is_per_name(self):
        a, b = np.zeros(2), np.zeros(2)
        opt = train.AdamW(0.1, weight_decay=0.0)
        opt.step([("a", a, np.ones(2)), ("b", b, -np.ones(2))])
        assert np.allclose(a, -b)

    def test_sgd(self):
        param = np.array([1.0, 2.0])
        train.SGD(0.5).step([("p", param, np.array([0.2, -0.2]))])
        assert np.allclose(param, [0.9, 2.1])

    def test_adamw_monotone_on_quadratic(self):
        # smoke property: after the moment warm-up, plain AdamW walks a 1-D
        # quadratic monotonically toward the minimum until it reaches the
        # lr-sized band around it, where the normalized step keeps it bouncing
        lr = 0.05
        x = np.array([5.0])
        opt = train.AdamW(lr, weight_decay=0.0)
        trace = []
        for _ in range(200):
            opt.step([("x", x, x.copy())])
            trace.append(abs(float(x[0])))
        in_band = [i for i, v in enumerate(trace) if v < lr]
        assert in_band, "never reached the minimum's neighbourhood"
        descent = trace[10 : in_band[0]]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(descent, descent[1:]))
        assert all(v < 2 * lr for v in trace[in_band[0] :])


class TestClipAndSchedule:
    def test_clip_scales_to_max_norm(self):
        g1, g2 = np.array([3.0, 0.0]), np.array([0.0, 4.0])
        triples = [("a", np.zeros(2), g1), ("b", np.zeros(2), g2)]
        norm = train.clip_grad_norm(triples, max_norm=1.0)
        assert norm == pytest.approx(5.0)
        assert math.sqrt(np.sum(g1**2) + np.sum(g2**2)) == pytest.approx(1.0)

    def test_clip_leaves_small_grads_alone(self):
        g = np.array([0.3, 0.4])
        train.clip_grad_norm([("a", np.zeros(2), g)], max_norm=1.0)
        assert np.allclose(g, [0.3, 0.4])

    def test_clip_zero_max_disables(self):
        g = np.array([30.0, 40.0])
        norm = train.clip_grad_norm([("a", np.zeros(2), g)], max_norm=0.0)
        assert norm == pytest.approx(50.0)
        assert np.allclose(g, [30.0, 40.0])

    def test_warmup_then_constant(self):
        cfg = train.TrainConfig(lr=0.4, lr_schedule="constant", warmup_steps=10, steps=100)
        assert train.lr_at(cfg, 1) == pytest.approx(0.04)
        assert train.lr_at(cfg, 5) == pytest.approx(0.2)
        assert train.lr_at(cfg, 10) == pytest.approx(0.4)
        assert train.lr_at(cfg, 100) == pytest.approx(0.4)

    def test_cosine_decays_to_zero(self):
        cfg = train.TrainConfig(lr=0.4, lr_schedule="cosine", warmup_steps=10, steps=100)
        assert train.lr_at(cfg, 10) == pytest.approx(0.4)
        mid = train.lr_at(cfg, 55)
        assert 0.0 < mid < 0.4
        assert train.lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-12)
        values = [train.lr_at(cfg, s) for s in range(10, 101)]
        assert all(b <= a for a, b in zip(values, values[1:]))


class TestConfig:
    def test_unknown_key_suggests_nearest(self):
        with pytest.raises(ValueError, match="unknown config key 'depht'; did you mean 'depth'"):
            train.config_from_dict({"depht": 3})

    def test_roundtrip_and_tuple_coercion(self):
        cfg = train.TrainConfig(prune_fractions=(0.1, 0.2))
        back = train.config_from_dict(train.config_to_dict(cfg))
        assert back == cfg
        assert isinstance(back.prune_fractions, tuple)

    def test_wrongly_typed_values_rejected(self):
        for doc, message in [
            ({"depth": "banana"}, "config key 'depth' expects an integer, got 'banana'"),
            ({"steps": 25.5}, "expects an integer"),
            ({"seed": True}, "expects an integer"),
            ({"lr": "fast"}, "expects a number"),
            ({"task": 7}, "expects a string"),
            ({"tied_head": 1}, "expects true or false"),
            ({"prune_fractions": 0.5}, "list of numbers"),
            ({"prune_fractions": ["a"]}, "list of numbers"),
        ]:
            with pytest.raises(ValueError, match=message):
                train.config_from_dict(doc)

    def test_int_values_accepted_for_float_keys(self):
        cfg = train.config_from_dict({"lr": 1, "clip_norm": 0})
        assert cfg.lr == 1.0 and isinstance(cfg.lr, float)
        assert cfg.clip_norm == 0.0 and isinstance(cfg.clip_norm, float)

    def test_validation_errors(self):
        for doc, message in [
            ({"task": "sudoku"}, "unknown task"),
            ({"block": "conv"}, "unknown block"),
            ({"lr_schedule": "step"}, "unknown lr schedule"),
            ({"prune_fractions": [1.0]}, "prune fractions"),
        ]:
            with pytest.raises(ValueError, match=message):
                train.config_from_dict(doc)


def tiny_config(**overrides):
    base = dict(
        seed=3, block="fff", trees=2, depth=2, lr=0.02, lr_schedule="constant",
        warmup_steps=0, batch_size=64, steps=12, eval_cadence=6, eval_size=256,
        log_every=4,
    )
    base.update(overrides)
    return train.TrainConfig(**base)


class TestRunTraining:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_config(steps=0)
        result = train.run_training(cfg, out_dir=tmp_path)
        init_rng, _, _ = train.rng_streams(cfg.seed, 3)
        fresh = train.build_ff_block(cfg, init_rng, 2, 2)
        saved = serialize.read_checkpoint(tmp_path / "checkpoint.fff")
        for name in ("w_in", "b_in", "w_out", "b_out"):
            assert np.array_equal(getattr(saved, name), getattr(fresh, name))
        # header-only metrics file
        with open(tmp_path / "metrics.csv") as fh:
            lines = fh.read().splitlines()
        assert lines == [",".join(train.METRICS_HEADER)]
        assert result.final_eval is None

    def test_same_seed_bitwise_identical(self, tmp_path):
        a = train.run_training(tiny_config(), out_dir=tmp_path / "a")
        b = train.run_training(tiny_config(), out_dir=tmp_path / "b")
        assert a.metrics_rows == b.metrics_rows
        assert (tmp_path / "a" / "checkpoint.fff").read_bytes() == (
            tmp_path / "b" / "checkpoint.fff"
        ).read_bytes()

    def test_different_seed_differs(self):
        a = train.run_training(tiny_config(seed=1))
        b = train.run_training(tiny_config(seed=2))
        assert a.final_eval.loss != b.final_eval.loss

    def test_metrics_csv_layout(self, tmp_path):
        train.run_training(tiny_config(), out_dir=tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == train.METRICS_HEADER
        body = rows[1:]
        train_rows = [r for r in body if r[1] == "train"]
        eval_rows = [r for r in body if r[1] == "eval"]
        assert [r[0] for r in train_rows] == ["4", "8", "12"]
        assert [r[0] for r in eval_rows] == ["6", "12"]
        # floats round-trip at full precision
        loss = float(eval_rows[-1][2])
        assert f"{loss:.17g}" == eval_rows[-1][2]
        # tree-routed runs log utilization alongside eval loss
        assert eval_rows[-1][5] != "" and eval_rows[-1][6] != ""

    def test_divergence_reports_step(self):
        with pytest.raises(DivergenceError) as info:
            train.run_training(tiny_config(lr=1e6, clip_norm=0.0, steps=50))
        assert info.value.step is not None
        assert f"step {info.value.step}" in str(info.value)

    def test_checkpoint_reloads_and_evals(self, tmp_path):
        result = train.run_training(tiny_config(), out_dir=tmp_path)
        model = serialize.read_checkpoint(tmp_path / "checkpoint.fff")
        _, _, eval_rng = train.rng_streams(3, 3)
        from treeff import tasks

        raw, labels = tasks.gen_checkerboard(eval_rng, 256, 4)
        redo = train.eval_checkerboard(model, tasks.centered(raw), labels)
        assert redo.loss == result.final_eval.loss

    def test_lm_task_smoke(self):
        cfg = train.TrainConfig(
            seed=5, task="char_lm", block="fff", trees=2, depth=3, d_model=16,
            context=16, corpus_chars=4000, batch_size=16, steps=6, lr=3e-3,
            eval_cadence=0, log_every=0,
        )
        result = train.run_training(cfg)
        ev = result.final_eval
        assert math.isfinite(ev.loss) and ev.ppl == pytest.approx(math.exp(ev.loss))
        assert ev.ledgers and ev.ledgers[0].total > 0

    def test_moe_and_dense_blocks_train(self):
        for block in ("dense", "moe"):
            cfg = tiny_config(block=block, steps=30, lr=0.05)
            result = train.run_training(cfg)
            first = float(result.metrics_rows[0][2])
            assert result.final_eval.loss < first

    def test_loss_halves_at_defaults_for_every_block_kind(self):
        # heavyweight sanity on the real default recipe (2000 steps each):
        # from-init loss must at least halve for dense, fff, and moe
        from treeff import tasks

        for block in ("dense", "fff", "moe"):
            cfg = train.TrainConfig(seed=1, block=block, eval_cadence=0, log_every=0)
            init_rng, _, eval_rng = train.rng_streams(cfg.seed, 3)
            model = train.build_ff_block(cfg, init_rng, 2, 2)
            raw, labels = tasks.gen_checkerboard(eval_rng, cfg.eval_size, cfg.grid)
            init_loss = train.eval_checkerboard(model, tasks.centered(raw), labels).loss
            final_loss = train.run_training(cfg).final_eval.loss
            assert final_loss < 0.5 * init_loss, (block, init_loss, final_loss)

    def test_corpus_shared_across_model_seeds(self):
        a = train.build_lm_data(train.TrainConfig(seed=1, corpus_chars=2000))
        b = train.build_lm_data(train.TrainConfig(seed=2, corpus_chars=2000))
        assert np.array_equal(a.train_tokens, b.train_tokens)
        c = train.build_lm_data(train.TrainConfig(corpus_seed=99, corpus_chars=2000))
        assert not np.array_equal(a.train_tokens, c.train_tokens)

    def test_eval_split_too_short(self):
        data = train.build_lm_data(train.TrainConfig(corpus_chars=2000))
        with pytest.raises(ValueError, match="shorter than one context"):
            train.eval_lm(
                train.run_training(
                    train.TrainConfig(
                        task="char_lm", d_model=16, context=16, corpus_chars=2000,
                        batch_size=8, steps=0, trees=1, depth=1,
                    )
                ).model,
                data.eval_tokens[:4],
                context=16,
            )


class TestDriftExperiment:
    def test_identity_and_prediction(self):
        cfg = train.TrainConfig(
            seed=9, block="fff", trees=2, depth=2, optimizer="sgd", lr=0.05,
            drift_steps=12, drift_batch=512,
        )
        report = train.drift_experiment(cfg, tree=0, node=0)
        assert report.identity_gap <= 1e-12
        assert report.predicted.shape == (12,)
        # predicted IS the closed form, so it must match observed to precision
        assert np.max(np.abs(report.predicted - report.observed)) <= 1e-12
        assert report.sign_agreement == 1.0

    def test_requires_tree_block(self):
        with pytest.raises(ValueError, match="tree block"):
            train.drift_experiment(train.TrainConfig(block="dense"))
