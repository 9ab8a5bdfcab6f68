"""Schedule, optimizer, masking, training loops, and metrics."""

import math

import numpy as np
import pytest

from oracles import adamw_scalar, fbeta_closed_form

from fome import model, trainer
from fome.errors import ConfigError, DataError, TrainError
from fome.model import ParameterStore, preset
from fome.numerics import Tensor
from fome.preprocess import PatchGrid
from fome.rng import Rng
from fome.trainer import (
    AdamW,
    MetricsReport,
    TrainConfig,
    classification_metrics,
    compute_metrics,
    evaluate_impute,
    fbeta,
    finetune_classify,
    forecast_samples_from_grid,
    lr_at,
    make_impute_samples,
    make_mask_plan,
    mean_imputation,
    missing_patches_from_sample_mask,
    persistence_forecast,
    pretrain,
    regression_metrics,
    scale_schedule,
    split_blocks,
)


class TestSchedule:
    def test_published_endpoints_exact(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 2e-6
        assert lr_at(10_960, cfg) == 5e-5
        assert lr_at(1_096_000, cfg) == 5e-9

    def test_clamped_beyond_total(self):
        cfg = TrainConfig()
        assert lr_at(2_000_000, cfg) == cfg.lr_final

    def test_continuous_at_warmup_boundary(self):
        cfg = TrainConfig()
        left = lr_at(cfg.warmup_steps, cfg)
        just_after = cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (
            1.0 + math.cos(math.pi * 1e-9)
        )
        assert abs(left - cfg.lr_peak) < 1e-12
        assert abs(just_after - cfg.lr_peak) < 1e-12

    def test_warmup_is_linear(self):
        cfg = TrainConfig()
        half = lr_at(cfg.warmup_steps // 2, cfg)
        expected = cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * (
            (cfg.warmup_steps // 2) / cfg.warmup_steps
        )
        assert abs(half - expected) < 1e-18

    def test_decay_is_monotone(self):
        cfg = TrainConfig()
        steps = np.linspace(cfg.warmup_steps, cfg.total_steps, 50, dtype=int)
        values = [lr_at(int(s), cfg) for s in steps]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_scale_schedule_keeps_ratio(self):
        cfg = scale_schedule(TrainConfig(), 2000)
        assert cfg.total_steps == 2000
        assert cfg.warmup_steps == 20  # 1% of total, as in the full recipe
        with pytest.raises(ConfigError):
            scale_schedule(TrainConfig(), 1)


class TestAdamW:
    def cfg(self, **kw):
        base = dict(beta1=0.9, beta2=0.99, adam_eps=1e-6, weight_decay=0.0)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_grad_zero_state_no_decay_is_identity(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamW({"p": p}, self.cfg())
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_matches_scalar_oracle(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = AdamW({"p": p}, self.cfg())
        opt.step(0.1)
        expected, _, _ = adamw_scalar(1.0, 1.0, 0.1, 0.9, 0.99, 1e-6, 0.0)
        assert abs(p.data[0] - expected) < 1e-12

    def test_two_steps_match_scalar_oracle(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        opt = AdamW({"p": p}, self.cfg())
        ref_p, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate([0.3, -0.7], start=1):
            p.grad = np.array([g])
            opt.step(0.05)
            ref_p, m, v = adamw_scalar(ref_p, g, 0.05, 0.9, 0.99, 1e-6, 0.0, m, v, t)
        assert abs(p.data[0] - ref_p) < 1e-12

    def test_pure_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        opt = AdamW({"p": p}, self.cfg(weight_decay=1e-2))
        opt.step(0.1)
        assert p.data[0] == 2.0 * (1.0 - 0.1 * 1e-2)

    def test_nonfinite_gradient_named(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        opt = AdamW({"layer.weight": p}, self.cfg())
        with pytest.raises(TrainError, match="layer.weight"):
            opt.step(0.1)

    def test_grads_cleared_after_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.5])
        opt = AdamW({"p": p}, self.cfg())
        opt.step(0.1)
        assert p.grad is None


class TestMaskPlan:
    def test_exact_count_and_uniqueness(self):
        plan = make_mask_plan(4, 15, 0.40, Rng(3))
        assert len(plan) == 24
        assert len(set(plan.slots)) == 24
        for c, p in plan:
            assert 0 <= c < 4 and 0 <= p < 15

    def test_column_mode_masks_whole_columns(self):
        plan = make_mask_plan(3, 10, 0.40, Rng(5), mode="column")
        assert len(plan) == 12  # round(0.4 * 10) = 4 columns x 3 channels
        columns = {p for _, p in plan}
        assert len(columns) == 4
        for col in columns:
            assert all((c, col) in set(plan.slots) for c in range(3))

    def test_stream_determinism(self):
        a = make_mask_plan(4, 15, 0.4, Rng(9))
        b = make_mask_plan(4, 15, 0.4, Rng(9))
        c = make_mask_plan(4, 15, 0.4, Rng(10))
        assert a.slots == b.slots
        assert a.slots != c.slots

    def test_ratio_bounds(self):
        with pytest.raises(ConfigError):
            make_mask_plan(2, 5, 0.0, Rng(0))
        with pytest.raises(ConfigError):
            make_mask_plan(2, 5, 1.0, Rng(0))


class TestMetrics:
    def test_perfect_binary_confusion(self):
        report = classification_metrics([0] * 5 + [1] * 5, [0] * 5 + [1] * 5, 2)
        assert report.confusion == [[5, 0], [0, 5]]
        for value in (report.accuracy, report.precision, report.recall,
                      report.f1, report.f2):
            assert value == 1.0

    def test_textbook_binary_counts(self):
        # TP=2, FP=1, FN=2, TN=5 for class 1
        labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        preds = [1, 1, 0, 0, 1, 0, 0, 0, 0, 0]
        report = classification_metrics(preds, labels, 2)
        row = report.per_class["1"]
        assert abs(row["precision"] - 2 / 3) < 1e-12
        assert abs(row["recall"] - 0.5) < 1e-12
        assert abs(row["f1"] - fbeta_closed_form(2, 1, 2, 1.0)) < 1e-12
        assert abs(row["f2"] - fbeta_closed_form(2, 1, 2, 2.0)) < 1e-12
        assert abs(row["f1"] - 0.5714285714285715) < 1e-12
        assert abs(row["f2"] - 0.5263157894736842) < 1e-12

    def test_fbeta_against_closed_form_sweep(self, rng):
        for _ in range(50):
            tp, fp, fn = rng.integers(1, 30, size=3)
            p = tp / (tp + fp)
            r = tp / (tp + fn)
            for beta in (1.0, 2.0):
                assert abs(fbeta(p, r, beta) - fbeta_closed_form(tp, fp, fn, beta)) < 1e-12

    def test_micro_accuracy_is_trace_over_total(self, rng):
        preds = rng.integers(0, 3, size=60)
        labels = rng.integers(0, 3, size=60)
        report = classification_metrics(preds, labels, 3)
        confusion = np.array(report.confusion)
        assert report.accuracy == np.trace(confusion) / 60
        for value in (report.precision, report.recall, report.f1, report.f2):
            assert 0.0 <= value <= 1.0

    def test_single_class_degenerate(self):
        report = classification_metrics([0, 0, 0], [0, 0, 0], 2)
        assert report.accuracy == 1.0
        assert report.f1 == 1.0 and report.f2 == 1.0

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            classification_metrics([0, 1], [0, 2], 2)

    def test_regression_zero_on_equal(self, rng):
        x = rng.standard_normal(40)
        report = regression_metrics(x, x.copy())
        assert report.mae == 0.0 and report.mse == 0.0

    def test_compute_metrics_dispatch(self):
        classify = compute_metrics([0, 1], labels=[0, 1])
        assert classify.task == "classification" and classify.accuracy == 1.0
        regress = compute_metrics([1.0, 2.0], targets=[1.0, 3.0])
        assert regress.mae == 0.5
        with pytest.raises(ConfigError):
            compute_metrics([0])

    def test_report_json_drops_missing_fields(self):
        report = MetricsReport(task="regression", mae=0.5, mse=1.0)
        text = report.to_json()
        assert '"mae"' in text and '"confusion"' not in text


class TestSplits:
    def test_six_two_two(self):
        train, val, test = split_blocks(10)
        assert (len(train), len(val), len(test)) == (6, 2, 2)
        assert list(train) + list(val) + list(test) == list(range(10))

    def test_contiguity(self):
        train, val, test = split_blocks(23)
        assert train.stop == val.start and val.stop == test.start


def tiny_corpus(n=6, channels=2, patches=5, length=8, seed=0):
    gen = Rng(seed)
    out = []
    t = np.arange(patches * length) / 250.0
    for i in range(n):
        phase = float(gen.uniforms(1)[0]) * 2 * np.pi
        x = np.sin(2 * np.pi * 20.0 * t + phase)
        sig = np.stack([x, 0.5 * x]) + 0.05 * gen.normals(channels * patches * length).reshape(channels, -1)
        out.append(PatchGrid(sig.reshape(channels, patches, length), length, 250.0))
    return out


def flat_lr_config(**kw):
    fields = dict(batch_size=2, grad_accum=1, seed=11, lr_init=1e-3, lr_peak=1e-3,
                  lr_final=1e-3, warmup_steps=1, total_steps=100)
    fields.update(kw)
    return TrainConfig(**fields)


class TestPretrain:
    def test_empty_corpus_rejected(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=0)
        with pytest.raises(ConfigError):
            pretrain([], params, cfg, TrainConfig(), steps=1)

    def test_trace_rows_and_mask_count(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=0)
        trace = pretrain(tiny_corpus(), params, cfg, flat_lr_config(), steps=4)
        assert [row[0] for row in trace] == [1, 2, 3, 4]
        assert all(np.isfinite(row[2]) for row in trace)

    def test_seeded_run_is_bitwise_reproducible(self, tmp_path):
        cfg = preset("tiny")
        traces, blobs = [], []
        for run in range(2):
            params = ParameterStore.initialize(cfg, seed=3)
            trace = pretrain(tiny_corpus(), params, cfg, flat_lr_config(seed=5),
                             steps=6, checkpoint_dir=str(tmp_path / f"run{run}"))
            traces.append(trace)
            blobs.append((tmp_path / f"run{run}" / "final.fckp").read_bytes())
        assert traces[0] == traces[1]
        assert blobs[0] == blobs[1]

    def test_gradient_accumulation_equivalence(self):
        cfg = preset("tiny")
        corpus = tiny_corpus(n=8)
        runs = {}
        for label, batch, accum in (("micro", 2, 4), ("concat", 8, 1)):
            params = ParameterStore.initialize(cfg, seed=9)
            tcfg = flat_lr_config(batch_size=batch, grad_accum=accum, seed=13)
            pretrain(corpus, params, cfg, tcfg, steps=4 if label == "micro" else 1)
            runs[label] = params
        for name, tensor in runs["micro"].items():
            other = runs["concat"][name].data
            denom = np.abs(other) + 1e-12
            assert np.max(np.abs(tensor.data - other) / denom) < 1e-10, name

    def test_loss_scope_all_differs_from_masked(self):
        cfg = preset("tiny")
        corpus = tiny_corpus(n=4)
        traces = {}
        for scope in ("masked_only", "all"):
            params = ParameterStore.initialize(cfg, seed=2)
            traces[scope] = pretrain(corpus, params, cfg,
                                     flat_lr_config(loss_scope=scope), steps=2)
        assert traces["masked_only"] != traces["all"]

    def test_checkpoint_cadence(self, tmp_path):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=0)
        tcfg = flat_lr_config(checkpoint_every=2, grad_accum=1)
        pretrain(tiny_corpus(n=4), params, cfg, tcfg, steps=4,
                 checkpoint_dir=str(tmp_path))
        assert (tmp_path / "step-000002.fckp").exists()
        assert (tmp_path / "step-000004.fckp").exists()
        assert (tmp_path / "final.fckp").exists()


def labeled_dataset(n=20, length=8, patches=4, seed=4):
    gen = Rng(seed)
    data = []
    t = np.arange(patches * length) / 250.0
    for i in range(n):
        label = i % 2
        freq = 10.0 if label == 0 else 60.0
        x = np.sin(2 * np.pi * freq * t + float(gen.uniforms(1)[0]))
        sig = np.stack([x, x[::-1]])
        data.append((PatchGrid(sig.reshape(2, patches, length), length, 250.0), label))
    return data


class TestFinetuneClassify:
    def test_probe_freezes_backbone_bitwise(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=21)
        before = {k: v.data.copy() for k, v in params.items()}
        finetune_classify(labeled_dataset(), params, cfg, flat_lr_config(seed=3),
                          n_classes=2, steps=4, mode="probe")
        for name, old in before.items():
            assert np.array_equal(params[name].data, old), name
        assert "head.cls.w1" in params

    def test_full_mode_moves_backbone(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=22)
        before = params["temporal0.attn.wq"].data.copy()
        finetune_classify(labeled_dataset(), params, cfg, flat_lr_config(seed=3),
                          n_classes=2, steps=4, mode="full")
        assert not np.array_equal(params["temporal0.attn.wq"].data, before)

    def test_bad_label_rejected(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=23)
        data = labeled_dataset(n=10)
        data[3] = (data[3][0], 7)
        with pytest.raises(DataError):
            finetune_classify(data, params, cfg, flat_lr_config(), n_classes=2, steps=1)

    def test_report_fields_present(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=24)
        report = finetune_classify(labeled_dataset(), params, cfg, flat_lr_config(seed=8),
                                   n_classes=2, steps=2)
        assert report.task == "classification"
        assert report.confusion is not None
        assert report.notes["mode"] == "full"

    def test_checkpoint_cadence_and_best_validation(self, tmp_path):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=25)
        tcfg = flat_lr_config(seed=9, checkpoint_every=2, grad_accum=1)
        finetune_classify(labeled_dataset(), params, cfg, tcfg, n_classes=2,
                          steps=4, checkpoint_dir=str(tmp_path))
        assert (tmp_path / "step-000002.fckp").exists()
        assert (tmp_path / "step-000004.fckp").exists()
        assert (tmp_path / "best-validation.fckp").exists()
        assert (tmp_path / "final.fckp").exists()


class TestForecast:
    def test_sample_windows(self, rng):
        grid = PatchGrid(rng.standard_normal((2, 10, 8)), 8, 250.0)
        samples = forecast_samples_from_grid(grid, context_patches=3, horizon_patches=2)
        assert len(samples) == 2
        assert samples[0].context.n_patches == 3
        assert samples[0].target.shape == (2, 16)
        np.testing.assert_array_equal(
            samples[0].target, grid.patches[:, 3:5].reshape(2, 16)
        )

    def test_too_short_grid(self, rng):
        grid = PatchGrid(rng.standard_normal((1, 3, 8)), 8, 250.0)
        with pytest.raises(ConfigError):
            forecast_samples_from_grid(grid, 3, 2)

    def test_persistence_repeats_last_patch(self, rng):
        grid = PatchGrid(rng.standard_normal((2, 5, 8)), 8, 250.0)
        sample = forecast_samples_from_grid(grid, 3, 2)[0]
        base = persistence_forecast(sample, 2)
        np.testing.assert_array_equal(base[:, :8], sample.context.patches[:, -1])
        np.testing.assert_array_equal(base[:, 8:], sample.context.patches[:, -1])


class TestImpute:
    def test_whole_patch_missing_rule(self):
        missing_values = np.zeros((2, 40), dtype=bool)
        missing_values[0, 17] = True  # one missing sample inside patch 2
        patch_level = missing_patches_from_sample_mask(missing_values, patch_len=8)
        assert patch_level.shape == (2, 5)
        assert patch_level[0].tolist() == [False, False, True, False, False]
        assert not patch_level[1].any()

    def test_make_samples_ratio(self, rng):
        grids = [PatchGrid(rng.standard_normal((2, 10, 8)), 8, 250.0)]
        samples = make_impute_samples(grids, 0.40, Rng(7))
        assert samples[0].missing.sum() == 8  # round(0.4 * 20)

    def test_mean_imputation_fills_channel_mean(self, rng):
        grid = PatchGrid(rng.standard_normal((1, 4, 8)), 8, 250.0)
        missing = np.array([[False, True, False, False]])
        sample = trainer.ImputeSample(grid=grid, missing=missing)
        filled = mean_imputation(sample)
        observed_mean = grid.patches[0, [0, 2, 3]].mean()
        np.testing.assert_allclose(filled[0, 1], observed_mean)
        np.testing.assert_array_equal(filled[0, 0], grid.patches[0, 0])

    def test_no_missing_reported(self):
        cfg = preset("tiny")
        params = ParameterStore.initialize(cfg, seed=31)
        params.add(model.reconstruct_head_shapes(cfg), seed=32)
        grids = tiny_corpus(n=2)
        samples = [trainer.ImputeSample(grid=g, missing=np.zeros((2, 5), dtype=bool))
                   for g in grids]
        report = evaluate_impute(samples, params, cfg)
        assert report.notes.get("no-missing") is True
        assert report.mae is None


class TestLossTrace:
    def test_csv_format(self, tmp_path):
        path = tmp_path / "trace.csv"
        trainer.write_loss_trace([(1, 1e-3, 0.5), (2, 2e-3, 0.25)], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,lr,loss"
        assert lines[1] == "1,0.001,0.5"
        assert len(lines) == 3
