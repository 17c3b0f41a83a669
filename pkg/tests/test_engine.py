import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from boneage import engine
from boneage.engine import (
    EvalResult,
    TrainConfig,
    TrainHistory,
    early_stop_check,
    evaluate,
    loss_and_head_gradients,
    mae_metric,
    mse_gradient,
    mse_loss,
    train,
)
from boneage.errors import EmptyBatch, LengthMismatch, NonFiniteLoss
from boneage.models import HeadConfig, Regime, backbone_blob, build_model
from boneage.transforms import make_batch

from oracles import brute_mae, brute_mse, finite_difference_head_grads, max_relative_error, scan_stop_index

vectors = st.integers(1, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-300, 300), min_size=n, max_size=n),
        st.lists(st.floats(-300, 300), min_size=n, max_size=n),
    )
)


class TestMetrics:
    def test_mse_example(self):
        assert mse_loss([0, 0], [3, 4]) == 12.5

    def test_mae_example(self):
        assert mae_metric([10, 20], [12, 26]) == 4.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
    def test_identity_is_zero(self, x):
        assert mse_loss(x, x) == 0.0
        assert mae_metric(x, x) == 0.0

    @given(vectors)
    def test_match_brute_force(self, pair):
        pred, truth = pair
        assert mse_loss(pred, truth) == pytest.approx(brute_mse(pred, truth), abs=1e-9, rel=1e-12)
        assert mae_metric(pred, truth) == pytest.approx(brute_mae(pred, truth), abs=1e-9)

    def test_gradient_vs_finite_differences(self, rng):
        pred, truth = rng.normal(100, 30, 7), rng.normal(100, 30, 7)
        h = 1e-4
        numeric = []
        for i in range(7):
            up, down = pred.copy(), pred.copy()
            up[i] += h
            down[i] -= h
            numeric.append((mse_loss(up, truth) - mse_loss(down, truth)) / (2 * h))
        assert max_relative_error([mse_gradient(pred, truth)], [numeric]) < 1e-3

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            mse_loss([1, 2], [1])
        with pytest.raises(LengthMismatch):
            mae_metric([1], [1, 2])
        with pytest.raises(EmptyBatch):
            mse_loss([], [])
        with pytest.raises(EmptyBatch):
            mae_metric([], [])


class TestEarlyStopping:
    def test_single_epoch(self):
        assert early_stop_check([30], 10, 0.0) == (False, 0)

    def test_constant_history(self):
        history = [30.0] * 11
        for k in range(1, 11):
            assert not early_stop_check(history[:k], 10).stop
        assert early_stop_check(history, 10) == (True, 0)

    def test_strictly_decreasing_never_stops(self):
        history = [100.0 - 5 * i for i in range(15)]
        for k in range(1, 16):
            decision = early_stop_check(history[:k], 10)
            assert not decision.stop and decision.best_index == k - 1

    def test_min_delta(self):
        # 29.95 is not an improvement of more than 0.1 over 30
        assert early_stop_check([30, 29.95, 29.95], 2, 0.1) == (True, 0)
        assert early_stop_check([30, 29.95, 29.95], 2, 0.0) == (False, 1)

    def test_empty(self):
        with pytest.raises(ValueError):
            early_stop_check([], 3)

    @settings(max_examples=200)
    @given(st.lists(st.sampled_from([10.0, 11.0, 12.0, 12.5, 13.0, 20.0]), min_size=1, max_size=30),
           st.integers(1, 8), st.sampled_from([0.0, 0.5, 1.0]))
    def test_matches_scan_oracle(self, history, patience, min_delta):
        first_stop = next((k for k in range(1, len(history) + 1)
                           if early_stop_check(history[:k], patience, min_delta).stop), None)
        expected = scan_stop_index(history, patience, min_delta)
        assert first_stop == (None if expected is None else expected + 1)


def _records(manifest):
    return list(manifest.records)


class TestTrain:
    def test_history_contract(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL, seed=0)
        cfg = TrainConfig(max_epochs=3, patience=10, batch_size=8, seed=0)
        model, history = train(model, recs[:12], recs[12:], tiny_transforms, cfg)
        assert len(history.records) == 3
        assert [r.epoch for r in history.records] == [0, 1, 2]
        assert history.best_epoch == int(np.argmin(history.val_mae))
        for r in history.records:
            assert all(np.isfinite(v) and v >= 0 for v in (r.train_loss, r.train_mae, r.val_mae))
        assert not model.training

    def test_fifteen_epochs_when_improving(self, synth16, tiny_transforms, monkeypatch):
        values = iter(100.0 - i for i in range(100))
        monkeypatch.setattr(engine, "evaluate", lambda *a, **k: EvalResult(next(values), []))
        recs = _records(synth16)
        _, history = train(build_model("tiny_test", Regime.FROZEN), recs, recs, tiny_transforms, TrainConfig())
        assert len(history.records) == 15
        assert not history.stopped_early
        assert history.best_epoch == 14

    def test_stops_after_patience(self, synth16, tiny_transforms, monkeypatch):
        monkeypatch.setattr(engine, "evaluate", lambda *a, **k: EvalResult(30.0, []))
        recs = _records(synth16)
        _, history = train(build_model("tiny_test", Regime.FROZEN), recs, recs, tiny_transforms,
                           TrainConfig(max_epochs=15, patience=10))
        assert len(history.records) == 11
        assert history.stopped_early and history.best_epoch == 0

    def test_frozen_backbone_bitwise(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FROZEN, seed=0)
        before = backbone_blob(model)
        head_before = [p.detach().clone() for p in model.head_parameters()]
        train(model, recs[:12], recs[12:], tiny_transforms, TrainConfig(max_epochs=2, batch_size=4))
        assert backbone_blob(model) == before
        assert any(not torch.equal(a, b) for a, b in zip(head_before, model.head_parameters()))

    def test_full_updates_backbone(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL, seed=0)
        before = backbone_blob(model)
        train(model, recs[:12], recs[12:], tiny_transforms, TrainConfig(max_epochs=2, batch_size=4))
        assert backbone_blob(model) != before

    def test_seed_determinism(self, synth16, tiny_transforms):
        recs = _records(synth16)
        cfg = TrainConfig(max_epochs=3, batch_size=4, seed=11)
        runs = []
        for _ in range(2):
            model = build_model("tiny_test", Regime.FULL, seed=11)
            runs.append(train(model, recs[:12], recs[12:], tiny_transforms, cfg)[1])
        assert runs[0] == runs[1]
        assert json.dumps(runs[0].to_json()) == json.dumps(runs[1].to_json())

    def test_best_epoch_restored(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL, seed=3)
        model, history = train(model, recs[:12], recs[12:], tiny_transforms,
                               TrainConfig(max_epochs=6, batch_size=4, seed=3))
        assert evaluate(model, recs[12:], tiny_transforms).mae == pytest.approx(
            history.records[history.best_epoch].val_mae, abs=1e-6)

    @pytest.mark.slow
    def test_default_head_learns(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL, seed=0)
        _, history = train(model, recs, recs, tiny_transforms, TrainConfig(max_epochs=30, patience=30, seed=0))
        assert history.records[-1].train_mae < history.records[0].train_mae

    def test_divergence_raises_with_partial_history(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL, HeadConfig(dropout_rate=0.0), seed=0)
        with pytest.raises(NonFiniteLoss) as err:
            train(model, recs, recs[:4], tiny_transforms,
                  TrainConfig(max_epochs=50, batch_size=2, learning_rate=1e30, seed=0))
        assert isinstance(err.value.history, TrainHistory)
        assert len(err.value.history.records) < 50

    def test_rejects_mismatched_transforms(self, synth16):
        from boneage.transforms import PreprocessSpec, TransformConfig

        recs = _records(synth16)
        with pytest.raises(ValueError):
            train(build_model("tiny_test"), recs, recs, TransformConfig(PreprocessSpec(32, 32)), TrainConfig())

    def test_rejects_empty(self, synth16, tiny_transforms):
        with pytest.raises(EmptyBatch):
            train(build_model("tiny_test"), [], _records(synth16), tiny_transforms, TrainConfig())


class TestEvaluate:
    def test_constant_predictor(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL).eval()
        with torch.no_grad():
            model.head.output.weight.zero_()
            model.head.output.bias.fill_(0.25)
        model.set_target_scaling(100.0, 40.0)
        c = 100.0 + 40.0 * 0.25
        result = evaluate(model, recs, tiny_transforms, batch_size=5)
        assert len(result.predictions) == len(recs)
        assert [p[0] for p in result.predictions] == [r.id for r in recs]
        assert all(p[2] == pytest.approx(c) for p in result.predictions)
        assert result.mae == pytest.approx(brute_mae([c] * len(recs), [r.bone_age for r in recs]), abs=1e-9)

    def test_deterministic_and_consistent(self, synth16, tiny_transforms):
        recs = _records(synth16)
        model = build_model("tiny_test", Regime.FULL).train()
        a, b = evaluate(model, recs, tiny_transforms), evaluate(model, recs, tiny_transforms)
        assert a == b
        assert model.training
        assert a.mae == pytest.approx(brute_mae([p for _, _, p in a.predictions],
                                                [t for _, t, _ in a.predictions]), abs=1e-9)

    def test_csv_round_trip(self, tmp_path):
        result = EvalResult(mae=2.5, predictions=[("a", 10.0, 12.0), ("b", 20.0, 17.0)])
        path = result.write_csv(tmp_path / "p.csv")
        assert path.read_text().splitlines()[0] == "id,true_months,pred_months"
        assert EvalResult.read_csv(path) == result

    def test_empty(self, tiny_transforms):
        with pytest.raises(EmptyBatch):
            evaluate(build_model("tiny_test"), [], tiny_transforms)


class TestHeadGradient:
    @pytest.mark.parametrize("mode", ["eval", "train"])
    def test_autograd_matches_finite_differences(self, synth16, tiny_eval_transforms, mode):
        recs = _records(synth16)[:4]
        model = build_model("tiny_test", Regime.FROZEN, HeadConfig(dropout_rate=0.0), seed=2).double()
        model.set_target_scaling(144.0, 80.0)
        model.train(mode == "train")
        images, targets = make_batch(recs, tiny_eval_transforms.preprocess, tiny_eval_transforms.augment, "eval")
        images = images.astype(np.float64)
        _, analytic = loss_and_head_gradients(model, images, targets)
        numeric = finite_difference_head_grads(model, images, targets, step=1e-4)
        assert max_relative_error(analytic, numeric) < 1e-3
