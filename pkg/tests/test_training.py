"""Training tests: loss closed forms, margin ramp, sequence loop behavior."""

import numpy as np
import pytest

from reusegate import tensor as T
from reusegate import training as TR
from reusegate.network import ModelConfig, ReuseGateNet, mask_to_logits
from reusegate.synth import SynthConfig, synth_sequence
from reusegate.tensor import Tensor

SMALL_TRAIN = TR.TrainConfig(batch=2, seq_len=3, steps=4, seed=5)


def square(h, w, top, left, side):
    m = np.zeros((h, w), dtype=bool)
    m[top : top + side, left : left + side] = True
    return m


class TestMarginRamp:
    def test_zero_at_start(self):
        cfg = TR.TrainConfig(steps=100, m1_final=1.0)
        assert TR.margin_at(0, cfg) == 0.0

    def test_final_at_ramp_end(self):
        cfg = TR.TrainConfig(steps=100, m1_final=1.0, ramp_steps=20)
        assert TR.margin_at(20, cfg) == 1.0
        assert TR.margin_at(77, cfg) == 1.0

    def test_linear_halfway(self):
        cfg = TR.TrainConfig(steps=100, m1_final=1.0, ramp_steps=20)
        assert TR.margin_at(10, cfg) == pytest.approx(0.5)

    def test_default_ramp_is_fifth_of_steps(self):
        cfg = TR.TrainConfig(steps=500)
        assert cfg.resolved_ramp_steps == 100

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            TR.margin_at(-1, TR.TrainConfig(steps=10))


class TestGateTarget:
    def test_iou_dominates(self):
        a = square(16, 16, 0, 0, 8)
        b = square(16, 16, 0, 1, 8)  # IoU 7/9
        assert TR.gate_target(a, b, 0.35) == pytest.approx(7.0 / 9.0)

    def test_margin_dominates(self):
        a = square(16, 16, 0, 0, 4)
        b = square(16, 16, 10, 10, 4)  # disjoint
        assert TR.gate_target(a, b, 0.35) == 0.35

    def test_full_margin_saturates(self):
        a = square(16, 16, 0, 0, 4)
        b = square(16, 16, 10, 10, 4)
        assert TR.gate_target(a, b, 1.0) == 1.0

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            TR.gate_target(np.zeros((4, 4), bool), np.zeros((5, 4), bool), 0.0)


class TestGateLoss:
    def test_zero_at_match(self):
        p = T.scalar(0.4, requires_grad=True)
        assert TR.loss_gp(p, 0.4, 0.0).item() == 0.0

    def test_squared_error(self):
        p = T.scalar(0.4, requires_grad=True)
        assert TR.loss_gp(p, 1.0, 0.0).item() == pytest.approx(0.36, abs=1e-12)

    def test_dead_zone_value_and_zero_gradient(self):
        p = T.scalar(0.5, requires_grad=True)
        with T.Tape():
            loss = TR.loss_gp(p, 0.6, 0.2)  # |diff| = 0.1 < m2
            assert loss.item() == pytest.approx(0.04, abs=1e-12)
            T.backward(loss)
        assert p.grad.reshape(()) == 0.0

    def test_gradient_outside_dead_zone(self):
        p = T.scalar(0.2, requires_grad=True)
        with T.Tape():
            T.backward(TR.loss_gp(p, 0.9, 0.1))
        # d/dp (p - t)^2 = 2 (p - t) = -1.4
        assert p.grad.reshape(()) == pytest.approx(-1.4, abs=1e-12)

    def test_full_margin_always_pushes_up(self):
        # with target 1, the gradient on p is non-positive outside the zone
        for pv in (0.05, 0.4, 0.88):
            p = T.scalar(pv, requires_grad=True)
            with T.Tape():
                T.backward(TR.loss_gp(p, 1.0, 0.0))
            assert p.grad.reshape(()) <= 0.0


class TestDeltaLoss:
    def test_exact_edit_is_zero(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((1, 1, 4, 4))
        s = rng.standard_normal((1, 1, 4, 4))
        delta = Tensor(y - s, requires_grad=True)
        assert TR.loss_delta(delta, y, s).item() == pytest.approx(0.0, abs=1e-18)

    def test_unchanged_frame_wants_zero_delta(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal((1, 1, 4, 4))
        delta = Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
        assert TR.loss_delta(delta, y, y).item() == 0.0

    def test_matches_mean_square_oracle(self):
        rng = np.random.default_rng(2)
        y = rng.standard_normal((1, 1, 3, 5))
        s = rng.standard_normal((1, 1, 3, 5))
        d = rng.standard_normal((1, 1, 3, 5))
        got = TR.loss_delta(Tensor(d), y, s).item()
        want = float(((d - (y - s)) ** 2).mean())
        assert abs(got - want) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            TR.loss_delta(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 3, 2)), np.zeros((1, 1, 3, 2)))


class TestTotalLoss:
    def test_additivity(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
        y = rng.random((1, 1, 8, 8)) > 0.5
        p = T.scalar(0.3, requires_grad=True)
        delta = Tensor(rng.standard_normal((1, 1, 1, 1)), requires_grad=True)
        y_small = rng.standard_normal((1, 1, 1, 1))
        s_prev = rng.standard_normal((1, 1, 1, 1))
        total, parts = TR.loss_total(
            logits, y, p, 0.8, 0.0, delta_terms=(delta, y_small, s_prev)
        )
        gp = TR.loss_gp(p, 0.8, 0.0).item()
        ld = TR.loss_delta(delta, y_small, s_prev).item()
        bce = T.bce_with_logits(logits, Tensor(y.astype(np.float64))).item()
        assert abs(total.item() - (gp + ld + bce)) < 1e-12
        assert parts["loss_gp"] == pytest.approx(gp)
        assert parts["loss_delta"] == pytest.approx(ld)
        assert parts["bce"] == pytest.approx(bce)

    def test_full_route_has_no_delta_term(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
        y = rng.random((1, 1, 8, 8)) > 0.5
        p = T.scalar(0.3, requires_grad=True)
        total, parts = TR.loss_total(logits, y, p, 0.8, 0.0)
        assert parts["loss_delta"] == 0.0

    def test_perfect_prediction_near_zero(self):
        y = np.zeros((1, 1, 4, 4))
        y[0, 0, :2] = 1.0
        logits = Tensor(np.where(y > 0, 30.0, -30.0), requires_grad=True)
        p = T.scalar(0.7, requires_grad=True)
        total, _ = TR.loss_total(logits, y, p, 0.7, 0.0)
        assert total.item() < 1e-8

    def test_gate_gradient_comes_from_gate_loss_alone(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        y = rng.random((1, 1, 4, 4)) > 0.5
        p = T.scalar(0.3, requires_grad=True)
        with T.Tape():
            total, _ = TR.loss_total(logits, y, p, 0.9, 0.0)
            T.backward(total)
        grad_total = p.grad.reshape(()).copy()
        p2 = T.scalar(0.3, requires_grad=True)
        with T.Tape():
            T.backward(TR.loss_gp(p2, 0.9, 0.0))
        assert grad_total == pytest.approx(p2.grad.reshape(()), abs=1e-12)


class TestDownsampleMask:
    def test_all_foreground(self):
        got = TR.downsample_mask(np.ones((16, 16), dtype=bool))
        assert np.allclose(got, np.log(99.0))

    def test_all_background(self):
        got = TR.downsample_mask(np.zeros((16, 16), dtype=bool))
        assert np.allclose(got, -np.log(99.0))

    def test_matches_init_rule(self):
        rng = np.random.default_rng(6)
        mask = rng.random((32, 32)) > 0.5
        assert np.array_equal(TR.downsample_mask(mask), mask_to_logits(mask))


class TestTrainStep:
    def test_smoke_and_finite(self):
        model = ReuseGateNet(ModelConfig(stem_channels=(4, 6), deep_channels=(8, 8),
                                         c_f=5, c_r=4, score_channels=6), seed=2)
        batch = TR.make_batch(SynthConfig(size_range=(10, 16)), SMALL_TRAIN, 0)
        stats = TR.train_step(model, batch, SMALL_TRAIN, 0)
        assert np.isfinite(stats.loss)
        assert 0.0 <= stats.reuse_fraction <= 1.0
        assert 0.0 < stats.mean_p_gate < 1.0

    def test_pretrain_phase_never_reuses(self):
        cfg = TR.TrainConfig(batch=2, seq_len=3, steps=10, pretrain_frac=1.0, seed=5)
        model = ReuseGateNet(ModelConfig(stem_channels=(4, 6), deep_channels=(8, 8),
                                         c_f=5, c_r=4, score_channels=6), seed=2)
        stats = TR.train_step(model, TR.make_batch(SynthConfig(), cfg, 0), cfg, 0)
        assert stats.reuse_fraction == 0.0

    def test_identical_seeds_identical_losses(self):
        cfg = TR.TrainConfig(batch=2, seq_len=3, steps=3, seed=5)

        def run():
            model = ReuseGateNet(ModelConfig(stem_channels=(4, 6), deep_channels=(8, 8),
                                             c_f=5, c_r=4, score_channels=6), seed=2)
            return [
                TR.train_step(model, TR.make_batch(SynthConfig(), cfg, s), cfg, s).loss
                for s in range(cfg.steps)
            ]

        assert run() == run()

    def test_stored_state_is_detached(self):
        # reuse-frame losses must not backprop into the arrays held as state
        model = ReuseGateNet(ModelConfig(stem_channels=(4, 6), deep_channels=(8, 8),
                                         c_f=5, c_r=4, score_channels=6), seed=2)
        frames, masks = synth_sequence(SynthConfig(), 3, seed=9)
        template, s_prev, r8_prev = TR._init_sequence_state(model, frames[0], masks[0])
        s_tensor = Tensor(s_prev)  # the wrapper used per frame
        assert not s_tensor.requires_grad
        with T.Tape() as tape:
            x = Tensor(frames[1][None])
            f4, f8 = model.stem_forward(x)
            d_t = model.match_dissimilarity(f8, s_tensor, Tensor(template))
            delta = model.generate_delta(d_t)
            s_hat = s_tensor + delta
            T.backward(T.mean_all(s_hat))
        assert s_tensor.grad is None

    def test_nonfinite_loss_raises(self):
        model = ReuseGateNet(ModelConfig(stem_channels=(4, 6), deep_channels=(8, 8),
                                         c_f=5, c_r=4, score_channels=6), seed=2)
        model.dec_head.weight.data[:] = np.inf
        with pytest.raises(TR.NonFiniteLossError):
            TR.train_step(model, TR.make_batch(SynthConfig(), SMALL_TRAIN, 0), SMALL_TRAIN, 0)


class TestTrainLoop:
    def test_short_run_logs_every_step(self, tmp_path):
        import io, json

        model = ReuseGateNet(ModelConfig(stem_channels=(4, 6), deep_channels=(8, 8),
                                         c_f=5, c_r=4, score_channels=6), seed=2)
        cfg = TR.TrainConfig(batch=1, seq_len=3, steps=3, seed=5)
        stream = io.StringIO()
        history = TR.train(model, cfg, SynthConfig(), log_stream=stream)
        assert len(history) == 3
        lines = [json.loads(line) for line in stream.getvalue().splitlines()]
        assert [rec["step"] for rec in lines] == [0, 1, 2]
        assert set(lines[0]) == {
            "step", "loss", "loss_gp", "loss_delta", "bce",
            "mean_p_gate", "reuse_fraction", "m1_current",
        }
