"""Unit tests for the autodiff engine: forward values, gradients, Adam, checkpoints."""

import math

import numpy as np
import pytest

from reusegate import tensor as T
from gradcheck import check_grads, fd_grad, rel_err


def rng_for(seed):
    return np.random.default_rng(seed)


def leaf(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


class TestConv2d:
    def test_identity_kernel(self):
        rng = rng_for(0)
        x = T.Tensor(rng.standard_normal((1, 1, 3, 3)))
        w = T.Parameter("w", np.ones((1, 1, 1, 1)))
        b = T.Parameter("b", np.zeros((1, 1, 1, 1)))
        out = T.conv2d(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_all_ones_sums_window(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        w = T.Parameter("w", np.ones((1, 1, 3, 3)))
        b = T.Parameter("b", np.zeros((1, 1, 1, 1)))
        out = T.conv2d(x, w, b)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_channel_mismatch_rejected(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4)))
        w = T.Parameter("w", np.zeros((2, 2, 3, 3)))
        b = T.Parameter("b", np.zeros((1, 2, 1, 1)))
        with pytest.raises(ValueError):
            T.conv2d(x, w, b)

    def test_empty_output_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)))
        w = T.Parameter("w", np.zeros((1, 1, 5, 5)))
        b = T.Parameter("b", np.zeros((1, 1, 1, 1)))
        with pytest.raises(ValueError):
            T.conv2d(x, w, b)

    def test_dilated_gradients(self):
        rng = rng_for(1)
        x = leaf(rng, 1, 2, 5, 5)
        w = T.Parameter("w", rng.standard_normal((3, 2, 3, 3)))
        b = T.Parameter("b", rng.standard_normal((1, 3, 1, 1)))
        check_grads(lambda x_, w_, b_: T.conv2d(x_, w_, b_, padding=2, dilation=2), [x, w, b], rng)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random(self, seed):
        rng = rng_for(100 + seed)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = leaf(rng, 1, 2, 5, 5)
        w = T.Parameter("w", rng.standard_normal((2, 2, 3, 3)))
        b = T.Parameter("b", rng.standard_normal((1, 2, 1, 1)))
        check_grads(
            lambda x_, w_, b_: T.conv2d(x_, w_, b_, stride=stride, padding=pad), [x, w, b], rng
        )


class TestMaxpool:
    def test_basic(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.maxpool2d(x)
        assert out.item() == 4.0

    def test_tie_break_single_winner_per_window(self):
        x = T.Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        with T.Tape():
            loss = T.sum_all(T.maxpool2d(x))
            T.backward(loss)
        assert np.array_equal(out := np.sort(x.grad.reshape(-1))[::-1][:4], np.ones(4))
        assert x.grad.sum() == 4.0  # one unit per window
        # first occurrence in row-major window order takes the gradient
        assert x.grad[0, 0, 0, 0] == 1.0 and x.grad[0, 0, 0, 1] == 0.0

    def test_window_too_large_rejected(self):
        with pytest.raises(ValueError):
            T.maxpool2d(T.Tensor(np.zeros((1, 1, 1, 1))), k=2)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random(self, seed):
        rng = rng_for(200 + seed)
        x = leaf(rng, 1, 3, 6, 6)
        check_grads(lambda x_: T.maxpool2d(x_), [x], rng)


class TestPointwise:
    def test_values(self):
        z = T.Tensor(np.zeros((1, 1, 1, 1)))
        assert T.pointwise(z, "sigmoid").item() == 0.5
        x = T.Tensor(np.array([-3.0, 3.0]).reshape(1, 1, 1, 2))
        out = T.pointwise(x, "relu")
        assert out.data.reshape(-1).tolist() == [0.0, 3.0]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.pointwise(T.scalar(0.0), "tanh")

    def test_sigmoid_grad_quarter_at_zero(self):
        x = T.Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        with T.Tape():
            T.backward(T.sum_all(T.sigmoid(x)))
        assert x.grad.reshape(()) == pytest.approx(0.25, abs=1e-12)
        numeric = fd_grad(lambda: float(T.sigmoid(x).data.sum()), x.data, eps=1e-6)
        assert abs(numeric.reshape(()) - 0.25) < 1e-6

    def test_sigmoid_range_open(self):
        x = T.Tensor(np.array([-1e4, 0.0, 1e4]).reshape(1, 1, 1, 3))
        s = T.sigmoid(x).data
        assert np.all(s > 0.0) and np.all(s < 1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random(self, seed):
        rng = rng_for(300 + seed)
        # keep relu inputs away from the kink
        data = rng.standard_normal((1, 2, 3, 3))
        data[np.abs(data) < 0.05] += 0.1
        x = T.Tensor(data, requires_grad=True)
        check_grads(lambda x_: T.relu(x_), [x], rng)
        y = leaf(rng, 1, 2, 3, 3)
        check_grads(lambda y_: T.sigmoid(y_), [y], rng)


class TestUpsample:
    def test_constant_preserved(self):
        x = T.Tensor(np.full((1, 2, 3, 3), 0.37))
        out = T.upsample_bilinear2x(x)
        assert out.shape == (1, 2, 6, 6)
        assert np.allclose(out.data, 0.37, atol=0)

    def test_single_pixel(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 2.5))
        out = T.upsample_bilinear2x(x)
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out.data == 2.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random(self, seed):
        rng = rng_for(400 + seed)
        x = leaf(rng, 1, 2, 4, 4)
        check_grads(lambda x_: T.upsample_bilinear2x(x_), [x], rng)


class TestAvgpool:
    def test_mean_of_window(self):
        x = T.Tensor(np.array([[0.0, 0.0], [2.0, 2.0]]).reshape(1, 1, 2, 2))
        assert T.avgpool2x2(x).item() == 1.0

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            T.avgpool2x2(T.Tensor(np.zeros((1, 1, 3, 4))))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random(self, seed):
        rng = rng_for(500 + seed)
        x = leaf(rng, 1, 2, 4, 6)
        check_grads(lambda x_: T.avgpool2x2(x_), [x], rng)


class TestConcat:
    def test_channel_sum(self):
        a = T.Tensor(np.zeros((1, 2, 4, 4)))
        b = T.Tensor(np.zeros((1, 3, 4, 4)))
        assert T.concat_channels([a, b]).shape == (1, 5, 4, 4)

    def test_single_input_identity(self):
        a = T.Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        assert np.array_equal(T.concat_channels([a]).data, a.data)

    def test_spatial_mismatch_rejected(self):
        a = T.Tensor(np.zeros((1, 1, 4, 4)))
        b = T.Tensor(np.zeros((1, 1, 5, 4)))
        with pytest.raises(ValueError):
            T.concat_channels([a, b])

    @pytest.mark.parametrize("seed", range(20))
    def test_backward_splits_gradient(self, seed):
        rng = rng_for(600 + seed)
        a = leaf(rng, 1, 2, 3, 3)
        b = leaf(rng, 1, 1, 3, 3)
        check_grads(lambda a_, b_: T.concat_channels([a_, b_]), [a, b], rng)


class TestGlobalAvgPool:
    def test_constant(self):
        x = T.Tensor(np.full((1, 3, 5, 5), 1.25))
        assert np.allclose(T.global_avg_pool(x).data, 1.25)

    def test_mean_value(self):
        x = T.Tensor(np.array([[0.0, 0.0], [2.0, 2.0]]).reshape(1, 1, 2, 2))
        assert T.global_avg_pool(x).item() == 1.0

    def test_gradient_uniform(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with T.Tape():
            T.backward(T.sum_all(T.global_avg_pool(x)))
        assert np.allclose(x.grad, 0.25)


class TestL2Mean:
    def test_zero_on_equal(self):
        rng = rng_for(7)
        a = T.Tensor(rng.standard_normal((1, 1, 2, 2)))
        assert T.l2_mean(a, a).item() == 0.0

    def test_unit_case(self):
        a = T.Tensor(np.ones((1, 1, 1, 2)))
        b = T.Tensor(np.zeros((1, 1, 1, 2)))
        assert T.l2_mean(a, b).item() == 1.0

    def test_closed_form_gradient(self):
        rng = rng_for(8)
        a = leaf(rng, 1, 1, 2, 3)
        b = T.Tensor(rng.standard_normal((1, 1, 2, 3)))
        with T.Tape():
            T.backward(T.l2_mean(a, b))
        expected = 2.0 * (a.data - b.data) / a.data.size
        assert np.allclose(a.grad, expected, atol=1e-12)
        numeric = fd_grad(lambda: T.l2_mean(a, b).item(), a.data, eps=1e-6)
        assert rel_err(a.grad, numeric) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.l2_mean(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 2, 3))))


class TestBCE:
    def test_logit_zero_half_target(self):
        z = T.Tensor(np.zeros((1, 1, 1, 1)))
        t = T.Tensor(np.full((1, 1, 1, 1), 0.5))
        assert T.bce_with_logits(z, t).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_correct(self):
        z = T.Tensor(np.full((1, 1, 1, 1), 20.0))
        t = T.Tensor(np.ones((1, 1, 1, 1)))
        assert T.bce_with_logits(z, t).item() < 1e-8

    def test_target_range_enforced(self):
        z = T.Tensor(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ValueError):
            T.bce_with_logits(z, T.Tensor(np.full((1, 1, 1, 1), 1.5)))

    def test_matches_direct_formula(self):
        # direct (unstable) formula in double precision as the oracle
        rng = rng_for(9)
        z = T.Tensor(rng.standard_normal((1, 1, 2, 4)) * 3.0, requires_grad=True)
        t = T.Tensor(rng.uniform(0, 1, (1, 1, 2, 4)))
        with T.Tape():
            loss = T.bce_with_logits(z, t)
            T.backward(loss)
        s = 1.0 / (1.0 + np.exp(-z.data))
        direct = -(t.data * np.log(s) + (1.0 - t.data) * np.log(1.0 - s)).mean()
        assert abs(loss.item() - direct) < 1e-9
        direct_grad = (s - t.data) / z.data.size
        assert np.max(np.abs(z.grad - direct_grad)) < 1e-9


class TestClampMin:
    def test_dead_zone_gradient_exactly_zero(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 0.1), requires_grad=True)
        with T.Tape():
            T.backward(T.sum_all(T.clamp_min(x, 0.2)))
        assert x.grad.reshape(()) == 0.0

    def test_passthrough_gradient(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 0.3), requires_grad=True)
        with T.Tape():
            T.backward(T.sum_all(T.clamp_min(x, 0.2)))
        assert x.grad.reshape(()) == 1.0


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.zeros((1, 2, 3, 3)), requires_grad=True)
        with T.Tape():
            T.backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones((1, 2, 3, 3)))

    def test_unused_parameter_keeps_zero_grad(self):
        rng = rng_for(10)
        x = T.Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        p = T.Parameter("unused", rng.standard_normal((1, 1, 2, 2)))
        T.zero_grads([p])
        with T.Tape():
            T.backward(T.sum_all(x))
        assert np.array_equal(p.grad, np.zeros((1, 1, 2, 2)))

    def test_non_scalar_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with T.Tape():
            y = T.relu(x)
            with pytest.raises(ValueError):
                T.backward(y)

    def test_repeated_backward_accumulates(self):
        x = T.Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        with T.Tape():
            loss = T.sum_all(x)
            T.backward(loss)
            T.backward(loss)
        assert np.array_equal(x.grad, np.full((1, 1, 1, 2), 2.0))

    def test_pause_tape_disables_recording(self):
        x = T.Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with T.Tape() as tape:
            with T.pause_tape():
                T.relu(x)
            assert len(tape) == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_net_gradients(self, seed):
        # conv -> pool -> sigmoid -> l2_mean against finite differences
        rng = rng_for(700 + seed)
        x = leaf(rng, 1, 2, 6, 6)
        w = T.Parameter("w", rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = T.Parameter("b", rng.standard_normal((1, 3, 1, 1)) * 0.1)
        target = T.Tensor(rng.uniform(0, 1, (1, 3, 3, 3)))

        def build(x_, w_, b_):
            h = T.conv2d(x_, w_, b_, padding=1)
            h = T.maxpool2d(h)
            h = T.sigmoid(h)
            return T.l2_mean(h, target)

        check_grads(build, [x, w, b], rng)


class TestAdam:
    def test_zero_gradient_keeps_parameter(self):
        p = T.Parameter("p", np.full((1, 1, 1, 1), 1.5))
        p.grad = np.zeros_like(p.data)
        T.adam_step([p], lr=0.1)
        assert p.data.reshape(()) == 1.5

    def test_first_step_is_lr_sized(self):
        p = T.Parameter("p", np.zeros((1, 1, 1, 1)))
        p.grad = np.ones_like(p.data)
        T.adam_step([p], lr=1e-3)
        # bias-corrected first step: lr * g / (|g| + eps) with eps tiny
        assert p.data.reshape(()) == pytest.approx(-1e-3, rel=1e-6)
        assert p.grad is None and p.step == 1

    def test_missing_grad_rejected(self):
        p = T.Parameter("p", np.zeros((1, 1, 1, 1)))
        with pytest.raises(RuntimeError):
            T.adam_step([p], lr=0.1)

    def test_converges_to_quadratic_minimum(self):
        # oracle: the same recurrence on plain floats
        def reference():
            m = v = 0.0
            x = 0.0
            for t in range(1, 101):
                g = 2.0 * (x - 3.0)
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                mh = m / (1.0 - 0.9**t)
                vh = v / (1.0 - 0.999**t)
                x -= 0.1 * mh / (math.sqrt(vh) + 1e-8)
            return x

        p = T.Parameter("p", np.zeros((1, 1, 1, 1)))
        for _ in range(100):
            with T.Tape():
                diff = p - 3.0
                loss = T.sum_all(T.mul(diff, diff))
                T.backward(loss)
            T.adam_step([p], lr=0.1)
        got = p.data.reshape(())
        assert abs(got - 3.0) < 0.05
        assert got == pytest.approx(reference(), abs=1e-12)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = rng_for(11)
        params = [
            T.Parameter("a.weight", rng.standard_normal((2, 3, 3, 3))),
            T.Parameter("a.bias", rng.standard_normal((1, 2, 1, 1))),
        ]
        path = tmp_path / "ck.bin"
        T.save_checkpoint(path, params, header="k=v\n")
        header, arrays = T.load_checkpoint(path)
        assert header == "k=v\n"
        for p in params:
            assert np.allclose(arrays[p.name], p.data.astype(np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX12345678")
        with pytest.raises(ValueError):
            T.load_checkpoint(path)


class TestDeterminism:
    def test_forward_repeatable(self):
        rng = rng_for(12)
        x = T.Tensor(rng.standard_normal((1, 2, 6, 6)))
        w = T.Parameter("w", rng.standard_normal((2, 2, 3, 3)))
        b = T.Parameter("b", rng.standard_normal((1, 2, 1, 1)))
        a = T.conv2d(x, w, b, padding=1).data
        c = T.conv2d(x, w, b, padding=1).data
        assert np.array_equal(a, c)
