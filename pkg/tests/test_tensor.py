import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emsrdpn.tensor import (
    GradientTape,
    ShapeError,
    Tensor,
    add,
    backward,
    channel_concat,
    channel_split,
    conv2d,
    parameter,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    tsum,
)

from conftest import check_op_gradients, numeric_grad, rel_err


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def zeros_bias(c):
    return t64(np.zeros((1, c, 1, 1)))


class TestConv2d:
    def test_identity_kernel(self):
        x = t64(np.ones((1, 1, 3, 3)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        out = conv2d(x, t64(k), zeros_bias(1), padding=1)
        assert np.array_equal(out.data, x.data)

    def test_identity_kernel_random_float32(self, rng):
        x = Tensor(rng.random((2, 3, 5, 4)).astype(np.float32))
        k = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            k[c, c, 1, 1] = 1
        out = conv2d(x, Tensor(k), Tensor(np.zeros((1, 3, 1, 1), np.float32)))
        np.testing.assert_array_max_ulp(out.data, x.data, maxulp=1)

    def test_pointwise_affine(self):
        x = t64([[[[1, 2], [3, 4]]]])
        out = conv2d(x, t64(np.full((1, 1, 1, 1), 2.0)), t64(np.ones((1, 1, 1, 1))), padding=0)
        assert out.data[0, 0].tolist() == [[3, 5], [7, 9]]

    def test_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal((1, 4, 1, 1))
        out = conv2d(t64(x), t64(w), t64(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 5, 6))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[0, o, 0, 0]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_gradients_finite_difference(self, rng):
        arrays = [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)),
                  rng.standard_normal((1, 4, 1, 1))]
        assert check_op_gradients(conv2d, arrays) < 1e-6

    def test_gradients_1x1(self, rng):
        arrays = [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 1, 1)),
                  rng.standard_normal((1, 2, 1, 1))]
        assert check_op_gradients(conv2d, arrays) < 1e-6

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 3, 3\).*\(1, 3, 3, 3\)"):
            conv2d(t64(np.zeros((1, 2, 3, 3))), t64(np.zeros((1, 3, 3, 3))), zeros_bias(1))

    def test_rejects_wrong_padding(self):
        with pytest.raises(ShapeError):
            conv2d(t64(np.zeros((1, 1, 3, 3))), t64(np.zeros((1, 1, 3, 3))), zeros_bias(1), padding=0)


class TestElementwise:
    def test_relu_values(self):
        out = relu(t64([[[[-1.0, 0.0, 2.0]]]]))
        assert out.data.ravel().tolist() == [0, 0, 2]

    def test_relu_positive_identity(self, rng):
        x = t64(rng.random((1, 2, 3, 3)) + 0.1)
        assert np.array_equal(relu(x).data, x.data)

    def test_relu_subgradient(self):
        p = parameter(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3), "p")
        with GradientTape() as tape:
            loss = tsum(relu(p))
        g = backward(tape, loss)["p"]
        assert g.ravel().tolist() == [0, 0, 1]

    def test_relu_gradient_fd(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        a[np.abs(a) < 1e-2] = 0.5  # keep clear of the kink
        assert check_op_gradients(relu, [a]) < 1e-5

    def test_add(self):
        assert add(t64([[[[1, 2]]]]), t64([[[[3, 4]]]])).data.ravel().tolist() == [4, 6]
        x = t64(np.arange(4.0).reshape(1, 1, 2, 2))
        assert np.array_equal(add(x, t64(np.zeros((1, 1, 2, 2)))).data, x.data)

    def test_add_gradient(self, rng):
        assert check_op_gradients(add, [rng.standard_normal((1, 2, 3, 3)),
                                        rng.standard_normal((1, 2, 3, 3))]) < 1e-5

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 2, 2, 2))))


class TestStructural:
    def test_concat(self):
        out = channel_concat([t64([[[[1.0]], [[2.0]]]]), t64([[[[3.0]]]])])
        assert out.shape == (1, 3, 1, 1)
        assert out.data.ravel().tolist() == [1, 2, 3]

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            channel_concat([t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 2, 3)))])

    def test_split(self):
        a, b = channel_split(t64([[[[1.0]], [[2.0]], [[3.0]]]]), [2, 1])
        assert a.data.ravel().tolist() == [1, 2] and b.data.ravel().tolist() == [3]
        (whole,) = channel_split(t64(np.ones((1, 3, 1, 1))), [3])
        assert np.array_equal(whole.data, np.ones((1, 3, 1, 1)))

    def test_split_width_mismatch(self):
        with pytest.raises(ShapeError):
            channel_split(t64(np.zeros((1, 3, 1, 1))), [2, 2])
        with pytest.raises(ShapeError):
            channel_split(t64(np.zeros((1, 3, 1, 1))), [3, 0])

    def test_split_full_widths(self):
        f, g = channel_split(t64(np.zeros((1, 128, 2, 2))), [64, 64])
        assert f.shape[1] == g.shape[1] == 64

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 10_000))
    def test_concat_split_roundtrip(self, widths, seed):
        r = np.random.default_rng(seed)
        parts = [t64(r.standard_normal((2, w, 3, 2))) for w in widths]
        back = channel_split(channel_concat(parts), widths)
        for p, q in zip(parts, back):
            assert np.array_equal(p.data, q.data)
        x = t64(r.standard_normal((2, sum(widths), 3, 2)))
        assert np.array_equal(channel_concat(channel_split(x, widths)).data, x.data)

    def test_concat_split_gradients(self, rng):
        def op(a, b):
            return channel_split(channel_concat([a, b]), [1, 4])[1]

        assert check_op_gradients(op, [rng.standard_normal((1, 2, 2, 3)), rng.standard_normal((1, 3, 2, 3))]) < 1e-5

    def test_pixel_shuffle_definition(self):
        x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        assert pixel_shuffle(x, 2).data[0, 0].tolist() == [[1, 2], [3, 4]]

    def test_pixel_shuffle_index_formula(self, rng):
        r = 3
        x = rng.standard_normal((2, 2 * r * r, 2, 3))
        out = pixel_shuffle(t64(x), r).data
        for n in range(2):
            for k in range(2):
                for y in range(2):
                    for xx in range(3):
                        for dy in range(r):
                            for dx in range(r):
                                assert out[n, k, y * r + dy, xx * r + dx] == x[n, k * r * r + dy * r + dx, y, xx]

    def test_pixel_shuffle_r1_identity(self, rng):
        x = t64(rng.standard_normal((1, 3, 2, 2)))
        assert np.array_equal(pixel_shuffle(x, 1).data, x.data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 10_000))
    def test_pixel_shuffle_bijection(self, r, c, h, seed):
        x = np.random.default_rng(seed).standard_normal((1, c * r * r, h, h + 1))
        assert np.array_equal(pixel_unshuffle(pixel_shuffle(t64(x), r).data, r), x)

    def test_pixel_shuffle_divisibility(self):
        with pytest.raises(ShapeError):
            pixel_shuffle(t64(np.zeros((1, 3, 2, 2))), 2)

    def test_pixel_shuffle_gradient(self, rng):
        assert check_op_gradients(lambda x: pixel_shuffle(x, 2), [rng.standard_normal((1, 8, 2, 3))]) < 1e-5


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        p = parameter(rng.standard_normal((1, 2, 3, 3)), "p")
        with GradientTape() as tape:
            loss = tsum(p)
        assert np.array_equal(backward(tape, loss)["p"], np.ones((1, 2, 3, 3)))

    def test_requires_scalar_loss(self, rng):
        p = parameter(rng.standard_normal((1, 2, 3, 3)), "p")
        with GradientTape() as tape:
            y = relu(p)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_mae_of_conv_matches_finite_differences(self, rng):
        from emsrdpn.metrics import mae_loss

        x = t64(rng.standard_normal((2, 3, 4, 4)))
        y = t64(rng.standard_normal((2, 2, 4, 4)))
        w = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal((1, 2, 1, 1))

        def loss_value():
            return float(mae_loss(conv2d(x, t64(w), t64(b)), y).data.ravel()[0])

        pw, pb = parameter(w, "w"), parameter(b, "b")
        with GradientTape() as tape:
            loss = mae_loss(conv2d(x, pw, pb), y)
        grads = backward(tape, loss)
        assert rel_err(grads["w"], numeric_grad(loss_value, w)) < 1e-6
        assert rel_err(grads["b"], numeric_grad(loss_value, b)) < 1e-6

    def test_shared_parameter_accumulates(self, rng):
        x = t64(rng.standard_normal((1, 2, 3, 3)))
        w = parameter(rng.standard_normal((2, 2, 3, 3)), "w")
        b = parameter(np.zeros((1, 2, 1, 1)), "b")
        with GradientTape() as tape:
            h = conv2d(x, w, b)
            loss = tsum(add(conv2d(h, w, b), h))
        g_both = backward(tape, loss)["w"]

        # the same derivative assembled from the two uses separately
        with GradientTape() as tape:
            h = conv2d(x, w, b)
            loss1 = tsum(h)
        g1 = backward(tape, loss1)["w"]
        w2 = parameter(w.data, "w2")
        with GradientTape() as tape:
            h = conv2d(x, w, b)
            loss2 = tsum(conv2d(h, w2, b))
        grads2 = backward(tape, loss2)
        np.testing.assert_allclose(g_both, g1 + grads2["w"] + grads2["w2"], rtol=1e-12)

    def test_untouched_parameters_absent(self, rng):
        a = parameter(rng.standard_normal((1, 1, 2, 2)), "a")
        b = parameter(rng.standard_normal((1, 1, 2, 2)), "b")
        with GradientTape() as tape:
            loss = tsum(relu(a))
        grads = backward(tape, loss)
        assert "a" in grads and "b" not in grads
        del b

    def test_out_of_order_tape_detected(self, rng):
        a = parameter(rng.standard_normal((1, 1, 2, 2)), "a")
        with GradientTape() as tape:
            loss = tsum(relu(a))
        tape.records.reverse()
        with pytest.raises(RuntimeError):
            backward(tape, loss)

    def test_no_recording_without_tape(self, rng):
        with GradientTape() as tape:
            pass
        relu(t64(rng.standard_normal((1, 1, 2, 2))))
        assert tape.records == []


class TestTensor:
    def test_immutable(self):
        t = t64(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 1

    def test_rank_and_dims(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 0, 2, 2)))

    def test_default_precision_is_32bit(self):
        assert Tensor([[[[1]]]]).dtype == np.float32

    def test_forward_bitwise_repeatable(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 9, 9)).astype(np.float32))
        w = Tensor(rng.standard_normal((5, 4, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros((1, 5, 1, 1), np.float32))
        assert np.array_equal(conv2d(x, w, b).data, conv2d(x, w, b).data)
