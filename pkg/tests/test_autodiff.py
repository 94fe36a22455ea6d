import numpy as np
import pytest

from eend_eda import autodiff as ad
from eend_eda.autodiff import Tensor, parameter
from oracles import gradcheck, lstm_step_manual

rng = np.random.default_rng(0)


def attn_params(d, seed=1):
    r = np.random.default_rng(seed)
    p = {}
    for n in ("q", "k", "v", "o"):
        p["w" + n] = parameter(r.standard_normal((d, d)) / np.sqrt(d))
        p["b" + n] = parameter(r.standard_normal(d) * 0.1)
    return p


def lstm_params(n_in, n_hid, seed=2, scale=0.5):
    r = np.random.default_rng(seed)
    return {"w_ih": parameter(r.standard_normal((n_in, 4 * n_hid)) * scale),
            "w_hh": parameter(r.standard_normal((n_hid, 4 * n_hid)) * scale),
            "b": parameter(r.standard_normal(4 * n_hid) * 0.1)}


class TestMatmul:
    def test_identity(self):
        m = rng.standard_normal((2, 5))
        assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_known_product(self):
        out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        assert out.data.tolist() == [[3], [7]]

    def test_gradient(self):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert gradcheck(ad.matmul, [a, b]) < 1e-6

    def test_batched_weight_gradient_is_summed(self):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))
        assert gradcheck(ad.matmul, [a, b]) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSigmoid:
    def test_zero(self):
        assert ad.sigmoid(Tensor(0.0)).data == 0.5

    def test_symmetry(self):
        x = rng.standard_normal(20) * 10
        s = ad.sigmoid(Tensor(x)).data + ad.sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(s, 1.0, atol=1e-15)

    def test_saturates_without_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            s = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert s[0] >= 0 and s[1] <= 1

    @pytest.mark.parametrize("x", [-5.0, 0.0, 5.0])
    def test_gradient(self, x):
        assert gradcheck(ad.sigmoid, [np.array([x])]) < 1e-6


class TestBinaryCrossEntropy:
    def test_half(self):
        v = ad.binary_cross_entropy(np.array([1.0]), Tensor([0.5])).data
        assert v == pytest.approx(np.log(2))

    def test_near_certain(self):
        v = ad.binary_cross_entropy(np.array([1.0]), Tensor([1 - 1e-7])).data
        assert v == pytest.approx(0.0, abs=1e-6)

    def test_direct_sum(self):
        v = ad.binary_cross_entropy(np.array([1.0, 0.0]), Tensor([0.9, 0.2])).data
        assert abs(v - (-np.log(0.9) - np.log(0.8))) < 1e-12

    def test_clamp_keeps_finite(self):
        v = ad.binary_cross_entropy(np.array([1.0, 0.0]), Tensor([0.0, 1.0])).data
        assert np.isfinite(v)

    def test_gradient(self):
        y = (rng.random((3, 4)) > 0.5).astype(float)
        p = rng.uniform(0.05, 0.95, (3, 4))
        assert gradcheck(lambda q: ad.binary_cross_entropy(y, q), [p]) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.binary_cross_entropy(np.ones(3), Tensor([0.5, 0.5]))


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        out = ad.layer_norm(Tensor(np.full((2, 6), 3.0)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_row_mean_zero(self):
        out = ad.layer_norm(Tensor(rng.standard_normal((4, 6))), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-10

    def test_gradient(self):
        x, g, b = rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6)
        assert gradcheck(ad.layer_norm, [x, g, b]) < 1e-5


class TestLstmCell:
    def test_zero_params(self):
        p = {"w_ih": Tensor(np.zeros((3, 16))), "w_hh": Tensor(np.zeros((4, 16))), "b": Tensor(np.zeros(16))}
        h, c = ad.lstm_cell(Tensor(rng.standard_normal((1, 3))), Tensor(np.zeros((1, 4))),
                            Tensor(np.zeros((1, 4))), p)
        assert not h.data.any() and not c.data.any()

    def test_bounded_hidden(self):
        p = lstm_params(3, 4, scale=2.0)
        h, _ = ad.lstm_cell(Tensor(rng.standard_normal((50, 3)) * 3), Tensor(np.zeros((50, 4))),
                            Tensor(rng.standard_normal((50, 4)) * 3), p)
        assert np.all(np.abs(h.data) < 1)
        # float64 tanh rounds to exactly 1 far into saturation; never beyond
        h, _ = ad.lstm_cell(Tensor(np.full((1, 3), 1e6)), Tensor(np.zeros((1, 4))),
                            Tensor(np.full((1, 4), 1e6)), p)
        assert np.all(np.abs(h.data) <= 1) and np.all(np.isfinite(h.data))

    def test_matches_manual(self):
        p = lstm_params(3, 4)
        x, h, c = rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        h1, c1 = ad.lstm_cell(Tensor(x), Tensor(h), Tensor(c), p)
        h2, c2 = lstm_step_manual(x, h, c, *(p[k].data for k in ("w_ih", "w_hh", "b")))
        np.testing.assert_allclose(h1.data, h2, atol=1e-12)
        np.testing.assert_allclose(c1.data, c2, atol=1e-12)

    def test_gradient(self):
        x, h, c = rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        wi, wh, b = (rng.standard_normal((4, 16)) * 0.5, rng.standard_normal((4, 16)) * 0.5,
                     rng.standard_normal(16) * 0.1)

        def build(x, h, c, wi, wh, b):
            hn, cn = ad.lstm_cell(x, h, c, {"w_ih": wi, "w_hh": wh, "b": b})
            return ad.concat([hn, cn], axis=-1)

        assert gradcheck(build, [x, h, c, wi, wh, b]) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.lstm_cell(Tensor(np.ones((1, 5))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                         lstm_params(3, 4))


class TestLstmSequence:
    def test_matches_unrolled_cells(self):
        p = lstm_params(3, 4)
        xs = rng.standard_normal((2, 6, 3))
        h0, c0 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        hs, c_last = ad.lstm_sequence(Tensor(xs), Tensor(h0), Tensor(c0), p)
        h, c = Tensor(h0), Tensor(c0)
        for t in range(6):
            h, c = ad.lstm_cell(Tensor(xs[:, t]), h, c, p)
            np.testing.assert_allclose(hs.data[:, t], h.data, atol=1e-14)
        np.testing.assert_allclose(c_last.data, c.data, atol=1e-14)

    def test_gradient(self):
        xs = rng.standard_normal((2, 4, 3))
        h0, c0 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        wi, wh, b = rng.standard_normal((3, 12)) * 0.5, rng.standard_normal((3, 12)) * 0.5, rng.standard_normal(12)

        def build(xs, h0, c0, wi, wh, b):
            hs, c = ad.lstm_sequence(xs, h0, c0, {"w_ih": wi, "w_hh": wh, "b": b})
            return ad.concat([ad.reshape(hs, (2, 12)), c], axis=-1)

        assert gradcheck(build, [xs, h0, c0, wi, wh, b]) < 1e-5


class TestAttention:
    def test_single_frame_is_value_projection(self):
        p = attn_params(8)
        x = rng.standard_normal((1, 8))
        out = ad.multi_head_self_attention(Tensor(x), p, 2).data
        expected = (x @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        p = attn_params(8)
        x = rng.standard_normal((7, 8))
        perm = rng.permutation(7)
        a = ad.multi_head_self_attention(Tensor(x), p, 2).data
        b = ad.multi_head_self_attention(Tensor(x[perm]), p, 2).data
        assert np.abs(a[perm] - b).max() < 1e-9

    def test_fused_matches_primitive(self):
        p = attn_params(8)
        x = rng.standard_normal((3, 5, 8))
        a = ad.multi_head_self_attention(Tensor(x), p, 4, fused=True).data
        b = ad.multi_head_self_attention(Tensor(x), p, 4, fused=False).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("fused", [True, False])
    def test_gradient(self, fused):
        p = attn_params(8)
        names = list(p)

        def build(x, *ws):
            return ad.multi_head_self_attention(x, dict(zip(names, ws)), 2, fused=fused)

        arrays = [rng.standard_normal((3, 8))] + [p[n].data for n in names]
        assert gradcheck(build, arrays) < 1e-5

    def test_indivisible_heads(self):
        with pytest.raises(ad.ConfigurationError):
            ad.multi_head_self_attention(Tensor(np.ones((2, 6))), attn_params(6), 4)


class TestGraph:
    def test_second_backward_rejected(self):
        x = parameter([1.0, 2.0])
        y = (x * x).sum()
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_shared_subexpression_visited_once(self):
        x = parameter(3.0)
        y = x * x
        z = y + y
        z.backward()
        assert x.grad == pytest.approx(12.0)

    def test_grads_accumulate_until_zeroed(self):
        x = parameter(2.0)
        (x * 3.0).backward()
        (x * 3.0).backward()
        assert x.grad == pytest.approx(6.0)
        x.zero_grad()
        (x * 3.0).backward()
        assert x.grad == pytest.approx(3.0)

    def test_stop_gradient_cuts_upstream(self):
        w = parameter(rng.standard_normal((3, 3)))
        v = parameter(rng.standard_normal((3, 1)))
        x = Tensor(rng.standard_normal((2, 3)))
        h = ad.tanh(ad.matmul(x, w))
        out = ad.matmul(ad.stop_gradient(h), v).sum() + h.sum() * 0.0
        out.backward()
        assert np.array_equal(w.grad, np.zeros((3, 3)))
        assert np.abs(v.grad).sum() > 0

    def test_gather_frames_gradient(self):
        order = np.array([[2, 0, 1], [1, 2, 0]])
        assert gradcheck(lambda x: ad.gather_frames(x, order), [rng.standard_normal((2, 3, 4))]) < 1e-8

    def test_softmax_and_misc_gradients(self):
        x = rng.standard_normal((3, 5))
        assert gradcheck(lambda a: ad.softmax(a, axis=-1), [x]) < 1e-6
        assert gradcheck(lambda a: ad.relu(a) * ad.exp(a * 0.1), [x]) < 1e-6
        assert gradcheck(lambda a: ad.transpose(a)[1:3] * 2.0, [x]) < 1e-6
        assert gradcheck(lambda a: a.mean(axis=0) + a.sum(axis=1, keepdims=True).sum(), [x]) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    state = {"a.w": rng.standard_normal((3, 4)), "b": np.array([np.pi, 1 / 3])}
    path = ad.save_checkpoint(tmp_path / "ck.npz", state, {"D": 4})
    loaded, meta = ad.load_checkpoint(path)
    assert meta == {"D": 4}
    for k in state:
        assert np.array_equal(loaded[k], state[k])


class TestDropout:
    def test_identity_without_generator_or_rate(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.dropout(x, 0.5, None) is x
        assert np.array_equal(ad.dropout(x, 0.0, np.random.default_rng(0)).data, x.data)

    def test_mask_and_scale(self):
        x = Tensor(np.ones((200, 50)), requires_grad=True)
        out = ad.dropout(x, 0.25, np.random.default_rng(1))
        kept = out.data != 0
        assert np.allclose(out.data[kept], 1 / 0.75)
        assert abs(kept.mean() - 0.75) < 0.01
        out.backward(np.ones_like(out.data))
        assert np.array_equal(x.grad, out.data)

    def test_gradient(self):
        x = rng.standard_normal((3, 4))
        assert gradcheck(lambda a: ad.dropout(a, 0.3, np.random.default_rng(5)), [x]) < 1e-8

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0))
