import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from trihorn import tensor as T
from trihorn.model import (MODES, EncoderSpec, ModelSpec, build_encoder, build_model,
                           compute_losses, estimate_depth, fuse_attention, integrate_uv, loss_depth,
                           loss_uv, pool_depth_features, total_loss, Linear)
from trihorn.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def tiny_spec(**kw):
    enc = EncoderSpec(kw.pop("variant", "hourglass"), kw.pop("base", 4), kw.pop("out", 4), kw.pop("levels", 2))
    return ModelSpec(n_joints=kw.pop("J", 2), depth_features=kw.pop("D", 6), head_channels=kw.pop("w", 4),
                     encoder=enc, **kw)


class TestIntegrateUV:
    def test_delta(self):
        h = np.zeros((1, 8, 6))
        h[0, 5, 3] = 1.0  # v = 5 (row), u = 3 (column)
        np.testing.assert_array_equal(integrate_uv(t64(h)).data, [[3.0, 5.0]])

    def test_uniform(self):
        h, w = 7, 10
        out = integrate_uv(t64(np.full((1, h, w), 1 / (h * w)))).data
        np.testing.assert_allclose(out, [[(w - 1) / 2, (h - 1) / 2]], atol=1e-12)

    def test_two_point(self):
        h = np.zeros((1, 4, 4))
        h[0, 0, 0] = h[0, 2, 2] = 0.5
        np.testing.assert_allclose(integrate_uv(t64(h)).data, [[1.0, 1.0]], atol=1e-15)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            integrate_uv(t64(np.full((1, 2, 2), 0.3)))
        bad = np.array([[[1.5, -0.5], [0.0, 0.0]]])
        with pytest.raises(ValueError):
            integrate_uv(t64(bad))

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (2, 5, 5), elements=st.floats(0, 1)), st.integers(0, 3), st.integers(0, 3))
    def test_translation_equivariant(self, a, du, dv):
        a = a + 1e-3
        p = np.zeros((2, 9, 9))
        p[:, :5, :5] = a / a.sum(axis=(1, 2), keepdims=True)
        q = np.roll(np.roll(p, dv, axis=1), du, axis=2)  # no mass wraps around
        shift = integrate_uv(t64(q)).data - integrate_uv(t64(p)).data
        np.testing.assert_allclose(shift, np.tile([du, dv], (2, 1)), atol=1e-12)


class TestLosses:
    def test_uv_zero(self):
        assert loss_uv(t64([[1.0, 2.0]]), [[1.0, 2.0]]).item() == 0.0

    def test_uv_single_joint(self):
        assert loss_uv(t64([[1.0, 2.0]]), [[0.0, 0.0]]).item() == pytest.approx(1.5, abs=1e-12)

    def test_uv_two_joints(self):
        pred = t64([[1.0, 1.0], [3.0, 5.0]])
        assert loss_uv(pred, np.zeros((2, 2))).item() == pytest.approx(2.5, abs=1e-12)

    def test_uv_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            loss_uv(t64(np.zeros((2, 2))), np.zeros((3, 2)))

    def test_depth(self):
        assert loss_depth(t64([0.3]), [0.3]).item() == 0.0
        assert loss_depth(t64([0.25]), [0.0]).item() == pytest.approx(0.25, abs=1e-12)
        assert loss_depth(t64([0.1, 0.2, 0.3, 0.4]), np.zeros(4)).item() == pytest.approx(0.25, abs=1e-12)

    @pytest.mark.parametrize("luv,ld,lam,expected", [(0, 0, 3.0, 0.0), (1.5, 0.25, 1, 1.75), (1.5, 0.25, 2, 2.0)])
    def test_total(self, luv, ld, lam, expected):
        assert total_loss(t64(luv), t64(ld), lam).item() == pytest.approx(expected, abs=1e-12)

    def test_total_zero_iff_exact(self):
        m = build_model(tiny_spec(J=1), dtype=np.float64)
        x = np.random.default_rng(0).uniform(-1, 1, (1, 1, 16, 16))
        out = m(x)
        _, losses = compute_losses(m, x, out["pose"])
        assert losses["loss"].item() == pytest.approx(0.0, abs=1e-12)
        shifted = out["pose"].copy()
        shifted[..., 2] += 0.01
        _, losses = compute_losses(m, x, shifted)
        assert losses["loss"].item() > 0


class TestFusionAndPooling:
    def test_beta_endpoints(self):
        rng = np.random.default_rng(0)
        a, b = t64(rng.standard_normal((2, 3, 3))), t64(rng.standard_normal((2, 3, 3)))
        np.testing.assert_allclose(fuse_attention(a, b, t64([1.0, 1.0])).data, T.spatial_softmax(a).data, atol=1e-15)
        np.testing.assert_allclose(fuse_attention(a, b, t64([0.0, 0.0])).data, T.spatial_softmax(b).data, atol=1e-15)

    def test_half_beta_value(self):
        a = t64([[[0.0, 0.0], [0.0, 0.0]]])
        b = t64([[[2 * math.log(2), 0.0], [0.0, 0.0]]])
        np.testing.assert_allclose(fuse_attention(a, b, t64([0.5])).data, [[[0.4, 0.2], [0.2, 0.2]]], atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (3, 4, 4), elements=st.floats(-20, 20)),
           hnp.arrays(np.float64, (3, 4, 4), elements=st.floats(-20, 20)),
           hnp.arrays(np.float64, (3,), elements=st.floats(-50, 50)),
           hnp.arrays(np.float64, (3,), elements=st.floats(0.01, 0.99)))
    def test_shift_invariance(self, a, b, c, beta):
        f0 = fuse_attention(t64(a), t64(b), t64(beta)).data
        f1 = fuse_attention(t64(a + c[:, None, None]), t64(b + c[:, None, None]), t64(beta)).data
        np.testing.assert_allclose(f0, f1, atol=1e-9)

    def test_pool_selection(self):
        rng = np.random.default_rng(1)
        d = rng.standard_normal((5, 3, 4))
        att = np.zeros((1, 3, 4))
        att[0, 2, 1] = 1.0
        np.testing.assert_array_equal(pool_depth_features(t64(att), t64(d)).data, [d[:, 2, 1]])

    def test_pool_uniform(self):
        d = np.random.default_rng(2).standard_normal((4, 3, 3))
        att = np.full((2, 3, 3), 1 / 9)
        out = pool_depth_features(t64(att), t64(d)).data
        np.testing.assert_allclose(out, np.tile(d.mean(axis=(1, 2)), (2, 1)), atol=1e-15)

    def test_pool_weighted(self):
        d = np.zeros((2, 1, 2))
        d[:, 0, 0] = (1.0, 0.0)
        d[:, 0, 1] = (0.0, 1.0)
        att = np.array([[[0.25, 0.75]]])
        np.testing.assert_allclose(pool_depth_features(t64(att), t64(d)).data, [[0.25, 0.75]], atol=1e-15)

    def test_pool_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            pool_depth_features(t64(np.ones((1, 3, 3)) / 9), t64(np.ones((2, 4, 4))))


class TestDepthHead:
    def _head(self, w, b):
        head = Linear(np.random.default_rng(0), len(w), 1, np.float64)
        head.weight.data[...] = np.asarray(w, dtype=np.float64)[None]
        head.bias.data[...] = b
        return head

    def test_zero_weight(self):
        F = t64(np.random.default_rng(0).standard_normal((4, 3)))
        np.testing.assert_array_equal(estimate_depth(F, self._head([0, 0, 0], 0.7)).data, np.full(4, 0.7))

    def test_basis(self):
        head = self._head([0.3, -2.0, 5.0], 0.1)
        out = estimate_depth(t64(np.eye(3)), head).data
        np.testing.assert_allclose(out, [0.4, -1.9, 5.1], atol=1e-15)

    def test_dot_product(self):
        out = estimate_depth(t64([[0.5, -1.0]]), self._head([2.0, 3.0], 0.1)).data
        assert out[0] == pytest.approx(-1.9, abs=1e-12)

    def test_single_shared_parameter(self):
        for J in (1, 3, 7):
            m = build_model(tiny_spec(J=J))
            names = [n for n, _ in m.named_parameters() if n.startswith("depth_head")]
            assert sorted(names) == ["depth_head.bias", "depth_head.weight"]
            assert m.depth_head.weight.shape == (1, m.spec.depth_features)

    def test_perturbation_form(self):
        rng = np.random.default_rng(3)
        F = t64(rng.standard_normal((5, 4)))
        head = self._head(rng.standard_normal(4), 0.2)
        z0 = estimate_depth(F, head).data
        dW = rng.standard_normal(4) * 1e-3
        head.weight.data[0] += dW
        np.testing.assert_allclose(estimate_depth(F, head).data - z0, F.data @ dW, atol=1e-14)


class TestNetwork:
    def test_shapes_128(self):
        m = build_model(tiny_spec(J=3, levels=3))
        out = m(np.zeros((2, 1, 128, 128), dtype=np.float32))
        assert out["heatmaps"].shape == (2, 3, 64, 64)
        assert out["pose"].shape == (2, 3, 3)

    def test_single_image_input(self):
        m = build_model(tiny_spec(J=2))
        out = m(np.zeros((1, 16, 16), dtype=np.float32))
        assert out["pose"].shape == (2, 3)

    def test_constant_input_normalized(self):
        m = build_model(tiny_spec(J=2, levels=3))
        out = m(np.full((1, 1, 32, 32), 0.3, dtype=np.float32))
        assert np.all(np.isfinite(out["pose"]))
        np.testing.assert_allclose(out["heatmaps"].data.sum(axis=(-2, -1)), 1.0, atol=1e-6)
        np.testing.assert_allclose(out["att_fused"].data.sum(axis=(-2, -1)), 1.0, atol=1e-6)

    @pytest.mark.parametrize("shape", [(1, 1, 20, 20), (1, 1, 16, 32), (1, 2, 16, 16), (16, 16)])
    def test_wrong_input(self, shape):
        m = build_model(tiny_spec())
        with pytest.raises(T.ShapeError):
            m(np.zeros(shape, dtype=np.float32))

    @pytest.mark.parametrize("variant", ["hourglass", "downsample_deconv"])
    def test_encoder_halves(self, variant):
        enc = build_encoder(np.random.default_rng(0), EncoderSpec(variant, 4, 5, 2))
        assert enc(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32))).shape == (1, 5, 16, 16)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ModelSpec(mode="fuse_max")
        with pytest.raises(ValueError):
            EncoderSpec(variant="resnet")

    def test_beta_starts_at_half(self):
        m = build_model(tiny_spec(J=4))
        np.testing.assert_array_equal(m.beta().data, np.full(4, 0.5, dtype=np.float32))

    @pytest.mark.parametrize("mode", MODES)
    def test_all_modes_normalized(self, mode):
        m = build_model(tiny_spec(J=3, mode=mode), dtype=np.float64)
        x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 16, 16))
        out = m(x)
        w = out["att_fused"].data
        assert w.shape == (2, 3, 8, 8)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=(-2, -1)), 1.0, atol=1e-12)

    def test_uv_only_has_no_enhancement_branch(self):
        m = build_model(tiny_spec(mode="uv_only"))
        assert not any(n.startswith("enh_head") for n, _ in m.named_parameters())

    def test_fused_beta_one_matches_uv_only_pooling(self):
        m = build_model(tiny_spec(J=2), dtype=np.float64)
        m.beta_raw.data[...] = 60.0  # logistic saturates to exactly 1.0
        x = np.random.default_rng(1).uniform(-1, 1, (1, 1, 16, 16))
        out = m(x)
        np.testing.assert_allclose(out["att_fused"].data, T.spatial_softmax(out["att_uv"]).data, atol=1e-15)

    def test_fuse_sum_identity(self):
        m = build_model(tiny_spec(J=2, mode="fuse_sum"), dtype=np.float64)
        x = np.random.default_rng(2).uniform(-1, 1, (1, 1, 16, 16))
        out = m(x)
        a2 = T.mul_scalar(out["att_uv"], 2.0)
        b2 = T.mul_scalar(out["att_enh"], 2.0)
        ref = fuse_attention(a2, b2, t64([0.5, 0.5])).data
        np.testing.assert_allclose(out["att_fused"].data, ref, atol=1e-12)

    def test_regression_baseline(self):
        m = build_model(tiny_spec(J=3, arch="regression", regression_hidden=8))
        out = m(np.zeros((2, 1, 16, 16), dtype=np.float32))
        assert out["pose"].shape == (2, 3, 3)

    def test_state_dict_round_trip(self):
        a = build_model(tiny_spec(), seed=1)
        b = build_model(tiny_spec(), seed=2)
        b.load_state_dict(a.state_dict())
        x = np.random.default_rng(0).uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(a(x)["pose"], b(x)["pose"])

    def test_state_dict_mismatch(self):
        a = build_model(tiny_spec(J=2))
        b = build_model(tiny_spec(J=3))
        with pytest.raises((KeyError, T.ShapeError)):
            b.load_state_dict(a.state_dict())

    def test_nan_input_aborts(self):
        m = build_model(tiny_spec())
        x = np.zeros((1, 1, 16, 16), dtype=np.float32)
        x[0, 0, 3, 3] = np.nan
        with pytest.raises(FloatingPointError):
            m(x)

    def test_same_seed_same_weights(self):
        a = build_model(tiny_spec(), seed=5).state_dict()
        b = build_model(tiny_spec(), seed=5).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestToyGradient:
    def test_eight_pixel_network(self):
        spec = ModelSpec(n_joints=1, depth_features=3, head_channels=2,
                         encoder=EncoderSpec("hourglass", 2, 2, 2))
        m = build_model(spec, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1, 1, (1, 1, 8, 8)), requires_grad=True)
        gt = np.array([[[3.2, 4.1, 0.2]]])
        worst, _, checked = T.grad_check_params(lambda: compute_losses(m, x, gt)[1]["loss"],
                                                m.parameters() + [x])
        assert checked > 100
        assert worst < 1e-4
