"""Vision encoder behavior: shapes, gates, attention, and composed gradients."""

import numpy as np
import pytest

from drivevqa.tensor import Tensor, no_grad
from drivevqa import functional as F
from drivevqa.encoder import (
    EncoderConfig, ScaleAttention, CrossScaleFusion, LocalGlobalHead,
    VisionEncoder, export_attention_maps,
)
from drivevqa.gradcheck import grad_check


def build(n_views=1, input_size=32, num_classes=None, seed=7):
    cfg = EncoderConfig(n_views=n_views, input_size=input_size,
                        num_classes=num_classes)
    return VisionEncoder(cfg, np.random.default_rng(seed))


def images(b, n, hw, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((b, n, 3, hw, hw)).astype(np.float32)


class TestShapes:
    def test_six_view_embedding_flattens_to_144(self):
        enc = build(n_views=6)
        enc.eval()
        e = enc.encode_views(images(2, 6, 32))
        assert e.shape == (2, 6, 24)
        assert enc.cfg.embed_dim == 144
        assert e.data.reshape(2, -1).shape == (2, 144)

    def test_single_view_embedding_is_24(self):
        enc = build(n_views=1)
        enc.eval()
        e = enc.encode_views(images(3, 1, 32))
        assert e.shape == (3, 1, 24)
        assert enc.cfg.embed_dim == 24

    def test_view_count_mismatch_raises(self):
        enc = build(n_views=2)
        from drivevqa.tensor import ShapeError
        with pytest.raises(ShapeError):
            enc.encode_views(images(1, 3, 32))

    def test_input_size_must_be_divisible_by_four(self):
        with pytest.raises(ValueError):
            EncoderConfig(input_size=30)

    def test_logits_shape_at_full_resolution(self):
        enc = build(num_classes=11, input_size=224)
        enc.eval()
        x = images(1, 1, 224)[:, 0]
        with no_grad():
            logits, fused = enc.classify_views(x)
        assert logits.shape == (1, 11)
        assert fused.shape == (1, 24, 224, 224)

    def test_head_flatten_is_294(self):
        enc = build(num_classes=11)
        assert enc.head.fc1.weight.shape == (294, 64)
        assert enc.head.fc2.weight.shape == (64, 11)

    def test_no_head_classify_raises(self):
        enc = build(num_classes=None)
        with pytest.raises(RuntimeError):
            enc.classify(Tensor(np.zeros((1, 24, 32, 32), dtype=np.float32)))


class TestGatesAndAttention:
    def test_fusion_gate_is_simplex(self):
        enc = build()
        enc.eval()
        with no_grad():
            _, _, gate = enc.fuse_view(Tensor(images(4, 1, 32)[:, 0]))
        assert gate.shape == (4, 24)
        assert np.all(gate.data > 0)
        np.testing.assert_allclose(gate.data.sum(axis=1), 1.0, atol=1e-6)

    def test_attention_maps_live_in_unit_interval(self):
        enc = build()
        enc.eval()
        enc.capture_attention = True
        with no_grad():
            enc.fuse_view(Tensor(images(2, 1, 32)[:, 0]))
        for (scale, stage), arr in enc.attention_maps.items():
            assert stage in ("spatial", "refined")
            if stage == "spatial":
                assert arr.min() > 0.0 and arr.max() < 1.0, (scale, stage)
        sizes = {s: enc.attention_maps[(s, "spatial")].shape[2]
                 for s in ("high", "mid", "low")}
        assert sizes == {"high": 32, "mid": 16, "low": 8}

    def test_channel_gate_with_zero_weights_halves_input(self):
        att = ScaleAttention("low", 8, np.random.default_rng(0))
        for t in (att.squeeze.weight, att.squeeze.bias,
                  att.excite.weight, att.excite.bias):
            t.data[...] = 0.0
        p = Tensor(np.random.default_rng(1).random((2, 8, 8, 8)).astype(np.float32))
        out = att.channel_gate(p)
        np.testing.assert_allclose(out.data, 0.5 * p.data, rtol=1e-6)

    def test_spatial_map_with_zero_conv_is_half(self):
        att = ScaleAttention("low", 8, np.random.default_rng(0))
        att.spatial_conv.weight.data[...] = 0.0
        att.spatial_conv.bias.data[...] = 0.0
        c = Tensor(np.random.default_rng(1).random((2, 8, 8, 8)).astype(np.float32))
        a = att.spatial_map(c)
        np.testing.assert_allclose(a.data, 0.5, rtol=0, atol=1e-7)

    def test_fusion_rejects_wrong_scale_ratio(self):
        from drivevqa.tensor import ShapeError
        fus = CrossScaleFusion(24, np.random.default_rng(0))
        h = Tensor(np.zeros((1, 8, 32, 32), dtype=np.float32))
        m = Tensor(np.zeros((1, 8, 32, 32), dtype=np.float32))
        l = Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            fus(h, m, l)


class TestDynamicDepthwise:
    def test_delta_kernel_is_identity(self):
        x = Tensor(np.random.default_rng(0).random((2, 3, 6, 6)).astype(np.float32))
        k = np.zeros((2, 3, 3, 3), dtype=np.float32)
        k[:, :, 1, 1] = 1.0
        out = F.conv2d_dynamic_depthwise(x, Tensor(k), padding=1)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_uniform_kernel_is_box_mean(self):
        x = Tensor(np.ones((1, 2, 5, 5), dtype=np.float32))
        k = Tensor(np.full((1, 2, 3, 3), 1.0 / 9.0, dtype=np.float32))
        out = F.conv2d_dynamic_depthwise(x, k, padding=1)
        # interior of a constant image stays constant under an averaging kernel
        np.testing.assert_allclose(out.data[:, :, 1:-1, 1:-1], 1.0, rtol=1e-6)
        # corners see 4 of 9 taps
        np.testing.assert_allclose(out.data[:, :, 0, 0], 4.0 / 9.0, rtol=1e-6)

    def test_generated_kernels_are_per_tap_simplex(self):
        head = LocalGlobalHead(24, 11, 64, 0.0, np.random.default_rng(0),
                               np.random.default_rng(1))
        fused = Tensor(np.random.default_rng(2).random((3, 24, 16, 16)).astype(np.float32))
        k = head.dynamic_kernels(fused)
        assert k.shape == (3, 24, 3, 3)
        assert np.all(k.data > 0)
        np.testing.assert_allclose(k.data.reshape(3, 24, 9).sum(-1), 1.0, atol=1e-6)

    def test_kernels_differ_across_samples(self):
        head = LocalGlobalHead(24, 11, 64, 0.0, np.random.default_rng(0),
                               np.random.default_rng(1))
        fused = Tensor(np.random.default_rng(2).random((2, 24, 16, 16)).astype(np.float32))
        k = head.dynamic_kernels(fused)
        assert not np.allclose(k.data[0], k.data[1])


class TestDeterminismAndIndependence:
    def test_eval_forward_is_bit_identical(self):
        enc = build()
        enc.eval()
        x = Tensor(images(2, 1, 32)[:, 0])
        with no_grad():
            a = enc.fuse_view(x)[1].data
            b = enc.fuse_view(x)[1].data
        assert np.array_equal(a, b)

    def test_eval_views_are_independent(self):
        enc = build(n_views=2)
        enc.eval()
        x = images(1, 2, 32)
        swapped = x[:, ::-1].copy()
        with no_grad():
            e = enc.encode_views(x).data
            es = enc.encode_views(swapped).data
        np.testing.assert_array_equal(e[:, ::-1], es)

    def test_same_seed_same_weights(self):
        a, b = build(seed=11), build(seed=11)
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)


class TestComposedGradients:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_encoder_float32_gradients(self, seed):
        enc = build(seed=seed)
        enc.train()
        x = Tensor(images(2, 1, 32, seed=seed))
        proj_rng = np.random.default_rng(100 + seed)

        def through_stem(w):
            enc.stem_conv.weight = w
            return enc.encode_views(x)

        w0 = enc.stem_conv.weight.data.copy()
        rep = grad_check(through_stem, [w0], tolerance=1e-3, rng=proj_rng,
                         name="encoder/stem", step=1e-2, dtype=np.float32)
        assert rep.passed, repr(rep)

    def test_fusion_gate_gradients(self):
        enc = build(seed=3)
        enc.train()
        x = Tensor(images(2, 1, 32, seed=3))

        def through_gate(w):
            enc.fusion.gate_out.weight = w
            return enc.encode_views(x)

        w0 = enc.fusion.gate_out.weight.data.copy()
        rep = grad_check(through_gate, [w0], tolerance=1e-3,
                         rng=np.random.default_rng(5),
                         name="encoder/fusion-gate", step=1e-2, dtype=np.float32)
        assert rep.passed, repr(rep)


class TestExport:
    def test_export_names_and_constant_map(self, tmp_path):
        maps = {
            ("high", "spatial"): np.full((1, 1, 8, 8), 0.5, dtype=np.float32),
            ("low", "refined"): np.linspace(0, 1, 64, dtype=np.float32).reshape(1, 1, 8, 8),
        }
        paths = export_attention_maps(maps, "frame42", str(tmp_path))
        names = sorted(p.split("/")[-1] for p in paths)
        assert names == ["frame42.high.spatial.png", "frame42.low.refined.png"]
        from PIL import Image
        img = np.asarray(Image.open(tmp_path / "frame42.high.spatial.png"))
        assert img.shape == (8, 8) and np.all(img == 128)
        img2 = np.asarray(Image.open(tmp_path / "frame42.low.refined.png"))
        assert img2.min() == 0 and img2.max() == 255


class TestHeadNormControl:
    def test_norm_layers_lists_all_head_batchnorms(self):
        enc = build(num_classes=11)
        head = enc.head
        assert head.norm_layers() == (head.global_bn, head.reduce_bn,
                                      head.down1_bn, head.down2_bn)

    def test_norms_can_run_inference_mode_inside_training(self):
        enc = build(num_classes=11)
        enc.head.train()
        for bn in enc.head.norm_layers():
            bn.eval()
        assert enc.head.training and enc.head.dropout.training
        assert not any(bn.training for bn in enc.head.norm_layers())
        # inference-mode norms leave running buffers untouched by a forward
        before = [bn.running_mean.copy() for bn in enc.head.norm_layers()]
        x = Tensor(np.random.default_rng(0)
                   .random((2, 24, 32, 32)).astype(np.float32))
        enc.head.forward(x)
        for bn, prev in zip(enc.head.norm_layers(), before):
            np.testing.assert_array_equal(bn.running_mean, prev)
