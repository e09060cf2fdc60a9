"""Multi-resolution vision encoder.

A shared stem feeds three resolution branches (full, half, quarter); each
branch is projected to a common 8-channel space, gated by channel attention,
then masked by a scale-specific spatial-attention map built from cheap
statistics (channel mean/max plus an edge or texture descriptor). The three
scales are upsampled to full resolution, concatenated to 24 channels, and
fused under a softmax channel gate; global average pooling of the fused map
gives one 24-d embedding per view. An optional classification head runs a
per-sample dynamic depthwise convolution next to a dilated global convolution
and reduces to 11 logits.
"""

import numpy as np

from .tensor import (
    Tensor, ShapeError, no_grad, concat, softmax, sigmoid, relu, tmax,
)
from . import functional as F
from .layers import (
    Module, Linear, Conv2d, ConvSpec, BatchNorm2d, Dropout, parameter,
)


class EncoderConfig:
    """Geometry and head settings for the vision encoder."""

    def __init__(self, n_views=1, stem_channels=8, high_channels=16,
                 mid_channels=32, low_channels=64, proj_channels=8,
                 input_size=224, num_classes=11, fc_units=64, fc_dropout=0.2):
        if input_size % 4 != 0:
            raise ValueError(f"input_size must be divisible by 4 (two stride-2 pools), got {input_size}")
        if n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {n_views}")
        self.n_views = n_views
        self.stem_channels = stem_channels
        self.high_channels = high_channels
        self.mid_channels = mid_channels
        self.low_channels = low_channels
        self.proj_channels = proj_channels
        self.input_size = input_size
        self.num_classes = num_classes    # None -> no classification head
        self.fc_units = fc_units
        self.fc_dropout = fc_dropout

    @property
    def fused_channels(self):
        return 3 * self.proj_channels

    @property
    def embed_dim(self):
        """Per-batch flattened vision width: n views x 3 scales x proj channels."""
        return self.n_views * self.fused_channels


def _conv_bn_relu(in_ch, out_ch, kernel, rng, stride=1, dilation=1):
    pad = dilation * (kernel // 2)
    # bias omitted: the batch norm's shift makes it redundant
    conv = Conv2d(ConvSpec(in_ch, out_ch, kernel, stride=stride, padding=pad,
                           dilation=dilation), rng, bias=False)
    return conv, BatchNorm2d(out_ch)


class ScaleAttention(Module):
    """Channel gate + spatial mask for one resolution branch.

    The spatial descriptor stack depends on the scale: the full-resolution
    branch adds an edge-magnitude map, the half-resolution branch a local
    texture-variance map, the quarter branch uses mean/max only. Kernel sizes
    grow with coarseness (3 / 5 / 7).
    """

    DESCRIPTORS = {"high": ("sobel", 3), "mid": ("localvar", 5), "low": (None, 7)}

    def __init__(self, scale, channels, rng):
        super().__init__()
        if scale not in self.DESCRIPTORS:
            raise ValueError(f"unknown scale tag {scale!r}")
        self.scale = scale
        self.channels = channels
        hidden = max(channels // 4, 1)
        self.squeeze = Linear(channels, hidden, rng)
        self.excite = Linear(hidden, channels, rng)
        extra, kernel = self.DESCRIPTORS[scale]
        in_ch = 2 if extra is None else 3
        self.spatial_conv = Conv2d(
            ConvSpec(in_ch, 1, kernel, padding=kernel // 2), rng)
        self._extra = extra

    def channel_gate(self, p):
        z = F.global_avg_pool(p).reshape(p.shape[0], self.channels)
        g = sigmoid(self.excite(relu(self.squeeze(z))))
        return p * g.reshape(p.shape[0], self.channels, 1, 1)

    def spatial_map(self, c):
        avg = c.mean(axis=1, keepdims=True)
        mx = tmax(c, axis=1, keepdims=True)
        stack = [avg, mx]
        if self._extra == "sobel":
            stack.append(F.sobel_magnitude(avg))
        elif self._extra == "localvar":
            stack.append(F.local_variance(avg))
        return sigmoid(self.spatial_conv(concat(stack, axis=1)))

    def forward(self, p):
        c = self.channel_gate(p)
        a = self.spatial_map(c)
        return c * a, a


class CrossScaleFusion(Module):
    """Upsample the coarser maps, concatenate, and gate channels by softmax."""

    def __init__(self, fused_channels, rng, hidden=16):
        super().__init__()
        self.fused_channels = fused_channels
        self.gate_in = Linear(fused_channels, hidden, rng)
        self.gate_out = Linear(hidden, fused_channels, rng)

    def forward(self, high, mid, low):
        b, c, h, w = high.shape
        if mid.shape[2] * 2 != h or low.shape[2] * 4 != h:
            raise ShapeError(
                f"spatial axis: scale ratios must be 1:2:4, got {h}, {mid.shape[2]}, {low.shape[2]}")
        stack = concat([
            high,
            F.upsample_bilinear(mid, h, w),
            F.upsample_bilinear(low, h, w),
        ], axis=1)
        z = F.global_avg_pool(stack).reshape(b, self.fused_channels)
        gate = softmax(self.gate_out(relu(self.gate_in(z))), axis=-1)
        fused = stack * gate.reshape(b, self.fused_channels, 1, 1)
        embed = F.global_avg_pool(fused).reshape(b, self.fused_channels)
        return fused, embed, gate


class LocalGlobalHead(Module):
    """Classification head: per-sample dynamic depthwise conv (local cues)
    beside a dilated conv (global cues), reduced to 11-way logits.

    Spatial plan for 224 inputs: 224 -> strided reduce 112 -> two stride-2
    convs 56/28 -> 4x4/4 pool 7 -> adaptive 7x7 (identity there) -> 294.
    """

    def __init__(self, in_channels, num_classes, fc_units, fc_dropout, rng,
                 dropout_rng):
        super().__init__()
        self.in_channels = in_channels
        self.kernel_gen = Linear(in_channels, in_channels * 9, rng)
        self.global_channels = in_channels // 4
        self.global_conv, self.global_bn = _conv_bn_relu(in_channels, self.global_channels, 3, rng, dilation=2)
        self.reduce_conv, self.reduce_bn = _conv_bn_relu(in_channels + self.global_channels, 12, 1, rng, stride=2)
        self.down1, self.down1_bn = _conv_bn_relu(12, 6, 3, rng, stride=2)
        self.down2, self.down2_bn = _conv_bn_relu(6, 6, 3, rng, stride=2)
        self.fc1 = Linear(6 * 7 * 7, fc_units, rng)
        self.dropout = Dropout(fc_dropout, dropout_rng)
        self.fc2 = Linear(fc_units, num_classes, rng)

    def norm_layers(self):
        return (self.global_bn, self.reduce_bn, self.down1_bn, self.down2_bn)

    def dynamic_kernels(self, fused):
        """Per-sample depthwise 3x3 kernels from pooled context, softmax-
        normalized over the 9 taps so the local path stays a weighted average."""
        b = fused.shape[0]
        z = F.global_avg_pool(fused).reshape(b, self.in_channels)
        k = self.kernel_gen(z).reshape(b, self.in_channels, 9)
        return softmax(k, axis=-1).reshape(b, self.in_channels, 3, 3)

    def mix(self, fused):
        """Local + global paths, concatenated and reduced to 12ch at half res."""
        local = F.conv2d_dynamic_depthwise(fused, self.dynamic_kernels(fused))
        glob = self.global_bn(self.global_conv(fused), fuse_relu=True)
        both = concat([local, glob], axis=1)
        out = self.reduce_bn(self.reduce_conv(both), fuse_relu=True)
        return F.max_pool2d(out, 3, stride=1, padding=1)

    def forward(self, fused):
        x = self.mix(fused)
        x = self.down1_bn(self.down1(x), fuse_relu=True)
        x = self.down2_bn(self.down2(x), fuse_relu=True)
        x = F.max_pool2d(x, 4, stride=4)
        x = F.adaptive_avg_pool2d(x, 7)
        x = x.reshape(x.shape[0], 6 * 7 * 7)
        x = self.dropout(relu(self.fc1(x)))
        return self.fc2(x)


class VisionEncoder(Module):
    """Stem -> three branches -> projection -> attention -> gated fusion.

    ``capture_attention`` keeps the last spatial-attention and refined maps
    (detached) in ``self.attention_maps`` for inspection/export.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.capture_attention = False
        self.attention_maps = {}
        cs = cfg.stem_channels
        self.stem_conv, self.stem_bn = _conv_bn_relu(3, cs, 3, rng)
        self.high_conv, self.high_bn = _conv_bn_relu(cs, cfg.high_channels, 3, rng)
        self.mid_conv, self.mid_bn = _conv_bn_relu(cs, cfg.mid_channels, 3, rng)
        self.low_conv, self.low_bn = _conv_bn_relu(cs, cfg.low_channels, 3, rng)
        cp = cfg.proj_channels
        self.proj_high = Conv2d(ConvSpec(cfg.high_channels, cp, 1), rng)
        self.proj_mid = Conv2d(ConvSpec(cfg.mid_channels, cp, 1), rng)
        self.proj_low = Conv2d(ConvSpec(cfg.low_channels, cp, 1), rng)
        self.attend_high = ScaleAttention("high", cp, rng)
        self.attend_mid = ScaleAttention("mid", cp, rng)
        self.attend_low = ScaleAttention("low", cp, rng)
        self.fusion = CrossScaleFusion(cfg.fused_channels, rng)
        if cfg.num_classes is not None:
            drop_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
            self.head = LocalGlobalHead(cfg.fused_channels, cfg.num_classes,
                                        cfg.fc_units, cfg.fc_dropout, rng, drop_rng)
        else:
            self.head = None

    # -- stages ----------------------------------------------------------
    def stem_forward(self, view):
        if view.shape[1] != 3:
            raise ShapeError(f"channel axis: stem expects RGB (3), got {view.shape[1]}")
        return self.stem_bn(self.stem_conv(view), fuse_relu=True)

    def branch_forward(self, s):
        if s.shape[2] % 4 or s.shape[3] % 4:
            raise ShapeError(f"spatial axis: {s.shape[2]}x{s.shape[3]} not divisible by 4")
        high = self.high_bn(self.high_conv(s), fuse_relu=True)
        half = F.max_pool2d(s, 2)
        mid = self.mid_bn(self.mid_conv(half), fuse_relu=True)
        quarter = F.max_pool2d(half, 2)
        low = self.low_bn(self.low_conv(quarter), fuse_relu=True)
        return high, mid, low

    def project_scales(self, high, mid, low):
        return self.proj_high(high), self.proj_mid(mid), self.proj_low(low)

    def fuse_view(self, view):
        """Full per-view chain; returns (fused map, 24-d embedding, gate)."""
        high, mid, low = self.branch_forward(self.stem_forward(view))
        ph, pm, pl = self.project_scales(high, mid, low)
        rh, ah = self.attend_high(ph)
        rm, am = self.attend_mid(pm)
        rl, al = self.attend_low(pl)
        if self.capture_attention:
            self.attention_maps = {
                ("high", "spatial"): ah.data.copy(),
                ("mid", "spatial"): am.data.copy(),
                ("low", "spatial"): al.data.copy(),
                ("high", "refined"): rh.data.mean(axis=1, keepdims=True),
                ("mid", "refined"): rm.data.mean(axis=1, keepdims=True),
                ("low", "refined"): rl.data.mean(axis=1, keepdims=True),
            }
        return self.fusion(rh, rm, rl)

    def encode_views(self, x):
        """(b, n, 3, h, w) -> per-view embeddings (b, n, 3*proj_channels).

        Views share all weights and, in eval mode, are fully independent
        (train-mode batch norm couples the batch by design).
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 5:
            raise ShapeError(f"encode_views wants (b, n, 3, h, w), got rank {x.ndim}")
        b, n = x.shape[0], x.shape[1]
        if n != self.cfg.n_views:
            raise ShapeError(f"view axis: config says {self.cfg.n_views} views, batch has {n}")
        flat = x.reshape(b * n, *x.shape[2:])
        _, embed, _ = self.fuse_view(flat)
        return embed.reshape(b, n, self.cfg.fused_channels)

    def classify(self, fused):
        if self.head is None:
            raise RuntimeError("encoder built without a classification head")
        return self.head(fused)

    def classify_views(self, x):
        """(b, 3, h, w) single-frame batch -> (logits, fused map)."""
        fused, _, _ = self.fuse_view(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32)))
        return self.classify(fused), fused


def export_attention_maps(maps, frame_id, out_dir):
    """Write captured maps as 8-bit grayscale PNGs.

    Files are named ``{frame_id}.{scale}.{stage}.png``; each map is min-max
    scaled to [0, 255] (a constant map exports as mid-gray).
    """
    from PIL import Image
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for (scale, stage), arr in maps.items():
        a = np.asarray(arr)[0, 0]
        lo, hi = float(a.min()), float(a.max())
        if hi - lo < 1e-12:
            img = np.full(a.shape, 128, dtype=np.uint8)
        else:
            img = np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)
        path = os.path.join(out_dir, f"{frame_id}.{scale}.{stage}.png")
        Image.fromarray(img, mode="L").save(path)
        paths.append(path)
    return paths
