"""Closed-form parameter and FLOP accounting.

Parameter formulas mirror the module definitions term by term and are
cross-checked against walked module totals in the test suite. FLOP counts
cover the multiply-accumulate work of convolutions, linear layers, and
attention matrix products at 2 FLOPs per MAC; cheap elementwise work
(activations, gates, normalization, pooling, upsampling) is excluded and
typically amounts to a few percent.
"""

import numpy as np


def count_parameters(module):
    """Exact learned-parameter count by walking the module tree."""
    return int(sum(p.data.size for p in module.parameters()))


def _conv(out_ch, in_ch, k, bias=True):
    return out_ch * in_ch * k * k + (out_ch if bias else 0)


def _linear(n_in, n_out):
    return n_in * n_out + n_out


def _bn(ch):
    return 2 * ch


def encoder_param_counts(stem_channels=8, high_channels=16, mid_channels=32,
                         low_channels=64, projected_channels=8,
                         gate_hidden=16, num_classes=11, fc_units=64):
    """Per-block closed-form parameter counts for the vision encoder."""
    cp = projected_channels
    fused = 3 * cp
    se_hidden = max(cp // 4, 1)
    attn_common = _linear(cp, se_hidden) + _linear(se_hidden, cp)
    counts = {
        "stem": _conv(stem_channels, 3, 3, bias=False) + _bn(stem_channels),
        "branch_high": _conv(high_channels, stem_channels, 3, bias=False) + _bn(high_channels),
        "branch_mid": _conv(mid_channels, stem_channels, 3, bias=False) + _bn(mid_channels),
        "branch_low": _conv(low_channels, stem_channels, 3, bias=False) + _bn(low_channels),
        "projections": (_conv(cp, high_channels, 1) + _conv(cp, mid_channels, 1)
                        + _conv(cp, low_channels, 1)),
        "attention_high": attn_common + _conv(1, 3, 3),
        "attention_mid": attn_common + _conv(1, 3, 5),
        "attention_low": attn_common + _conv(1, 2, 7),
        "fusion_gate": _linear(fused, gate_hidden) + _linear(gate_hidden, fused),
    }
    if num_classes is not None:
        gc = fused // 4
        counts["head"] = (
            _linear(fused, fused * 9)                       # dynamic kernel generator
            + _conv(gc, fused, 3, bias=False) + _bn(gc)      # dilated global mix
            + _conv(12, fused + gc, 1, bias=False) + _bn(12)  # fuse + reduce
            + _conv(6, 12, 3, bias=False) + _bn(6)
            + _conv(6, 6, 3, bias=False) + _bn(6)
            + _linear(6 * 7 * 7, fc_units)
            + _linear(fc_units, num_classes)
        )
    counts["total"] = sum(counts.values())
    return counts


def seq_model_param_counts(vocab_size, fused_dim, d_model=256,
                           ffn_multiplier=4, num_encoder_layers=2,
                           num_decoder_layers=2):
    """Per-block closed-form parameter counts for the sequence model."""
    d = d_model
    ffn_hidden = ffn_multiplier * d
    attention = 4 * _linear(d, d)
    ffn = _linear(d, ffn_hidden) + _linear(ffn_hidden, d)
    ln = 2 * d
    enc_layer = attention + ffn + 2 * ln
    dec_layer = 2 * attention + ffn + 3 * ln
    counts = {
        "fuse": _linear(fused_dim, d),
        "embedding": vocab_size * d,
        "encoder_layers": num_encoder_layers * enc_layer,
        "decoder_layers": num_decoder_layers * dec_layer,
        "final_norms": 2 * ln,
        "output_projection": _linear(d, vocab_size),
    }
    counts["total"] = sum(counts.values())
    return counts


# -- FLOPs ---------------------------------------------------------------------

def _conv_flops(out_ch, oh, ow, in_ch, k):
    return 2 * out_ch * oh * ow * in_ch * k * k


def encoder_flops(input_size=224, views=1, stem_channels=8, high_channels=16,
                  mid_channels=32, low_channels=64, projected_channels=8,
                  include_head=True, num_classes=11, fc_units=64):
    """Forward MAC-based FLOPs for one sample (all views)."""
    s = input_size
    cp = projected_channels
    fused = 3 * cp
    per_view = {
        "stem": _conv_flops(stem_channels, s, s, 3, 3),
        "branch_high": _conv_flops(high_channels, s, s, stem_channels, 3),
        "branch_mid": _conv_flops(mid_channels, s // 2, s // 2, stem_channels, 3),
        "branch_low": _conv_flops(low_channels, s // 4, s // 4, stem_channels, 3),
        "projections": (_conv_flops(cp, s, s, high_channels, 1)
                        + _conv_flops(cp, s // 2, s // 2, mid_channels, 1)
                        + _conv_flops(cp, s // 4, s // 4, low_channels, 1)),
        "attention": (_conv_flops(1, s, s, 3, 3)
                      + _conv_flops(1, s // 2, s // 2, 3, 5)
                      + _conv_flops(1, s // 4, s // 4, 2, 7)),
    }
    counts = {k: views * v for k, v in per_view.items()}
    if include_head:
        gc = fused // 4
        counts["head"] = (
            2 * fused * fused * 9                     # kernel generator
            + _conv_flops(fused, s, s, 1, 3)          # dynamic depthwise
            + _conv_flops(gc, s, s, fused, 3)         # dilated global mix
            + _conv_flops(12, s // 2, s // 2, fused + gc, 1)
            + _conv_flops(6, s // 4, s // 4, 12, 3)
            + _conv_flops(6, s // 8, s // 8, 6, 3)
            + 2 * 6 * 7 * 7 * fc_units
            + 2 * fc_units * num_classes
        )
    counts["total"] = sum(counts.values())
    return counts


def seq_model_flops(enc_len, dec_len, vocab_size, fused_dim, d_model=256,
                    num_heads=4, ffn_multiplier=4, num_encoder_layers=2,
                    num_decoder_layers=2):
    """Forward MAC-based FLOPs for one sample at the given lengths."""
    d = d_model
    ffn_hidden = ffn_multiplier * d

    def attention(tq, tk):
        proj = 2 * (tq + 2 * tk) * d * d + 2 * tq * d * d
        scores = 2 * tq * tk * d           # across all heads combined
        context = 2 * tq * tk * d
        return proj + scores + context

    def ffn(t):
        return 2 * t * d * ffn_hidden * 2

    counts = {
        "fuse": 2 * fused_dim * d,
        "encoder": num_encoder_layers * (attention(enc_len, enc_len) + ffn(enc_len)),
        "decoder": num_decoder_layers * (attention(dec_len, dec_len)
                                         + attention(dec_len, enc_len)
                                         + ffn(dec_len)),
        "output_projection": 2 * dec_len * d * vocab_size,
    }
    counts["total"] = sum(counts.values())
    return counts


def summarize(vocab_size, fused_dim, views=1, input_size=224, enc_len=65,
              dec_len=128):
    """One dict suitable for the report/CLI output."""
    enc_p = encoder_param_counts()
    seq_p = seq_model_param_counts(vocab_size, fused_dim)
    enc_f = encoder_flops(input_size=input_size, views=views)
    seq_f = seq_model_flops(enc_len, dec_len, vocab_size, fused_dim)
    return {
        "parameters": {
            "vision_encoder": enc_p,
            "seq_model": seq_p,
            "total": enc_p["total"] + seq_p["total"],
        },
        "flops_forward": {
            "vision_encoder": enc_f,
            "seq_model": seq_f,
            "total": enc_f["total"] + seq_f["total"],
        },
    }
