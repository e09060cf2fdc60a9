"""Encoder-decoder sequence model over routed question tokens.

The visual summary (flattened per-view embeddings) is projected to one
prefix token that leads the encoder input; routed question tokens follow.
A pre-norm transformer (2 encoder + 2 decoder layers, 4 heads, model width
256, feed-forward width 4x) decodes the answer autoregressively. Training
returns per-sequence losses so the replay buffer can weight them
individually; generation is greedy.
"""

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .layers import Dropout, Embedding, LayerNorm, Linear, Module
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
    transpose,
    tslice,
    tsum,
)

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2

_MASK_OFF = -1e9


@dataclass(frozen=True)
class SeqModelConfig:
    vocab_size: int
    fused_dim: int               # flattened visual embedding width (views * 24)
    d_model: int = 256
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    ffn_multiplier: int = 4
    dropout: float = 0.2
    max_positions: int = 256

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if self.vocab_size < 3:
            raise ValueError("vocabulary must at least hold pad/eos/unk")


def sinusoidal_positions(max_positions, d_model):
    """Classic fixed position encoding table, shape (max_positions, d_model)."""
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(np.float32)


def _spawn(rng):
    return np.random.default_rng(int(rng.integers(0, 2 ** 63)))


class MultiHeadAttention(Module):
    def __init__(self, d_model, num_heads, dropout_p, rng):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.attn_drop = Dropout(dropout_p, _spawn(rng))

    def _split(self, x, B, T):
        x = reshape(x, (B, T, self.num_heads, self.head_dim))
        return transpose(x, (0, 2, 1, 3))

    def forward(self, query, keyval, mask=None):
        """mask is an additive float array broadcastable to (B, H, Tq, Tk)."""
        B, Tq, _ = query.shape
        Tk = keyval.shape[1]
        q = self._split(self.wq.forward(query), B, Tq)
        k = self._split(self.wk.forward(keyval), B, Tk)
        v = self._split(self.wv.forward(keyval), B, Tk)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * self.scale
        if mask is not None:
            scores = scores + mask
        attn = self.attn_drop.forward(softmax(scores, axis=-1))
        ctx = matmul(attn, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Tq, -1))
        return self.wo.forward(ctx)


class FeedForward(Module):
    def __init__(self, d_model, hidden, dropout_p, rng):
        super().__init__()
        self.lift = Linear(d_model, hidden, rng)
        self.lower = Linear(hidden, d_model, rng)
        self.drop = Dropout(dropout_p, _spawn(rng))

    def forward(self, x):
        return self.lower.forward(self.drop.forward(relu(self.lift.forward(x))))


class EncoderLayer(Module):
    """Pre-norm: each sublayer reads a normalized copy, residual adds raw."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.norm_attn = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, cfg.dropout, rng)
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_multiplier * cfg.d_model,
                               cfg.dropout, rng)
        self.drop_attn = Dropout(cfg.dropout, _spawn(rng))
        self.drop_ffn = Dropout(cfg.dropout, _spawn(rng))

    def forward(self, x, mask):
        h = self.norm_attn.forward(x)
        x = x + self.drop_attn.forward(self.attn.forward(h, h, mask))
        x = x + self.drop_ffn.forward(self.ffn.forward(self.norm_ffn.forward(x)))
        return x


class DecoderLayer(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.norm_self = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, cfg.dropout, rng)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, cfg.dropout, rng)
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_multiplier * cfg.d_model,
                               cfg.dropout, rng)
        self.drop_self = Dropout(cfg.dropout, _spawn(rng))
        self.drop_cross = Dropout(cfg.dropout, _spawn(rng))
        self.drop_ffn = Dropout(cfg.dropout, _spawn(rng))

    def forward(self, x, memory, self_mask, cross_mask):
        h = self.norm_self.forward(x)
        x = x + self.drop_self.forward(self.self_attn.forward(h, h, self_mask))
        x = x + self.drop_cross.forward(
            self.cross_attn.forward(self.norm_cross.forward(x), memory, cross_mask))
        x = x + self.drop_ffn.forward(self.ffn.forward(self.norm_ffn.forward(x)))
        return x


@dataclass
class ForwardOutput:
    per_seq_loss: Tensor          # (B,) mean answer-token loss per sequence
    max_prob_lists: list          # per sequence: max softmax prob at valid steps
    encoder_embedding: np.ndarray  # (B, d_model) mean over valid encoder slots


def _trim(ids, mask):
    """Clip trailing all-pad columns; keeps at least one column."""
    ids = np.asarray(ids)
    mask = np.asarray(mask).astype(bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ShapeError(f"ids/mask must be matching 2-D arrays, got "
                         f"{ids.shape} and {mask.shape}")
    width = max(1, int(mask.sum(axis=1).max(initial=0)))
    return ids[:, :width], mask[:, :width]


def _causal_mask(T):
    m = np.triu(np.full((T, T), _MASK_OFF, dtype=np.float32), k=1)
    return m[None, None]


def _key_pad_mask(mask):
    return np.where(mask, 0.0, _MASK_OFF).astype(np.float32)[:, None, None, :]


class VqaSeqModel(Module):
    """Visual prefix + routed question tokens in, answer tokens out."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        cfg = config
        self.fuse = Linear(cfg.fused_dim, cfg.d_model, rng)
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.embed_scale = float(np.sqrt(cfg.d_model))
        self.register_buffer("positions",
                             sinusoidal_positions(cfg.max_positions, cfg.d_model))
        for i in range(cfg.num_encoder_layers):
            setattr(self, f"enc{i}", EncoderLayer(cfg, rng))
        for i in range(cfg.num_decoder_layers):
            setattr(self, f"dec{i}", DecoderLayer(cfg, rng))
        self.enc_norm = LayerNorm(cfg.d_model)
        self.dec_norm = LayerNorm(cfg.d_model)
        self.out_proj = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.input_drop = Dropout(cfg.dropout, _spawn(rng))

    def _encoder_layers(self):
        return [getattr(self, f"enc{i}")
                for i in range(self.config.num_encoder_layers)]

    def _decoder_layers(self):
        return [getattr(self, f"dec{i}")
                for i in range(self.config.num_decoder_layers)]

    # -- encoder ------------------------------------------------------------
    def encode(self, fused, token_ids, token_mask):
        """fused: Tensor (B, fused_dim). token_ids/mask: (B, L) arrays.

        Returns (memory, cross_mask, mean_embedding): memory is (B, 1+L',
        d_model) with the visual prefix at slot 0; L' is the batch's longest
        valid length.
        """
        ids, mask = _trim(token_ids, token_mask)
        B, L = ids.shape
        T = L + 1
        if T > self.config.max_positions:
            raise ShapeError(f"encoder length {T} exceeds position table "
                             f"{self.config.max_positions}")
        # scale the prefix like token embeddings and leave it without a
        # position code: its slot is fixed, and an additive PE would swamp
        # the (small-amplitude) visual features it carries
        prefix = reshape(self.fuse.forward(fused) * self.embed_scale,
                         (B, 1, self.config.d_model))
        tokens = self.embed.forward(ids) * self.embed_scale + self.positions[:L]
        x = concat([prefix, tokens], axis=1)
        x = self.input_drop.forward(x)
        valid = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
        attn_mask = _key_pad_mask(valid)
        for layer in self._encoder_layers():
            x = layer.forward(x, attn_mask)
        memory = self.enc_norm.forward(x)
        counts = valid.sum(axis=1, keepdims=True)
        mean_embed = (memory.data * valid[:, :, None]).sum(axis=1) / counts
        return memory, attn_mask, mean_embed

    # -- decoder ------------------------------------------------------------
    def _decode_states(self, memory, cross_mask, dec_ids):
        B, T = dec_ids.shape
        if T > self.config.max_positions:
            raise ShapeError(f"decoder length {T} exceeds position table "
                             f"{self.config.max_positions}")
        x = self.embed.forward(dec_ids) * self.embed_scale + self.positions[:T]
        x = self.input_drop.forward(x)
        self_mask = _causal_mask(T)
        for layer in self._decoder_layers():
            x = layer.forward(x, memory, self_mask, cross_mask)
        return self.dec_norm.forward(x)

    def forward(self, fused, q_ids, q_mask, a_ids, a_mask):
        """Teacher-forced pass; the end-of-sequence id doubles as the start
        symbol, so decoder input is [EOS, a_0, ..] and the target is a_ids."""
        memory, cross_mask, mean_embed = self.encode(fused, q_ids, q_mask)
        tgt, tgt_mask = _trim(a_ids, a_mask)
        B, T = tgt.shape
        dec_in = np.concatenate(
            [np.full((B, 1), EOS_ID, dtype=tgt.dtype), tgt[:, :-1]], axis=1)
        states = self._decode_states(memory, cross_mask, dec_in)
        logits = self.out_proj.forward(reshape(states, (B * T, -1)))
        flat_valid = tgt_mask.reshape(-1).astype(np.float32)
        loss_flat, max_probs = F.cross_entropy_per_token(
            logits, tgt.reshape(-1), valid_mask=flat_valid)
        counts = np.maximum(tgt_mask.sum(axis=1), 1).astype(np.float32)
        per_seq = tsum(reshape(loss_flat, (B, T)), axis=1) / counts
        probs2d = max_probs.reshape(B, T)
        prob_lists = [probs2d[i][tgt_mask[i]] for i in range(B)]
        return ForwardOutput(per_seq, prob_lists, mean_embed)

    # -- objectives / inference ----------------------------------------------
    @staticmethod
    def weighted_loss(per_seq_loss, weights):
        """Importance-weighted batch objective: mean_i w_i * loss_i."""
        w = np.asarray(weights, dtype=np.float32)
        return (per_seq_loss * w).mean()

    def generate(self, fused, q_ids, q_mask, max_len=128):
        """Greedy decode; returns a list of id lists, cut before EOS."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                memory, cross_mask, _ = self.encode(fused, q_ids, q_mask)
                B = memory.shape[0]
                dec = np.full((B, 1), EOS_ID, dtype=np.int64)
                done = np.zeros(B, dtype=bool)
                for _ in range(max_len):
                    states = self._decode_states(memory, cross_mask, dec)
                    last = tslice(states, (slice(None), -1))
                    logits = self.out_proj.forward(last)
                    nxt = logits.data.argmax(axis=1)
                    nxt[done] = PAD_ID
                    done |= nxt == EOS_ID
                    dec = np.concatenate([dec, nxt[:, None]], axis=1)
                    if done.all():
                        break
        finally:
            if was_training:
                self.train()
        outs = []
        for row in dec[:, 1:]:
            stop = np.flatnonzero((row == EOS_ID) | (row == PAD_ID))
            outs.append(row[:stop[0]].tolist() if stop.size else row.tolist())
        return outs
