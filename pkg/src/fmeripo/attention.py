"""RIPO attention: causal multi-head attention whose logits add relative
index (skewed), relative pitch and relative onset terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fme import frequencies, sinusoid
from .tensor import Tensor, concat, layer_norm, masked_fill, softmax_lastdim

MAX_LEN = 246


@dataclass
class AttentionAblation:
    use_rel_onset: bool = True
    use_rel_pitch: bool = True
    use_rel_index: bool = True
    use_pe_onset: bool = True
    use_pe_beat: bool = True

    def to_json(self) -> dict:
        return dict(self.__dict__)


def relative_matrix(x) -> np.ndarray:
    """M[..., i, j] = x[..., i] - x[..., j]."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., :, None] - x[..., None, :]


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    B, n, width = x.shape
    return x.reshape(B, n, num_heads, width // num_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * dh)


def _pair_mask(valid: np.ndarray) -> np.ndarray:
    # (B, n) -> (B, 1, n, n) float mask, 1 where both tokens are valid
    v = valid.astype(np.float64)
    return (v[:, :, None] * v[:, None, :])[:, None]


def rel_logits(Q: Tensor, values: np.ndarray, valid: np.ndarray, W: Tensor,
               base: float) -> Tensor:
    """Q . [W FMS(x_i - x_j)]^T per head, zeroed wherever a token is invalid.

    ``Q`` is (B, h, n, D_h); ``W`` is (d, h * D_h) and is split into per-head
    d x D_h blocks. Uses the angle-addition identity
    sin(w(a-b)) = sin(wa)cos(wb) - cos(wa)sin(wb) (and the cosine analogue)
    to turn the n x n x d shift tensor into a single (n x d) @ (d x n)
    product per head.
    """
    B, h, n, dh = Q.shape
    d = W.shape[0]
    values = np.where(valid, values, 0.0)
    W_heads = W.reshape(d, h, dh).transpose(1, 2, 0)          # (h, D_h, d)
    U = Q @ W_heads                                           # (B, h, n, d)
    ang = values[..., None] * frequencies(d, base)            # (B, n, d/2)
    s = np.sin(ang)[:, None]
    c = np.cos(ang)[:, None]
    u_sin, u_cos = U[..., 0::2], U[..., 1::2]
    A = concat([u_sin * s + u_cos * c, u_cos * s - u_sin * c], axis=-1)
    keys = np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)[:, None]  # (B, 1, n, d)
    S = A @ Tensor(np.swapaxes(keys, -1, -2))
    return S * _pair_mask(valid)


def rel_logits_dense(Q: Tensor, values: np.ndarray, valid: np.ndarray, W: Tensor,
                     base: float) -> Tensor:
    """Direct O(n^2 d) evaluation of ``rel_logits``; reference path."""
    B, h, n, dh = Q.shape
    d = W.shape[0]
    values = np.where(valid, values, 0.0)
    shift = Tensor(sinusoid(relative_matrix(values), d, base))  # (B, n, n, d)
    R = (shift @ W).reshape(B, n, n, h, dh).transpose(0, 3, 1, 4, 2)  # (B, h, n, D_h, n)
    S = (Q.reshape(B, h, n, 1, dh) @ R).reshape(B, h, n, n)
    return S * _pair_mask(valid)


def rel_logits_pitch(Q: Tensor, pitch: np.ndarray, pitch_valid: np.ndarray, W_rp: Tensor,
                     base: float, dense: bool = False) -> Tensor:
    fn = rel_logits_dense if dense else rel_logits
    return fn(Q, pitch, pitch_valid, W_rp, base)


def rel_logits_onset(Q: Tensor, onset: np.ndarray, not_pad: np.ndarray, W_ro: Tensor,
                     base: float, dense: bool = False) -> Tensor:
    fn = rel_logits_dense if dense else rel_logits
    return fn(Q, onset, not_pad, W_ro, base)


def skewed_index_logits(Q: Tensor, E_r: Tensor) -> Tensor:
    """S[..., i, j] = Q[..., i, :] . E_r[h, i - j] for j <= i via pad/reshape/slice.

    ``E_r`` is (h, L, D_h) indexed by distance. Entries with j > i are
    leftovers of the skew and must be masked by the caller.
    """
    B, h, n, dh = Q.shape
    L = E_r.shape[1]
    if n > L:
        raise ValueError(f"sequence length {n} exceeds relative table size {L}")
    by_distance = Q @ E_r[:, :n].swapaxes(-1, -2)     # column c <-> distance c
    rel = by_distance[..., ::-1]                      # column c <-> distance n-1-c
    padded = concat([Tensor(np.zeros((B, h, n, 1))), rel], axis=-1)
    return padded.reshape(B, h, n + 1, n)[:, :, 1:, :]


def gather_index_logits(Q: np.ndarray, E_r: np.ndarray) -> np.ndarray:
    """Gather form of the relative-index logits; 0 where j > i."""
    n = Q.shape[-2]
    L = E_r.shape[-2]
    table = Q @ np.swapaxes(E_r[:, :n], -1, -2)
    offset = relative_matrix(np.arange(n)).astype(int)
    dist = np.clip(offset, 0, L - 1)
    out = np.take_along_axis(table, np.broadcast_to(dist, table.shape[:-2] + (n, n)), axis=-1)
    return np.where(offset >= 0, out, 0.0)


@dataclass
class AttentionContext:
    """Per-batch constants shared by all layers."""

    pitch: np.ndarray          # (B, n) MIDI values, 0 at non-FMT
    pitch_valid: np.ndarray    # (B, n) FMT pitch and not pad
    onset: np.ndarray          # (B, n)
    not_pad: np.ndarray        # (B, n)
    allowed: np.ndarray        # (B, 1, n, n) causal & key not padded
    pitch_base: float
    onset_base: float

    @classmethod
    def build(cls, pitch, pitch_is_fmt, onset, pad_mask, pitch_base, onset_base):
        pad_mask = np.asarray(pad_mask, dtype=bool)
        not_pad = ~pad_mask
        n = pad_mask.shape[-1]
        causal = np.tril(np.ones((n, n), dtype=bool))
        allowed = causal[None, None] & not_pad[:, None, None, :]
        if not allowed.any(axis=-1).all():
            raise ValueError("a query position has no valid key (empty sequence in batch)")
        return cls(np.asarray(pitch, dtype=np.float64),
                   np.asarray(pitch_is_fmt, dtype=bool) & not_pad,
                   np.asarray(onset, dtype=np.float64), not_pad, allowed,
                   pitch_base, onset_base)


class RipoLayer:
    """Pre-norm transformer block around RIPO attention.

    x -> x + Attn(LN1(x)) -> x + FFN(LN2(x)); FFN is Linear-ReLU-Linear.
    """

    def __init__(self, params: dict[str, Tensor], prefix: str, num_heads: int,
                 ablation: AttentionAblation):
        self.p = params
        self.prefix = prefix
        self.num_heads = num_heads
        self.ablation = ablation

    def __getitem__(self, key: str) -> Tensor:
        return self.p[f"{self.prefix}.{key}"]

    def attention_logits(self, Q: Tensor, K: Tensor, ctx: AttentionContext,
                         dense: bool = False) -> Tensor:
        logits = Q @ K.swapaxes(-1, -2)
        if self.ablation.use_rel_index:
            logits = logits + skewed_index_logits(Q, self["attn.rel_index"])
        if self.ablation.use_rel_pitch:
            logits = logits + rel_logits_pitch(Q, ctx.pitch, ctx.pitch_valid,
                                               self["attn.rel_pitch"], ctx.pitch_base, dense)
        if self.ablation.use_rel_onset:
            logits = logits + rel_logits_onset(Q, ctx.onset, ctx.not_pad,
                                               self["attn.rel_onset"], ctx.onset_base, dense)
        return logits

    def attention(self, x: Tensor, ctx: AttentionContext, dense: bool = False,
                  return_weights: bool = False):
        h = self.num_heads
        Q = split_heads(x @ self["attn.q.weight"] + self["attn.q.bias"], h)
        K = split_heads(x @ self["attn.k.weight"] + self["attn.k.bias"], h)
        V = split_heads(x @ self["attn.v.weight"] + self["attn.v.bias"], h)
        logits = self.attention_logits(Q, K, ctx, dense) * (1.0 / math.sqrt(Q.shape[-1]))
        weights = softmax_lastdim(masked_fill(logits, ~ctx.allowed, -np.inf))
        out = merge_heads(weights @ V)
        return (out, weights) if return_weights else out

    def __call__(self, x: Tensor, ctx: AttentionContext, dense: bool = False) -> Tensor:
        x = x + self.attention(layer_norm(x, self["norm1.gain"], self["norm1.shift"]), ctx, dense)
        hidden = layer_norm(x, self["norm2.gain"], self["norm2.shift"])
        hidden = (hidden @ self["ffn.fc1.weight"] + self["ffn.fc1.bias"]).relu()
        return x + (hidden @ self["ffn.fc2.weight"] + self["ffn.fc2.bias"])


def ripo_attention_forward(x: Tensor, ctx: AttentionContext, layer: RipoLayer) -> Tensor:
    return layer(x, ctx)
