"""Fundamental Music Embedding (FME), Fundamental Music Shift (FMS) and the
onset/beat positional encodings.

Lane layout is interleaved: lane 2k holds sin(w_k f) and lane 2k+1 holds
cos(w_k f), with w_k = B^(-2k/d). FME adds a trainable bias per lane; FMS
is the bias-free code of a difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, parameter

PITCH_BASE = 9919.0
DURATION_BASE = 7920.0
ONSET_BASE = 7920.0
INDEX_BASE = 10000.0


def omega(k: int, d: int, base: float) -> float:
    return float(base ** (-2.0 * k / d))


def frequencies(d: int, base: float) -> np.ndarray:
    if d % 2:
        raise ValueError(f"embedding dimension must be even, got {d}")
    return base ** (-2.0 * np.arange(d // 2) / d)


def sinusoid(values, d: int, base: float) -> np.ndarray:
    """Interleaved [sin, cos] code of ``values``; output shape values.shape + (d,)."""
    values = np.asarray(values, dtype=np.float64)
    angles = values[..., None] * frequencies(d, base)
    out = np.empty(values.shape + (d,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass
class FmeParams:
    """Embedding parameters for one token family (pitch, duration, ...)."""

    base: float
    d: int
    bias: Tensor
    nonfmt_tokens: tuple = ()
    nonfmt_table: Tensor | None = None

    @classmethod
    def create(cls, base: float, d: int, nonfmt_tokens=(), rng=None, name: str = "fme"):
        if d % 2:
            raise ValueError(f"embedding dimension must be even, got {d}")
        if base <= 1:
            raise ValueError("base must exceed 1")
        bias = parameter(np.zeros(d), name=f"{name}.bias")
        table = None
        if nonfmt_tokens:
            rng = rng if rng is not None else np.random.default_rng(0)
            table = parameter(rng.normal(0.0, 0.02, size=(len(nonfmt_tokens), d)),
                              name=f"{name}.nonfmt")
        return cls(float(base), d, bias, tuple(nonfmt_tokens), table)

    @property
    def frequencies(self) -> np.ndarray:
        return frequencies(self.d, self.base)


def fme_embed(f, params: FmeParams) -> Tensor:
    """Embed one token: a real FMT value or one of the family's non-FMT symbols."""
    if isinstance(f, str):
        if f not in params.nonfmt_tokens:
            raise KeyError(f"unknown non-FMT token {f!r}")
        return params.nonfmt_table[params.nonfmt_tokens.index(f)]
    return Tensor(sinusoid(f, params.d, params.base)) + params.bias


def fme_table(values: np.ndarray, is_fmt: np.ndarray, nonfmt_tokens, tokens,
              params: FmeParams) -> Tensor:
    """Embedding of a whole vocabulary, rows in vocabulary order.

    FMT rows are sinusoid + bias; non-FMT rows come from the trainable table.
    Assumes non-FMT tokens occupy the leading indices (see ``Vocabulary``).
    """
    n_special = int((~is_fmt).sum())
    if is_fmt[:n_special].any() or not is_fmt[n_special:].all():
        raise ValueError("non-FMT tokens must lead the vocabulary")
    order = [params.nonfmt_tokens.index(t) for t in tokens[:n_special]]
    specials = params.nonfmt_table[np.array(order)]
    fmt_rows = Tensor(sinusoid(values[n_special:], params.d, params.base)) + params.bias
    return concat([specials, fmt_rows], axis=0)


def fms_embed(delta, params_or_d, base: float | None = None) -> np.ndarray:
    """Bias-free shift code; accepts ``FmeParams`` or ``(d, base)``."""
    if isinstance(params_or_d, FmeParams):
        d, base = params_or_d.d, params_or_d.base
    else:
        d = int(params_or_d)
    return sinusoid(delta, d, base)


def closed_form_distance(delta, params_or_d, base: float | None = None):
    """L2 distance between the embeddings of two FMTs ``delta`` apart.

    sqrt(d - 2 * sum_k cos(w_k |delta|)); biases cancel so only the
    difference matters. Evaluated as 2 * sqrt(sum_k sin^2(w_k delta / 2)),
    the same quantity without the cancellation near delta = 0.
    """
    if isinstance(params_or_d, FmeParams):
        d, base = params_or_d.d, params_or_d.base
    else:
        d = int(params_or_d)
    delta = np.abs(np.asarray(delta, dtype=np.float64))
    half = np.sin(0.5 * delta[..., None] * frequencies(d, base))
    return 2.0 * np.sqrt((half * half).sum(axis=-1))


def transposition_matrix(delta: float, params: FmeParams) -> np.ndarray:
    """Block-diagonal rotation assembled from the 2x2 blocks of FMS(delta)."""
    shift = fms_embed(delta, params)
    s, c = shift[0::2], shift[1::2]
    d = params.d
    T = np.zeros((d, d))
    k = np.arange(d // 2)
    T[2 * k, 2 * k] = c
    T[2 * k, 2 * k + 1] = s
    T[2 * k + 1, 2 * k] = -s
    T[2 * k + 1, 2 * k + 1] = c
    return T


def transpose_in_embedding(e, delta: float, params: FmeParams) -> np.ndarray:
    """Move ``e = fme(f)`` to ``fme(f + delta)`` by rotating the bias-free part.

    Each [sin, cos] lane pair is multiplied by [[cos(wΔ), sin(wΔ)],
    [-sin(wΔ), cos(wΔ)]]. Accepts a single vector or a stack of them.
    """
    e = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64)
    b = params.bias.data
    return (e - b) @ transposition_matrix(delta, params).T + b


@dataclass
class FmeFamilyConfig:
    d: int = 256
    pitch_base: float = PITCH_BASE
    duration_base: float = DURATION_BASE
    onset_base: float = ONSET_BASE
    index_base: float = INDEX_BASE

    def to_json(self) -> dict:
        return dict(self.__dict__)


def build_pe(onsets: np.ndarray, cfg: FmeFamilyConfig, beat: int = 4, dim: int | None = None,
             use_onset: bool = True, use_beat: bool = True) -> np.ndarray:
    """PE_i(I) + PE_o(O) + PE_o(O mod beat) for onsets of shape (..., n)."""
    onsets = np.asarray(onsets, dtype=np.float64)
    dim = cfg.d if dim is None else dim
    n = onsets.shape[-1]
    pe = np.broadcast_to(sinusoid(np.arange(n), dim, cfg.index_base),
                         onsets.shape + (dim,)).copy()
    if use_onset:
        pe += sinusoid(onsets, dim, cfg.onset_base)
    if use_beat:
        pe += sinusoid(np.mod(onsets, beat), dim, cfg.onset_base)
    return pe
