"""Autoregressive melody generation with temperature, top-k and top-p sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import RipoModel
from .music import MAX_LEN, VOCAB, TokenSequence, onsets_from_durations
from .tensor import no_grad


@dataclass
class GenerationConfig:
    strategy: str = "top_p"
    k: int = 5
    p: float = 0.9
    temperature: float = 1.0
    seed_bars: int = 2
    target_bars: int = 16
    rng_seed: int = 0
    max_len: int = MAX_LEN

    def validate(self):
        if self.strategy not in ("top_k", "top_p"):
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.p <= 1:
            raise ValueError("p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        return self

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StepTrace:
    """One row per predicted token: what was chosen and with what probability."""

    step: list = field(default_factory=list)
    pitch_token: list = field(default_factory=list)
    p_pitch: list = field(default_factory=list)
    dur_token: list = field(default_factory=list)
    p_dur: list = field(default_factory=list)
    onset: list = field(default_factory=list)

    def append(self, step, pitch_token, p_pitch, dur_token, p_dur, onset):
        self.step.append(step)
        self.pitch_token.append(int(pitch_token))
        self.p_pitch.append(float(p_pitch))
        self.dur_token.append(int(dur_token))
        self.p_dur.append(float(p_dur))
        self.onset.append(float(onset))

    def __len__(self) -> int:
        return len(self.step)

    def rows(self):
        return zip(self.step, self.pitch_token, self.p_pitch, self.dur_token, self.p_dur,
                   self.onset)

    def sustain_after_rest(self) -> int:
        rest, sustain = VOCAB.rest, VOCAB.sustain
        toks = self.pitch_token
        return sum(1 for a, b in zip(toks, toks[1:]) if a == rest and b == sustain)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "pitch_token", "p_pitch", "dur_token", "p_dur", "onset"])
            for row in self.rows():
                w.writerow([row[0], row[1], repr(row[2]), row[3], repr(row[4]), repr(row[5])])


def apply_temperature(logits, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def filter_top_k(probs, k: int) -> np.ndarray:
    """Keep the ``k`` most likely tokens (lower index wins ties), renormalized."""
    if k < 1:
        raise ValueError("k must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    if k >= len(probs):
        return probs.copy()
    order = np.argsort(-probs, kind="stable")
    out = np.zeros_like(probs)
    keep = order[:k]
    out[keep] = probs[keep]
    return out / out.sum()


def filter_top_p(probs, p: float) -> np.ndarray:
    """Smallest descending-probability prefix with mass >= ``p``, renormalized."""
    if p <= 0:
        raise ValueError("p must be positive")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    count = min(int(np.searchsorted(cum, p - 1e-12)) + 1, len(probs))
    out = np.zeros_like(probs)
    keep = order[:count]
    out[keep] = probs[keep]
    return out / out.sum()


def sampling_distribution(logits, pad_index: int, cfg: GenerationConfig) -> np.ndarray:
    """Temperature softmax, pad removed, then top-k / top-p filtering."""
    probs = apply_temperature(logits, cfg.temperature)
    probs[pad_index] = 0.0
    probs = probs / probs.sum()
    if cfg.strategy == "top_k":
        return filter_top_k(probs, cfg.k)
    return filter_top_p(probs, cfg.p)


def seed_prefix(piece: TokenSequence, seed_bars: int) -> TokenSequence:
    """Tokens of ``piece`` starting inside the first ``seed_bars`` bars."""
    piece = piece.trimmed()
    span = seed_bars * piece.beat
    end = float(piece.O[-1] + piece.numeric_D[-1]) if piece.n else 0.0
    if end < span:
        raise ValueError(f"seed covers {end} beats, fewer than {seed_bars} bars")
    k = int(np.searchsorted(piece.O, span, side="left"))
    return TokenSequence(piece.P[:k].copy(), piece.D[:k].copy(), piece.O[:k].copy(),
                         np.zeros(k, dtype=bool), piece.beat, piece.name)


def _sequence(P, D, beat, name) -> TokenSequence:
    P = np.asarray(P, dtype=np.int64)
    D = np.asarray(D, dtype=np.int64)
    O = onsets_from_durations(VOCAB.duration_values[D])
    return TokenSequence(P, D, O, np.zeros(len(P), dtype=bool), beat, name)


def next_token_logits(model: RipoModel, seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        pitch_logits, dur_logits = model.forward(seq)
    return pitch_logits.data[0, -1], dur_logits.data[0, -1]


@dataclass
class Generation:
    sequence: TokenSequence
    trace: StepTrace
    seed_length: int


def generate(model: RipoModel, seed_seq: TokenSequence, cfg: GenerationConfig) -> Generation:
    """Extend the first ``seed_bars`` bars of ``seed_seq`` to ``target_bars`` bars.

    Pitch and duration are sampled independently from their heads at each
    step. Stops once the piece spans ``target_bars`` bars or reaches
    ``max_len`` tokens.
    """
    cfg.validate()
    seed = seed_prefix(seed_seq, cfg.seed_bars)
    rng = np.random.default_rng(cfg.rng_seed)
    P = list(seed.P)
    D = list(seed.D)
    beat = seed.beat
    end = float(VOCAB.duration_values[D].sum())
    target = cfg.target_bars * beat
    max_len = min(cfg.max_len, model.cfg.max_len)
    trace = StepTrace()
    step = 0
    while end < target and len(P) < max_len:
        pitch_logits, dur_logits = next_token_logits(model, _sequence(P, D, beat, seed.name))
        pp = sampling_distribution(pitch_logits, VOCAB.pitch_pad, cfg)
        pd = sampling_distribution(dur_logits, VOCAB.duration_pad, cfg)
        pt = int(rng.choice(len(pp), p=pp))
        dt = int(rng.choice(len(pd), p=pd))
        trace.append(step, pt, pp[pt], dt, pd[dt], end)
        P.append(pt)
        D.append(dt)
        end += float(VOCAB.duration_values[dt])
        step += 1
    return Generation(_sequence(P, D, beat, seed.name), trace, seed.n)


def trace_ground_truth(model: RipoModel, piece: TokenSequence) -> StepTrace:
    """Teacher-forced probabilities of each actual next token (temperature 1, unfiltered)."""
    piece = piece.trimmed()
    with no_grad():
        pitch_logits, dur_logits = model.forward(piece)
    trace = StepTrace()
    for t in range(piece.n - 1):
        pp = apply_temperature(pitch_logits.data[0, t], 1.0)
        pd = apply_temperature(dur_logits.data[0, t], 1.0)
        p_tok, d_tok = piece.P[t + 1], piece.D[t + 1]
        trace.append(t, p_tok, pp[p_tok], d_tok, pd[d_tok], piece.O[t + 1])
    return trace
