"""Objective metrics for generated melodies: seq-rep-n, KDE-based KL
divergence, in-scale ratio and arpeggio ratio.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .music import C_MAJOR_PITCH_CLASSES, VOCAB, TokenSequence

PITCH_GRID = (0.0, 127.0, 0.5)
DURATION_GRID = (0.25, 4.0, 0.05)
KL_DIRECTION = "KL(generated || reference)"
AR_RULE = ("sliding 4-grams of FMT pitches; >= 3 of 4 durations equal the modal "
           "duration; strictly monotonic pitches with steps of 1-4 semitones")


def seq_rep_n(tokens, n: int = 4) -> float:
    """1 - distinct/total over sliding n-grams."""
    tokens = list(tokens)
    total = len(tokens) - n + 1
    if total < 1:
        raise ValueError(f"sequence of length {len(tokens)} has no {n}-grams")
    grams = {tuple(tokens[i:i + n]) for i in range(total)}
    return 1.0 - len(grams) / total


def grid(lo: float, hi: float, step: float) -> np.ndarray:
    count = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(count)


def scott_bandwidth(sample: np.ndarray) -> float:
    sigma = sample.std(ddof=1) if len(sample) > 1 else 0.0
    return float(sigma * len(sample) ** (-1.0 / 5.0))


def gaussian_kde(sample, points: np.ndarray, bandwidth: float | None = None,
                 chunk: int = 2048) -> np.ndarray:
    """Gaussian kernel density of ``sample`` at ``points`` (Scott's rule by default).

    A constant sample has zero Scott bandwidth; the grid spacing is used then.
    """
    sample = np.asarray(sample, dtype=np.float64)
    h = scott_bandwidth(sample) if bandwidth is None else bandwidth
    if h <= 0:
        h = float(np.min(np.diff(points))) if len(points) > 1 else 1.0
    out = np.zeros(len(points))
    norm = 1.0 / (len(sample) * h * np.sqrt(2 * np.pi))
    for start in range(0, len(sample), chunk):
        z = (points[:, None] - sample[None, start:start + chunk]) / h
        out += np.exp(-0.5 * z * z).sum(axis=1)
    return out * norm


def kl_kde(sample_gen, sample_ref, grid_points, floor: float = 1e-12) -> float:
    """KL(gen || ref) between Gaussian KDEs evaluated and normalized on a grid."""
    gen = np.asarray(sample_gen, dtype=np.float64)
    ref = np.asarray(sample_ref, dtype=np.float64)
    if gen.size == 0 or ref.size == 0:
        raise ValueError("kl_kde needs non-empty samples")
    pts = np.asarray(grid_points, dtype=np.float64)
    p = np.maximum(gaussian_kde(gen, pts), floor)
    q = np.maximum(gaussian_kde(ref, pts), floor)
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def in_scale_ratio(pitches) -> float:
    """Share of FMT pitches whose pitch class is in C major; symbols are skipped."""
    midi = [p for p in pitches if not isinstance(p, str)]
    if not midi:
        raise ValueError("no FMT pitches")
    return sum(1 for p in midi if int(p) % 12 in C_MAJOR_PITCH_CLASSES) / len(midi)


def _arpeggio_gram(pitches, durations) -> bool:
    counts = Counter(durations).most_common()
    if counts[0][1] < 3:
        return False
    steps = np.diff(np.asarray(pitches, dtype=np.float64))
    if np.all(steps > 0) or np.all(steps < 0):
        return bool(np.all((np.abs(steps) >= 1) & (np.abs(steps) <= 4)))
    return False


def arpeggio_counts(seq: TokenSequence) -> tuple[int, int]:
    s = seq.trimmed()
    fmt = s.pitch_is_fmt
    qualifying = total = 0
    for i in range(s.n - 3):
        if not fmt[i:i + 4].all():
            continue
        total += 1
        qualifying += _arpeggio_gram(s.numeric_P[i:i + 4], s.D[i:i + 4].tolist())
    return qualifying, total


def arpeggio_ratio(seq: TokenSequence) -> float:
    qualifying, total = arpeggio_counts(seq)
    if total == 0:
        raise ValueError("no 4-gram made only of FMT pitches")
    return qualifying / total


def pitch_sample(seqs: Sequence[TokenSequence]) -> np.ndarray:
    vals = [s.trimmed().numeric_P[s.trimmed().pitch_is_fmt] for s in seqs]
    return np.concatenate(vals) if vals else np.zeros(0)


def duration_sample(seqs: Sequence[TokenSequence]) -> np.ndarray:
    vals = [s.trimmed().numeric_D for s in seqs]
    return np.concatenate(vals) if vals else np.zeros(0)


@dataclass
class PieceMetrics:
    name: str
    length: int
    seq_rep_4_pitch: float | None
    seq_rep_4_duration: float | None
    isr: float | None
    ar: float | None
    ar_grams: int


def piece_metrics(seq: TokenSequence) -> PieceMetrics:
    s = seq.trimmed()
    rep_p = seq_rep_n(s.P.tolist(), 4) if s.n >= 4 else None
    rep_d = seq_rep_n(s.D.tolist(), 4) if s.n >= 4 else None
    fmt_p = s.numeric_P[s.pitch_is_fmt]
    isr = in_scale_ratio(fmt_p.tolist()) if len(fmt_p) else None
    q, total = arpeggio_counts(s)
    return PieceMetrics(s.name, s.n, rep_p, rep_d, isr, q / total if total else None, total)


@dataclass
class MetricsReport:
    seq_rep_4_pitch: float
    seq_rep_4_duration: float
    kl_pitch: float
    kl_duration: float
    isr: float
    ar: float
    counts: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    if not vals:
        raise ValueError("no piece qualifies for this metric")
    return float(np.mean(vals))


def corpus_summary(seqs: Sequence[TokenSequence]) -> tuple[dict, list[PieceMetrics]]:
    pieces = [piece_metrics(s) for s in seqs]
    pitches = pitch_sample(seqs)
    summary = {
        "seq_rep_4_pitch": _mean(p.seq_rep_4_pitch for p in pieces),
        "seq_rep_4_duration": _mean(p.seq_rep_4_duration for p in pieces),
        "isr": in_scale_ratio(pitches.tolist()),
        "ar": _mean(p.ar for p in pieces),
    }
    return summary, pieces


def evaluate(generated: Sequence[TokenSequence], reference: Sequence[TokenSequence],
             direction: str = "gen_ref") -> tuple[MetricsReport, list[PieceMetrics]]:
    """All metrics for ``generated``, with KLs against ``reference``.

    seq-rep and AR are per-piece means; ISR pools all pitches.
    ``direction="ref_gen"`` flips the KL arguments.
    """
    if not generated or not reference:
        raise ValueError("evaluate needs non-empty corpora")
    summary, pieces = corpus_summary(generated)
    ref_summary, _ = corpus_summary(reference)
    gp, rp = pitch_sample(generated), pitch_sample(reference)
    gd, rd = duration_sample(generated), duration_sample(reference)
    if direction == "gen_ref":
        kl_p = kl_kde(gp, rp, grid(*PITCH_GRID))
        kl_d = kl_kde(gd, rd, grid(*DURATION_GRID))
        kl_label = KL_DIRECTION
    elif direction == "ref_gen":
        kl_p = kl_kde(rp, gp, grid(*PITCH_GRID))
        kl_d = kl_kde(rd, gd, grid(*DURATION_GRID))
        kl_label = "KL(reference || generated)"
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    counts = {
        "pieces": len(generated),
        "reference_pieces": len(reference),
        "seq_rep_pieces": sum(p.seq_rep_4_pitch is not None for p in pieces),
        "isr_pitches": int(len(gp)),
        "ar_pieces": sum(p.ar is not None for p in pieces),
        "ar_grams": sum(p.ar_grams for p in pieces),
        "kl_pitch_samples": [int(len(gp)), int(len(rp))],
        "kl_duration_samples": [int(len(gd)), int(len(rd))],
    }
    metadata = {
        "kl_direction": kl_label,
        "kde_bandwidth": "scott",
        "pitch_grid": list(PITCH_GRID),
        "duration_grid": list(DURATION_GRID),
        "ar_rule": AR_RULE,
        "seq_rep_n": 4,
    }
    report = MetricsReport(kl_pitch=kl_p, kl_duration=kl_d, counts=counts,
                           metadata=metadata, reference=ref_summary, **summary)
    return report, pieces


def write_piece_csv(path, pieces: Sequence[PieceMetrics]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "length", "seq_rep_4_pitch", "seq_rep_4_duration", "isr", "ar",
                    "ar_grams"])
        for p in pieces:
            w.writerow([p.name, p.length, p.seq_rep_4_pitch, p.seq_rep_4_duration, p.isr,
                        p.ar, p.ar_grams])
