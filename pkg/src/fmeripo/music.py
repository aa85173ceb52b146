"""Melody tokenization, the JSONL melody format and a synthetic motif corpus.

A melody is a list of ``NoteEvent(pitch, duration)`` with pitch a MIDI number
or one of the symbols ``"rest"`` / ``"sustain"`` and duration in beats.
Durations live on a 16th-note grid (0.25 beats) up to a whole note (4.0);
longer notes are tied with sustain tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_LEN = 246
BEATS_PER_BAR = 4
DUR_UNIT = 0.25
MAX_DUR = 4.0
NUM_DURATIONS = 16

PAD = "pad"
REST = "rest"
SUSTAIN = "sustain"

C_MAJOR_PITCH_CLASSES = frozenset({0, 2, 4, 5, 7, 9, 11})
C_MAJOR_STEPS = (0, 2, 4, 5, 7, 9, 11)

VOCAB_VERSION = 1


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class NoteEvent:
    pitch: int | str
    duration: float

    @property
    def is_symbolic(self) -> bool:
        return isinstance(self.pitch, str)


class Vocabulary:
    """Index maps for the pitch (131) and duration (17) token families.

    Index layout: non-FMT specials first, then FMT values in increasing
    order. Pitch: pad=0, rest=1, sustain=2, MIDI m -> m + 3. Duration:
    pad=0, k * 0.25 beats -> k for k = 1..16.
    """

    PITCH_SPECIALS = (PAD, REST, SUSTAIN)
    DUR_SPECIALS = (PAD,)

    def __init__(self):
        self.pitch_tokens: list = list(self.PITCH_SPECIALS) + list(range(128))
        self.duration_tokens: list = list(self.DUR_SPECIALS) + [
            k * DUR_UNIT for k in range(1, NUM_DURATIONS + 1)
        ]
        self.pitch_index = {tok: i for i, tok in enumerate(self.pitch_tokens)}
        self.duration_index = {tok: i for i, tok in enumerate(self.duration_tokens)}
        self.pitch_is_fmt = np.array([not isinstance(t, str) for t in self.pitch_tokens])
        self.duration_is_fmt = np.array([not isinstance(t, str) for t in self.duration_tokens])
        # numeric value per index; 0.0 sentinel for non-FMT entries
        self.pitch_values = np.array(
            [0.0 if isinstance(t, str) else float(t) for t in self.pitch_tokens])
        self.duration_values = np.array(
            [0.0 if isinstance(t, str) else float(t) for t in self.duration_tokens])

    @property
    def pitch_size(self) -> int:
        return len(self.pitch_tokens)

    @property
    def duration_size(self) -> int:
        return len(self.duration_tokens)

    @property
    def pitch_pad(self) -> int:
        return self.pitch_index[PAD]

    @property
    def duration_pad(self) -> int:
        return self.duration_index[PAD]

    @property
    def rest(self) -> int:
        return self.pitch_index[REST]

    @property
    def sustain(self) -> int:
        return self.pitch_index[SUSTAIN]

    def pitch_to_index(self, pitch) -> int:
        try:
            return self.pitch_index[pitch]
        except KeyError:
            raise TokenError(f"unknown pitch token {pitch!r}") from None

    def duration_to_index(self, duration: float) -> int:
        k = duration / DUR_UNIT
        if abs(k - round(k)) > 1e-9 or not 1 <= round(k) <= NUM_DURATIONS:
            raise TokenError(f"duration {duration} is not a quantized value in [0.25, 4.0]")
        return int(round(k))

    def pitch_from_index(self, index: int):
        if not 0 <= index < self.pitch_size:
            raise TokenError(f"unknown pitch index {index}")
        return self.pitch_tokens[index]

    def duration_from_index(self, index: int):
        if not 0 <= index < self.duration_size:
            raise TokenError(f"unknown duration index {index}")
        return self.duration_tokens[index]

    def to_json(self) -> dict:
        return {
            "version": VOCAB_VERSION,
            "pitch": {str(t): {"index": i, "is_fmt": bool(self.pitch_is_fmt[i])}
                      for i, t in enumerate(self.pitch_tokens)},
            "duration": {str(t): {"index": i, "is_fmt": bool(self.duration_is_fmt[i])}
                         for i, t in enumerate(self.duration_tokens)},
        }


VOCAB = Vocabulary()


@dataclass
class TokenSequence:
    """Parallel pitch/duration/onset/index vectors for one piece.

    ``pad_mask`` is True at padded positions (always a suffix). Numeric
    vectors hold 0.0 at non-FMT positions; consult ``pitch_is_fmt`` /
    ``duration_is_fmt`` instead of the sentinel.
    """

    P: np.ndarray
    D: np.ndarray
    O: np.ndarray
    pad_mask: np.ndarray
    beat: int = BEATS_PER_BAR
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.P)

    def __len__(self) -> int:
        return len(self.P)

    @property
    def I(self) -> np.ndarray:
        return np.arange(self.n)

    @property
    def length(self) -> int:
        """Number of real (unpadded) tokens."""
        return int((~self.pad_mask).sum())

    @property
    def numeric_P(self) -> np.ndarray:
        return VOCAB.pitch_values[self.P]

    @property
    def numeric_D(self) -> np.ndarray:
        return VOCAB.duration_values[self.D]

    @property
    def pitch_is_fmt(self) -> np.ndarray:
        return VOCAB.pitch_is_fmt[self.P]

    @property
    def duration_is_fmt(self) -> np.ndarray:
        return VOCAB.duration_is_fmt[self.D]

    def trimmed(self) -> "TokenSequence":
        k = self.length
        return TokenSequence(self.P[:k].copy(), self.D[:k].copy(), self.O[:k].copy(),
                             self.pad_mask[:k].copy(), self.beat, self.name)

    def padded(self, n: int) -> "TokenSequence":
        return pad_sequence(self, n)

    def validate(self):
        n = self.n
        if n > MAX_LEN:
            raise TokenError(f"sequence length {n} exceeds {MAX_LEN}")
        if not (len(self.D) == len(self.O) == len(self.pad_mask) == n):
            raise TokenError("ragged token vectors")
        k = self.length
        if self.pad_mask[:k].any() or not self.pad_mask[k:].all():
            raise TokenError("pad positions must form a suffix")
        if n and self.O[0] != 0.0:
            raise TokenError("first onset must be 0")
        if np.any(np.diff(self.O) < 0):
            raise TokenError("onsets must be non-decreasing")
        real_d = self.numeric_D[:k]
        if k and not np.array_equal(self.O[:k], onsets_from_durations(real_d)):
            raise TokenError("onsets are not the running sum of durations")
        if np.any(self.P[k:] != VOCAB.pitch_pad) or np.any(self.D[k:] != VOCAB.duration_pad):
            raise TokenError("padded positions must hold pad tokens")
        if np.any(self.P[:k] == VOCAB.pitch_pad) or np.any(self.D[:k] == VOCAB.duration_pad):
            raise TokenError("pad token inside the real part of the sequence")
        return self


def quantize_duration(duration: float) -> float:
    """Snap to the 16th-note grid, rounding exact midpoints up."""
    if not duration > 0:
        raise TokenError(f"duration must be positive, got {duration}")
    q = math.floor(duration / DUR_UNIT + 0.5) * DUR_UNIT
    if q == 0:
        raise TokenError(f"duration {duration} is shorter than half a 16th note")
    return q


def quantize_and_split(events: Iterable[NoteEvent]) -> list[NoteEvent]:
    """Quantize durations and tie anything longer than a whole note.

    >>> quantize_and_split([NoteEvent(60, 5.0)])
    [NoteEvent(pitch=60, duration=4.0), NoteEvent(pitch='sustain', duration=1.0)]
    """
    out: list[NoteEvent] = []
    for ev in events:
        remaining = quantize_duration(ev.duration)
        pitch = ev.pitch
        while remaining > MAX_DUR:
            out.append(NoteEvent(pitch, MAX_DUR))
            remaining -= MAX_DUR
            pitch = SUSTAIN
        out.append(NoteEvent(pitch, remaining))
    return out


def onsets_from_durations(durations) -> np.ndarray:
    d = np.asarray(durations, dtype=np.float64)
    out = np.zeros(len(d))
    if len(d) > 1:
        out[1:] = np.cumsum(d[:-1])
    return out


def encode(events: Sequence[NoteEvent], beat: int = BEATS_PER_BAR,
           name: str = "") -> TokenSequence:
    events = quantize_and_split(events)
    P = np.array([VOCAB.pitch_to_index(e.pitch) for e in events], dtype=np.int64)
    D = np.array([VOCAB.duration_to_index(e.duration) for e in events], dtype=np.int64)
    O = onsets_from_durations(VOCAB.duration_values[D]) if len(D) else np.zeros(0)
    seq = TokenSequence(P, D, O, np.zeros(len(P), dtype=bool), beat, name)
    if seq.n > MAX_LEN:
        raise TokenError(f"piece {name!r} has {seq.n} tokens, more than {MAX_LEN}")
    return seq


def decode(seq: TokenSequence) -> list[NoteEvent]:
    """Tokens back to events; sustains extend the preceding event.

    A sustain with nothing before it is read as a rest.
    """
    events: list[NoteEvent] = []
    for p, d in zip(seq.P[: seq.length], seq.D[: seq.length]):
        pitch = VOCAB.pitch_from_index(int(p))
        dur = VOCAB.duration_from_index(int(d))
        if pitch == PAD or dur == PAD:
            raise TokenError("pad token inside the real part of the sequence")
        if pitch == SUSTAIN:
            if events:
                prev = events[-1]
                events[-1] = NoteEvent(prev.pitch, prev.duration + dur)
                continue
            pitch = REST
        events.append(NoteEvent(pitch, dur))
    return events


def pad_sequence(seq: TokenSequence, n: int) -> TokenSequence:
    k = seq.length
    if n < k:
        raise TokenError(f"cannot pad a {k}-token sequence to {n}")
    P = np.full(n, VOCAB.pitch_pad, dtype=np.int64)
    D = np.full(n, VOCAB.duration_pad, dtype=np.int64)
    P[:k] = seq.P[:k]
    D[:k] = seq.D[:k]
    O = np.empty(n)
    O[:k] = seq.O[:k]
    # pads sit at the end time of the piece so onsets stay non-decreasing
    end = float(seq.O[k - 1] + VOCAB.duration_values[seq.D[k - 1]]) if k else 0.0
    O[k:] = end
    mask = np.zeros(n, dtype=bool)
    mask[k:] = True
    return TokenSequence(P, D, O, mask, seq.beat, seq.name)


def pad_to_common_length(seqs: Sequence[TokenSequence]) -> list[TokenSequence]:
    n = max((s.length for s in seqs), default=0)
    return [pad_sequence(s, n) for s in seqs]


# -- JSONL melody files -------------------------------------------------------

@dataclass
class Melody:
    name: str
    notes: list[NoteEvent]
    beats_per_bar: int = BEATS_PER_BAR

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "beats_per_bar": self.beats_per_bar,
            "notes": [{"pitch": n.pitch, "dur": n.duration} for n in self.notes],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Melody":
        bpb = int(obj.get("beats_per_bar", BEATS_PER_BAR))
        if bpb != BEATS_PER_BAR:
            raise TokenError(f"only 4/4 is supported, got beats_per_bar={bpb}")
        notes = []
        for raw in obj["notes"]:
            pitch = raw["pitch"]
            if isinstance(pitch, str):
                if pitch != REST:
                    raise TokenError(f"unknown symbolic pitch {pitch!r}")
            elif not (isinstance(pitch, int) and 0 <= pitch <= 127):
                raise TokenError(f"pitch {pitch!r} is not a MIDI number")
            notes.append(NoteEvent(pitch, float(raw["dur"])))
        return cls(str(obj.get("name", "")), notes, bpb)

    def encode(self) -> TokenSequence:
        return encode(self.notes, self.beats_per_bar, self.name)


def read_melodies(path) -> list[Melody]:
    melodies = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                melodies.append(Melody.from_json(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise TokenError(f"{path}:{lineno}: malformed melody ({exc})") from exc
    return melodies


def write_melodies(path, melodies: Iterable[Melody]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for m in melodies:
            fh.write(json.dumps(m.to_json(), separators=(",", ":")) + "\n")


def melody_from_sequence(seq: TokenSequence) -> Melody:
    return Melody(seq.name, decode(seq), seq.beat)


# -- synthetic corpus -----------------------------------------------------------

DEFAULT_RHYTHMS = (
    (1.0, 1.0, 2.0),
    (2.0, 1.0, 1.0),
    (1.5, 0.5, 2.0),
    (1.0, 1.0, 1.0, 1.0),
    (0.5, 0.5, 1.0, 2.0),
    (1.5, 0.5, 1.0, 1.0),
    (2.0, 0.5, 0.5, 1.0),
    (0.5, 0.5, 1.0, 1.0, 1.0),
    (1.0, 0.5, 0.5, 1.0, 1.0),
    (1.0, 1.0, 0.5, 0.5, 1.0),
    (0.5, 0.5, 0.5, 0.5, 1.0, 1.0),
    (1.0, 0.5, 0.5, 0.5, 0.5, 1.0),
)


@dataclass
class CorpusSpec:
    num_pieces: int = 200
    bars_per_piece: int = 16
    motif_length_range: tuple[int, int] = (3, 6)
    transposition_set: tuple[int, ...] = (-2, -1, 0, 1, 2, 3, 4)
    rhythm_palette: tuple[tuple[float, ...], ...] = DEFAULT_RHYTHMS
    rhythm_variation: float = 0.25
    rng_seed: int = 0

    def validate(self):
        lo, hi = self.motif_length_range
        if self.num_pieces < 1 or self.bars_per_piece < 1 or lo < 1 or hi < lo:
            raise ValueError("corpus counts must be positive")
        if not self.transposition_set:
            raise ValueError("transposition_set is empty")
        for pattern in self.rhythm_palette:
            if abs(sum(pattern) - BEATS_PER_BAR) > 1e-9:
                raise ValueError(f"rhythm {pattern} does not fill a 4/4 bar")
        if hi * self.bars_per_piece > MAX_LEN:
            raise ValueError("motif longer than a piece allows (max sequence length)")
        if not any(lo <= len(r) <= hi for r in self.rhythm_palette):
            raise ValueError("no rhythm in the palette matches the motif length range")
        return self

    def to_json(self) -> dict:
        return {
            "num_pieces": self.num_pieces,
            "bars_per_piece": self.bars_per_piece,
            "motif_length_range": list(self.motif_length_range),
            "transposition_set": list(self.transposition_set),
            "rhythm_palette": [list(r) for r in self.rhythm_palette],
            "rhythm_variation": self.rhythm_variation,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusSpec":
        return cls(
            num_pieces=int(obj["num_pieces"]),
            bars_per_piece=int(obj["bars_per_piece"]),
            motif_length_range=tuple(obj["motif_length_range"]),
            transposition_set=tuple(obj["transposition_set"]),
            rhythm_palette=tuple(tuple(float(x) for x in r) for r in obj["rhythm_palette"]),
            rhythm_variation=float(obj["rhythm_variation"]),
            rng_seed=int(obj["rng_seed"]),
        )


def degree_to_midi(degree: int, tonic: int = 60) -> int:
    octave, step = divmod(degree, 7)
    return tonic + 12 * octave + C_MAJOR_STEPS[step]


def generate_melodies(spec: CorpusSpec) -> list[Melody]:
    """One motif per piece, restated every bar at an in-scale transposition.

    Transpositions are diatonic (scale-degree shifts), so every pitch stays
    in C major. With probability ``rhythm_variation`` a bar swaps to another
    palette rhythm with the same note count.
    """
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    lo, hi = spec.motif_length_range
    by_len: dict[int, list[tuple[float, ...]]] = {}
    for r in spec.rhythm_palette:
        if lo <= len(r) <= hi:
            by_len.setdefault(len(r), []).append(tuple(r))
    lengths = sorted(by_len)

    melodies = []
    for i in range(spec.num_pieces):
        m = lengths[int(rng.integers(len(lengths)))]
        rhythms = by_len[m]
        base_rhythm = rhythms[int(rng.integers(len(rhythms)))]
        steps = rng.integers(-2, 3, size=m - 1)
        degrees = np.concatenate([[0], np.cumsum(steps)]) + int(rng.integers(-2, 5))
        notes = []
        for bar in range(spec.bars_per_piece):
            shift = 0 if bar == 0 else int(rng.choice(spec.transposition_set))
            rhythm = base_rhythm
            if len(rhythms) > 1 and rng.random() < spec.rhythm_variation:
                rhythm = rhythms[int(rng.integers(len(rhythms)))]
            for deg, dur in zip(degrees, rhythm):
                notes.append(NoteEvent(degree_to_midi(int(deg) + shift), float(dur)))
        melodies.append(Melody(f"synth-{spec.rng_seed}-{i:05d}", notes))
    return melodies


def generate_corpus(spec: CorpusSpec) -> list[TokenSequence]:
    """Synthetic corpus as token sequences padded to a common length."""
    seqs = [m.encode() for m in generate_melodies(spec)]
    return pad_to_common_length(seqs)


def split_train_test(items: Sequence, train_fraction: float = 0.9,
                     seed: int = 0) -> tuple[list, list]:
    """Random split with ``floor(train_fraction * n)`` items in the training part."""
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(train_fraction * n + 1e-9))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


@dataclass
class Batch:
    """Sequences padded to a common length and stacked along axis 0."""

    P: np.ndarray
    D: np.ndarray
    O: np.ndarray
    pad_mask: np.ndarray
    beat: int = BEATS_PER_BAR
    names: list = field(default_factory=list)

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence]) -> "Batch":
        if not seqs:
            raise ValueError("empty batch")
        beats = {s.beat for s in seqs}
        if len(beats) != 1:
            raise ValueError("mixed meters in one batch")
        padded = pad_to_common_length(seqs)
        return cls(
            np.stack([s.P for s in padded]),
            np.stack([s.D for s in padded]),
            np.stack([s.O for s in padded]),
            np.stack([s.pad_mask for s in padded]),
            beats.pop(),
            [s.name for s in seqs],
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.P.shape

    @property
    def numeric_P(self) -> np.ndarray:
        return VOCAB.pitch_values[self.P]

    @property
    def numeric_D(self) -> np.ndarray:
        return VOCAB.duration_values[self.D]

    @property
    def pitch_is_fmt(self) -> np.ndarray:
        return VOCAB.pitch_is_fmt[self.P]
