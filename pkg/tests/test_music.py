"""Tokenization, vocabulary, JSONL files and the synthetic corpus."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmeripo.metrics import in_scale_ratio, seq_rep_n
from fmeripo.music import (MAX_LEN, VOCAB, Batch, CorpusSpec, Melody, NoteEvent, TokenError,
                           decode, encode, generate_corpus, generate_melodies,
                           onsets_from_durations, pad_sequence, quantize_and_split,
                           quantize_duration, read_melodies, split_train_test, write_melodies)

from conftest import random_melody


# -- vocabulary ---------------------------------------------------------------------

def test_vocab_sizes_and_flags():
    assert VOCAB.pitch_size == 131 and VOCAB.duration_size == 17
    assert not VOCAB.pitch_is_fmt[[VOCAB.pitch_pad, VOCAB.rest, VOCAB.sustain]].any()
    assert VOCAB.pitch_is_fmt.sum() == 128 and VOCAB.duration_is_fmt.sum() == 16
    assert not VOCAB.duration_is_fmt[VOCAB.duration_pad]


def test_vocab_layout_is_stable():
    assert (VOCAB.pitch_pad, VOCAB.rest, VOCAB.sustain) == (0, 1, 2)
    assert VOCAB.pitch_to_index(60) == 63
    assert VOCAB.duration_to_index(0.25) == 1 and VOCAB.duration_to_index(4.0) == 16
    j = VOCAB.to_json()
    assert j["version"] == 1 and j["pitch"]["60"] == {"index": 63, "is_fmt": True}
    assert j["duration"]["pad"] == {"index": 0, "is_fmt": False}


def test_vocab_unknown_tokens():
    with pytest.raises(TokenError):
        VOCAB.pitch_to_index(128)
    with pytest.raises(TokenError):
        VOCAB.duration_to_index(0.3)
    with pytest.raises(TokenError):
        VOCAB.pitch_from_index(131)


# -- quantization and splitting ---------------------------------------------------------

def test_split_whole_note_plus_one():
    assert quantize_and_split([NoteEvent(60, 5.0)]) == [NoteEvent(60, 4.0),
                                                        NoteEvent("sustain", 1.0)]


def test_no_split_within_range():
    assert quantize_and_split([NoteEvent(60, 2.0)]) == [NoteEvent(60, 2.0)]


def test_split_repeats():
    assert quantize_and_split([NoteEvent(60, 9.0)]) == [
        NoteEvent(60, 4.0), NoteEvent("sustain", 4.0), NoteEvent("sustain", 1.0)]


def test_quantize_half_up_and_too_short():
    assert quantize_duration(0.375) == 0.5
    assert quantize_duration(0.37) == 0.25
    with pytest.raises(TokenError):
        quantize_duration(0.1)
    with pytest.raises(TokenError):
        quantize_duration(-1.0)


def test_onsets_examples():
    np.testing.assert_array_equal(onsets_from_durations([1.0]), [0.0])
    np.testing.assert_array_equal(onsets_from_durations([0.5, 0.5, 1.0]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(onsets_from_durations([0.25] * 8), np.arange(8) * 0.25)


# -- encode / decode ------------------------------------------------------------------------

def test_empty_round_trip():
    seq = encode([])
    assert seq.n == 0 and decode(seq) == []


def test_two_note_round_trip():
    events = [NoteEvent(60, 1.0), NoteEvent(62, 1.0)]
    seq = encode(events)
    assert seq.P.tolist() == [63, 65] and seq.D.tolist() == [4, 4]
    assert decode(seq) == events


def test_tie_remerged():
    seq = encode([NoteEvent(60, 5.0)])
    assert seq.P.tolist() == [63, VOCAB.sustain]
    assert decode(seq) == [NoteEvent(60, 5.0)]


def test_rest_advances_onset():
    seq = encode([NoteEvent(60, 1.0), NoteEvent("rest", 0.5), NoteEvent(62, 1.0)])
    np.testing.assert_array_equal(seq.O, [0.0, 1.0, 1.5])
    assert seq.numeric_P.tolist() == [60.0, 0.0, 62.0]
    assert seq.pitch_is_fmt.tolist() == [True, False, True]


def test_too_long_piece():
    with pytest.raises(TokenError):
        encode([NoteEvent(60, 1.0)] * (MAX_LEN + 1))


note = st.builds(NoteEvent,
                 st.one_of(st.integers(0, 127), st.just("rest")),
                 st.integers(1, 16).map(lambda k: k * 0.25))


@settings(max_examples=100, deadline=None)
@given(st.lists(note, max_size=40))
def test_decode_encode_identity(events):
    seq = encode(events)
    seq.validate()
    assert decode(seq) == events


@settings(max_examples=100, deadline=None)
@given(st.lists(note, min_size=1, max_size=30), st.integers(0, 10))
def test_padding_is_a_valid_suffix(events, extra):
    seq = encode(events)
    padded = pad_sequence(seq, seq.n + extra)
    padded.validate()
    assert padded.length == seq.n
    assert np.all(np.diff(padded.O) >= 0)
    assert decode(padded) == decode(seq)
    t = padded.trimmed()
    np.testing.assert_array_equal(t.P, seq.P)


def test_validate_rejects_bad_sequences():
    seq = encode([NoteEvent(60, 1.0), NoteEvent(62, 1.0)])
    seq.O = np.array([0.0, 2.0])
    with pytest.raises(TokenError):
        seq.validate()
    seq = pad_sequence(encode([NoteEvent(60, 1.0)]), 3)
    seq.pad_mask = np.array([False, True, False])
    with pytest.raises(TokenError):
        seq.validate()


# -- JSONL -------------------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path, rng):
    melodies = [random_melody(rng, 12, f"m{i}") for i in range(5)]
    path = tmp_path / "m.jsonl"
    write_melodies(path, melodies)
    again = read_melodies(path)
    assert [m.to_json() for m in again] == [m.to_json() for m in melodies]
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"name", "beats_per_bar", "notes"}


def test_jsonl_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"name": "x", "notes": [{"pitch": "sustain", "dur": 1.0}]}\n')
    with pytest.raises(TokenError):
        read_melodies(bad)
    bad.write_text('{"name": "x", "beats_per_bar": 3, "notes": []}\n')
    with pytest.raises(TokenError):
        read_melodies(bad)
    bad.write_text('not json\n')
    with pytest.raises(TokenError):
        read_melodies(bad)


def test_batch_pads_to_common_length():
    a = encode([NoteEvent(60, 1.0)] * 3)
    b = encode([NoteEvent(62, 0.5)] * 5)
    batch = Batch.from_sequences([a, b])
    assert batch.shape == (2, 5)
    assert batch.pad_mask[0].tolist() == [False] * 3 + [True] * 2
    np.testing.assert_array_equal(batch.O[0, 3:], [3.0, 3.0])


# -- synthetic corpus ------------------------------------------------------------------------

def test_corpus_deterministic():
    spec = CorpusSpec(num_pieces=12, bars_per_piece=4, rng_seed=5)
    a, b = generate_corpus(spec), generate_corpus(spec)
    for x, y in zip(a, b):
        assert x.P.tobytes() == y.P.tobytes() and x.O.tobytes() == y.O.tobytes()
    c = generate_corpus(CorpusSpec(num_pieces=12, bars_per_piece=4, rng_seed=6))
    assert any(x.P.tobytes() != y.P.tobytes() for x, y in zip(a, c))


def test_corpus_all_c_major_and_valid():
    seqs = generate_corpus(CorpusSpec(num_pieces=30, bars_per_piece=8))
    lengths = {s.n for s in seqs}
    assert len(lengths) == 1
    pitches = np.concatenate([s.trimmed().numeric_P for s in seqs])
    assert in_scale_ratio(pitches.tolist()) == 1.0
    for s in seqs:
        s.validate()
        t = s.trimmed()
        # every bar is filled exactly
        assert float(t.O[-1] + t.numeric_D[-1]) == 8 * 4


def test_zero_transposition_repeats_motif():
    spec = CorpusSpec(num_pieces=20, bars_per_piece=16, transposition_set=(0,),
                      rhythm_variation=0.0, rng_seed=3)
    for m in generate_melodies(spec):
        pitches = [n.pitch for n in m.notes]
        bar = len(pitches) // 16
        assert pitches == pitches[:bar] * 16
        assert seq_rep_n(m.encode().P.tolist(), 4) >= 0.9


def test_corpus_spec_errors():
    with pytest.raises(ValueError):
        CorpusSpec(motif_length_range=(10, 12)).validate()
    with pytest.raises(ValueError):
        CorpusSpec(num_pieces=0).validate()
    with pytest.raises(ValueError):
        CorpusSpec(motif_length_range=(6, 6), bars_per_piece=50).validate()


def test_corpus_spec_json_round_trip():
    spec = CorpusSpec(num_pieces=7, transposition_set=(0, 2))
    assert CorpusSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


@pytest.mark.parametrize("n,train", [(10, 9), (200, 180), (11, 9), (1, 0)])
def test_split_floor(n, train):
    a, b = split_train_test(list(range(n)), 0.9, seed=0)
    assert len(a) == train and len(b) == n - train
    assert sorted(a + b) == list(range(n))


def test_melody_rejects_non_midi_pitch():
    with pytest.raises(TokenError):
        Melody.from_json({"name": "x", "notes": [{"pitch": 200, "dur": 1.0}]})
