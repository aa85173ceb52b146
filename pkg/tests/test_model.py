"""RIPO model: parameter census, embedding paths, loss, training and checkpoints."""

import math

import numpy as np
import pytest

from fmeripo.attention import AttentionAblation
from fmeripo.fme import fme_embed
from fmeripo.model import (LOSS_CSV_HEADER, ModelConfig, RipoModel, TrainingDiverged,
                           init_params, load_checkpoint, new_train_state, save_checkpoint, train,
                           train_step, write_loss_csv)
from fmeripo.music import VOCAB, Batch, CorpusSpec, generate_corpus, split_train_test
from fmeripo.optim import grad_check
from fmeripo.tensor import no_grad

from conftest import random_melody, tiny_config


def hand_census(mode: str, d=256, m=256, proj=128, ffn=512, heads=8, L=246, layers=2) -> int:
    def lin(a, b):
        return a * b + b

    embed = 0
    for vocab, specials in ((131, 3), (17, 1)):
        if mode == "fme":
            embed += d + specials * d + lin(d, proj)
        elif mode == "table":
            embed += vocab * d + lin(d, proj)
        else:
            embed += lin(vocab, proj)
    layer = 4 * m + 3 * lin(m, m) + heads * L * (m // heads) + 2 * d * m + lin(m, ffn) + lin(ffn, m)
    return embed + layers * layer + 2 * m + lin(m, 131) + lin(m, 17)


@pytest.mark.parametrize("mode,golden", [("fme", 1_416_596), ("table", 1_452_948),
                                         ("onehot", 1_368_468)])
def test_parameter_census(mode, golden):
    census = RipoModel(ModelConfig(embedding_mode=mode)).parameter_census()
    assert census["total"] == golden == hand_census(mode)
    # only the embedding path differs between modes
    assert census["groups"]["layers"] == 1_310_720


def test_ablation_removes_parameters_and_keeps_other_draws():
    full = init_params(ModelConfig())
    ab = init_params(ModelConfig(ablation=AttentionAblation(use_rel_pitch=False,
                                                            use_rel_onset=False)))
    assert set(full) - set(ab) == {f"layers.{i}.attn.rel_{k}" for i in range(2)
                                   for k in ("pitch", "onset")}
    for name, t in ab.items():
        assert np.array_equal(t.data, full[name].data), name


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=256, proj_dim=64)
    with pytest.raises(ValueError):
        ModelConfig(embedding_mode="w2v")
    with pytest.raises(ValueError):
        ModelConfig(num_heads=3)


def test_config_json_round_trip():
    cfg = ModelConfig(embedding_mode="table", ablation=AttentionAblation(use_pe_beat=False))
    again = ModelConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()


# -- input / forward -------------------------------------------------------------------------

def piece(rng, n_notes=10, name="p"):
    return random_melody(rng, n_notes, name).encode()


def test_build_input_shape_and_termwise(rng):
    model = RipoModel(ModelConfig(seed=3))
    seq = piece(rng, 12)
    x = model.build_input(seq).data
    assert x.shape == (1, seq.n, 256)
    pe = model.positional_encoding(Batch.from_sequences([seq]))[0]
    p = model.params
    for t in range(seq.n):
        ptok = VOCAB.pitch_from_index(int(seq.P[t]))
        dtok = VOCAB.duration_from_index(int(seq.D[t]))
        ep = fme_embed(ptok if isinstance(ptok, str) else float(ptok), model.fme_params("pitch"))
        ed = fme_embed(float(dtok), model.fme_params("duration"))
        row_p = ep.data @ p["proj.pitch.weight"].data + p["proj.pitch.bias"].data
        row_d = ed.data @ p["proj.duration.weight"].data + p["proj.duration.bias"].data
        np.testing.assert_allclose(x[0, t], np.concatenate([row_p, row_d]) + pe[t], atol=1e-12)


def test_identical_tokens_identical_rows_without_pe():
    ab = AttentionAblation(use_pe_onset=False, use_pe_beat=False)
    model = RipoModel(tiny_config(ablation=ab))
    seq = random_melody(np.random.default_rng(0), 2).encode()
    seq.P[:] = seq.P[0]
    seq.D[:] = seq.D[0]
    batch = Batch.from_sequences([seq])
    x = model.build_input(batch).data - model.positional_encoding(batch)
    np.testing.assert_allclose(x[0, 0], x[0, 1], rtol=0, atol=1e-15)


@pytest.mark.parametrize("mode", ["fme", "table", "onehot"])
def test_forward_shapes_finite(rng, mode):
    model = RipoModel(tiny_config(embedding_mode=mode))
    batch = Batch.from_sequences([piece(rng, 7), piece(rng, 11)])
    pl, dl = model.forward(batch)
    assert pl.shape == (2, batch.shape[1], 131) and dl.shape == (2, batch.shape[1], 17)
    assert np.isfinite(pl.data).all() and np.isfinite(dl.data).all()


def test_onehot_matches_explicit_onehot_product(rng):
    model = RipoModel(tiny_config(embedding_mode="onehot"))
    seq = piece(rng, 6)
    x = model.build_input(seq).data[0]
    W = model.params["proj.pitch.weight"].data
    onehot = np.eye(131)[seq.P]
    np.testing.assert_allclose(x[:, :8] - model.positional_encoding(
        Batch.from_sequences([seq]))[0, :, :8], onehot @ W + model.params["proj.pitch.bias"].data,
        atol=1e-14)


def test_dense_forward_matches(rng):
    model = RipoModel(tiny_config())
    batch = Batch.from_sequences([piece(rng, 9), piece(rng, 5)])
    a = model.forward(batch)[0].data
    b = model.forward(batch, dense=True)[0].data
    np.testing.assert_allclose(a, b, atol=1e-11)


def test_end_to_end_causality(rng):
    model = RipoModel(tiny_config())
    seq = piece(rng, 12)
    base_p, base_d = (t.data for t in model.forward(seq))
    for t in (0, 4, 9):
        other = piece(rng, 12)
        P = np.concatenate([seq.P[:t + 1], other.P[t + 1:]])
        D = np.concatenate([seq.D[:t + 1], other.D[t + 1:]])
        mixed = type(seq)(P, D, np.concatenate([[0.0], np.cumsum(VOCAB.duration_values[D])[:-1]]),
                          np.zeros(len(P), bool))
        pl, dl = model.forward(mixed)
        assert np.array_equal(pl.data[:, :t + 1], base_p[:, :t + 1])
        assert np.array_equal(dl.data[:, :t + 1], base_d[:, :t + 1])


def test_padding_does_not_change_real_positions(rng):
    model = RipoModel(tiny_config())
    seq = piece(rng, 6)
    alone = model.forward(seq)[0].data[0]
    batched = model.forward(Batch.from_sequences([seq, piece(rng, 14)]))[0].data[0, :seq.n]
    np.testing.assert_allclose(alone, batched, atol=1e-12)


# -- loss -----------------------------------------------------------------------------------

def test_uniform_model_loss():
    model = RipoModel(tiny_config())
    for fam in ("pitch", "duration"):
        model.params[f"head.{fam}.weight"].data[:] = 0.0
        model.params[f"head.{fam}.bias"].data[:] = 0.0
    seq = piece(np.random.default_rng(0), 10)
    ce_p, ce_d, ce_sum = model.loss(seq)
    assert ce_p.item() == pytest.approx(math.log(131), abs=1e-12)
    assert ce_d.item() == pytest.approx(math.log(17), abs=1e-12)
    assert ce_sum.item() == ce_p.item() + ce_d.item()


def test_loss_errors():
    model = RipoModel(tiny_config())
    with pytest.raises(ValueError):
        model.loss(piece(np.random.default_rng(0), 1))


def test_loss_ignores_pads(rng):
    model = RipoModel(tiny_config())
    a, b = piece(rng, 5), piece(rng, 9)
    ce_a = model.loss(a)[2].item()
    ce_b = model.loss(b)[2].item()
    joint = model.loss(Batch.from_sequences([a, b]))[2].item()
    assert joint == pytest.approx((ce_a * 4 + ce_b * 8) / 12, abs=1e-12)


def test_model_gradients_small(rng):
    model = RipoModel(tiny_config(num_heads=2))
    batch = Batch.from_sequences([piece(rng, 6), piece(rng, 8)])
    report = grad_check(lambda: model.loss(batch)[2], model.params, samples_per_param=3,
                        rng=np.random.default_rng(0))
    assert report.max_rel_error < 1e-4, report.worst(3)


# -- training -------------------------------------------------------------------------------------

def small_corpus(n=12, bars=2, seed=0):
    return generate_corpus(CorpusSpec(num_pieces=n, bars_per_piece=bars, rng_seed=seed))


def test_training_deterministic():
    seqs = small_corpus()
    a = train(seqs[:10], tiny_config(seed=1), 2, seqs[10:])
    b = train(seqs[:10], tiny_config(seed=1), 2, seqs[10:])
    assert [r.csv() for r in a.log] == [r.csv() for r in b.log]
    for name in a.model.params:
        assert np.array_equal(a.model.params[name].data, b.model.params[name].data)


def test_training_reduces_loss_and_decays_lr():
    seqs = small_corpus(24, 2)
    cfg = tiny_config(seed=0, lr=3e-3)
    state = new_train_state(cfg)
    batch = Batch.from_sequences(seqs[:8])
    losses = [train_step(state, batch)[2] for _ in range(60)]
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0] - 1.0
    state = train(seqs, cfg, 3)
    assert state.optimizer.lr == pytest.approx(3e-3 * 0.95 ** 3)
    assert [r.split for r in state.log] == ["train"] * 3


def test_training_diverges_loudly():
    seqs = small_corpus(4, 1)
    state = new_train_state(tiny_config())
    state.model.params["head.pitch.bias"].data[0] = np.nan
    with pytest.raises(TrainingDiverged):
        train_step(state, Batch.from_sequences(seqs))


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train([], tiny_config(), 1)


def test_checkpoint_round_trip(tmp_path):
    seqs = small_corpus()
    state = train(seqs[:10], tiny_config(seed=2), 1, seqs[10:])
    path = tmp_path / "ck.npz"
    save_checkpoint(path, state)
    again = load_checkpoint(path)
    batch = Batch.from_sequences(seqs[10:])
    with no_grad():
        a = state.model.forward(batch)
        b = again.model.forward(batch)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)
    assert again.epoch == 1 and again.optimizer.state.step_count == state.optimizer.state.step_count
    assert [r.csv() for r in again.log] == [r.csv() for r in state.log]
    # resuming continues the same trajectory as an uninterrupted run
    resumed = train(seqs[:10], again.model.cfg, 2, seqs[10:], state=again)
    straight = train(seqs[:10], tiny_config(seed=2), 2, seqs[10:])
    assert [r.csv() for r in resumed.log] == [r.csv() for r in straight.log]


def test_loss_csv(tmp_path):
    seqs = small_corpus()
    state = train(seqs[:10], tiny_config(), 1, seqs[10:])
    path = tmp_path / "loss.csv"
    write_loss_csv(path, state.log)
    lines = path.read_text().splitlines()
    assert lines[0] == LOSS_CSV_HEADER
    epoch, split, *vals = lines[2].split(",")
    assert (epoch, split) == ("1", "heldout")
    assert float(vals[2]) == pytest.approx(float(vals[0]) + float(vals[1]))


def test_split_helper_is_used_consistently():
    seqs = small_corpus(10)
    tr, te = split_train_test(seqs, 0.9, seed=0)
    assert len(tr) == 9 and len(te) == 1
