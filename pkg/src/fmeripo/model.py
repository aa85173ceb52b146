"""RIPO transformer: FME token embedding, stacked RIPO layers, pitch and
duration heads, next-token loss, training loop and checkpoints.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import AttentionAblation, AttentionContext, RipoLayer
from .fme import FmeFamilyConfig, FmeParams, build_pe, fme_table
from .music import VOCAB, Batch, TokenSequence
from .optim import Adam
from .tensor import Tensor, concat, cross_entropy, layer_norm, no_grad, parameter

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EMBEDDING_MODES = ("fme", "table", "onehot")


@dataclass
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 8
    model_dim: int = 256
    fme_dim: int = 256
    proj_dim: int = 128
    ffn_dim: int = 512
    max_len: int = 246
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.95
    embedding_mode: str = "fme"
    seed: int = 0
    ablation: AttentionAblation = field(default_factory=AttentionAblation)
    fme: FmeFamilyConfig = field(default_factory=FmeFamilyConfig)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AttentionAblation(**self.ablation)
        if isinstance(self.fme, dict):
            self.fme = FmeFamilyConfig(**self.fme)
        self.fme.d = self.fme_dim
        self.validate()

    def validate(self):
        if 2 * self.proj_dim != self.model_dim:
            raise ValueError("model_dim must equal 2 * proj_dim")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.fme_dim % 2 or self.model_dim % 2:
            raise ValueError("embedding dimensions must be even")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ValueError(f"embedding_mode must be one of {EMBEDDING_MODES}")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k not in ("ablation", "fme")}
        out["ablation"] = self.ablation.to_json()
        out["fme"] = self.fme.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for one parameter, independent of which others exist."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def xavier(seed: int, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return parameter(init_rng(seed, name).uniform(-limit, limit, size=shape), name=name)


def normal(seed: int, name: str, shape, scale: float = 0.02) -> Tensor:
    return parameter(init_rng(seed, name).normal(0.0, scale, size=shape), name=name)


def zeros(name: str, shape) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def ones(name: str, shape) -> Tensor:
    return parameter(np.ones(shape), name=name)


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    s, m, d = cfg.seed, cfg.model_dim, cfg.fme_dim
    p: dict[str, Tensor] = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.weight"] = xavier(s, f"{name}.weight", fan_in, fan_out)
        p[f"{name}.bias"] = zeros(f"{name}.bias", fan_out)

    families = (("pitch", VOCAB.pitch_size, VOCAB.PITCH_SPECIALS),
                ("duration", VOCAB.duration_size, VOCAB.DUR_SPECIALS))
    for fam, vocab, specials in families:
        if cfg.embedding_mode == "fme":
            p[f"embed.{fam}.bias"] = zeros(f"embed.{fam}.bias", d)
            p[f"embed.{fam}.nonfmt"] = normal(s, f"embed.{fam}.nonfmt", (len(specials), d))
            linear(f"proj.{fam}", d, cfg.proj_dim)
        elif cfg.embedding_mode == "table":
            p[f"embed.{fam}.table"] = normal(s, f"embed.{fam}.table", (vocab, d))
            linear(f"proj.{fam}", d, cfg.proj_dim)
        else:
            linear(f"proj.{fam}", vocab, cfg.proj_dim)

    ab = cfg.ablation
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        p[f"{pre}.norm1.gain"] = ones(f"{pre}.norm1.gain", m)
        p[f"{pre}.norm1.shift"] = zeros(f"{pre}.norm1.shift", m)
        for proj in ("q", "k", "v"):
            linear(f"{pre}.attn.{proj}", m, m)
        if ab.use_rel_index:
            name = f"{pre}.attn.rel_index"
            p[name] = normal(s, name, (cfg.num_heads, cfg.max_len, cfg.head_dim))
        if ab.use_rel_pitch:
            name = f"{pre}.attn.rel_pitch"
            p[name] = xavier(s, name, d, cfg.head_dim, shape=(d, m))
        if ab.use_rel_onset:
            name = f"{pre}.attn.rel_onset"
            p[name] = xavier(s, name, d, cfg.head_dim, shape=(d, m))
        p[f"{pre}.norm2.gain"] = ones(f"{pre}.norm2.gain", m)
        p[f"{pre}.norm2.shift"] = zeros(f"{pre}.norm2.shift", m)
        linear(f"{pre}.ffn.fc1", m, cfg.ffn_dim)
        linear(f"{pre}.ffn.fc2", cfg.ffn_dim, m)
    p["norm_f.gain"] = ones("norm_f.gain", m)
    p["norm_f.shift"] = zeros("norm_f.shift", m)
    linear("head.pitch", m, VOCAB.pitch_size)
    linear("head.duration", m, VOCAB.duration_size)
    return p


def as_batch(x) -> Batch:
    if isinstance(x, Batch):
        return x
    if isinstance(x, TokenSequence):
        return Batch.from_sequences([x])
    return Batch.from_sequences(list(x))


class RipoModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.layers = [RipoLayer(self.params, f"layers.{i}", cfg.num_heads, cfg.ablation)
                       for i in range(cfg.num_layers)]

    # -- embeddings -----------------------------------------------------------

    def fme_params(self, family: str) -> FmeParams:
        cfg = self.cfg
        if family == "pitch":
            base, specials = cfg.fme.pitch_base, VOCAB.PITCH_SPECIALS
        else:
            base, specials = cfg.fme.duration_base, VOCAB.DUR_SPECIALS
        return FmeParams(base, cfg.fme_dim, self.params[f"embed.{family}.bias"], specials,
                         self.params[f"embed.{family}.nonfmt"])

    def token_table(self, family: str) -> Tensor:
        """Raw (pre-projection) embedding of every token of a family."""
        mode = self.cfg.embedding_mode
        if family == "pitch":
            values, is_fmt, tokens = VOCAB.pitch_values, VOCAB.pitch_is_fmt, VOCAB.pitch_tokens
            size = VOCAB.pitch_size
        else:
            values, is_fmt = VOCAB.duration_values, VOCAB.duration_is_fmt
            tokens, size = VOCAB.duration_tokens, VOCAB.duration_size
        if mode == "fme":
            fp = self.fme_params(family)
            return fme_table(values, is_fmt, fp.nonfmt_tokens, tokens, fp)
        if mode == "table":
            return self.params[f"embed.{family}.table"]
        return Tensor(np.eye(size))

    def projected_table(self, family: str) -> Tensor:
        if self.cfg.embedding_mode == "onehot":
            # one-hot rows times the projection is the projection itself
            return self.params[f"proj.{family}.weight"] + self.params[f"proj.{family}.bias"]
        table = self.token_table(family)
        return table @ self.params[f"proj.{family}.weight"] + self.params[f"proj.{family}.bias"]

    def positional_encoding(self, batch: Batch) -> np.ndarray:
        ab = self.cfg.ablation
        return build_pe(batch.O, self.cfg.fme, batch.beat, dim=self.cfg.model_dim,
                        use_onset=ab.use_pe_onset, use_beat=ab.use_pe_beat)

    def build_input(self, batch) -> Tensor:
        batch = as_batch(batch)
        if batch.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {batch.shape[1]} exceeds {self.cfg.max_len}")
        pitch = self.projected_table("pitch")[batch.P]
        dur = self.projected_table("duration")[batch.D]
        return concat([pitch, dur], axis=-1) + self.positional_encoding(batch)

    def context(self, batch: Batch) -> AttentionContext:
        return AttentionContext.build(batch.numeric_P, batch.pitch_is_fmt, batch.O,
                                      batch.pad_mask, self.cfg.fme.pitch_base,
                                      self.cfg.fme.onset_base)

    # -- forward / loss ---------------------------------------------------------

    def forward(self, batch, dense: bool = False) -> tuple[Tensor, Tensor]:
        batch = as_batch(batch)
        x = self.build_input(batch)
        ctx = self.context(batch)
        for layer in self.layers:
            x = layer(x, ctx, dense)
        x = layer_norm(x, self.params["norm_f.gain"], self.params["norm_f.shift"])
        pitch_logits = x @ self.params["head.pitch.weight"] + self.params["head.pitch.bias"]
        dur_logits = x @ self.params["head.duration.weight"] + self.params["head.duration.bias"]
        return pitch_logits, dur_logits

    def loss(self, batch, dense: bool = False) -> tuple[Tensor, Tensor, Tensor]:
        batch = as_batch(batch)
        if batch.shape[1] < 2:
            raise ValueError("loss needs sequences of length >= 2")
        pitch_logits, dur_logits = self.forward(batch, dense)
        target_mask = ~batch.pad_mask[:, 1:]
        if not target_mask.any():
            raise ValueError("no unpadded target positions")
        ce_p = cross_entropy(pitch_logits[:, :-1], batch.P[:, 1:], target_mask)
        ce_d = cross_entropy(dur_logits[:, :-1], batch.D[:, 1:], target_mask)
        return ce_p, ce_d, ce_p + ce_d

    def num_targets(self, batch) -> int:
        return int((~as_batch(batch).pad_mask[:, 1:]).sum())

    def parameter_census(self) -> dict:
        sizes = {name: int(t.size) for name, t in self.params.items()}
        groups: dict[str, int] = {}
        for name, size in sizes.items():
            key = name.split(".")[0] if not name.startswith("layers.") else "layers"
            groups[key] = groups.get(key, 0) + size
        return {"total": sum(sizes.values()), "groups": groups, "parameters": sizes}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


# -- training -------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossRow:
    epoch: int
    split: str
    ce_p: float
    ce_d: float
    ce_sum: float

    def __post_init__(self):
        self.ce_p, self.ce_d, self.ce_sum = float(self.ce_p), float(self.ce_d), float(self.ce_sum)

    def csv(self) -> str:
        return f"{self.epoch},{self.split},{self.ce_p!r},{self.ce_d!r},{self.ce_sum!r}"


LOSS_CSV_HEADER = "epoch,split,CE_p,CE_d,CE_sum"


def batches(seqs: Sequence[TokenSequence], batch_size: int, order=None):
    order = np.arange(len(seqs)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield Batch.from_sequences([seqs[i].trimmed() for i in order[start:start + batch_size]])


def evaluate_loss(model: RipoModel, seqs: Sequence[TokenSequence],
                  batch_size: int = 16) -> tuple[float, float, float]:
    """Token-weighted CE over a corpus (no graph is built)."""
    tot_p = tot_d = 0.0
    count = 0
    with no_grad():
        for batch in batches(seqs, batch_size):
            k = model.num_targets(batch)
            if k == 0:
                continue
            ce_p, ce_d, _ = model.loss(batch)
            tot_p += ce_p.item() * k
            tot_d += ce_d.item() * k
            count += k
    if count == 0:
        raise ValueError("no target tokens to evaluate")
    return tot_p / count, tot_d / count, (tot_p + tot_d) / count


@dataclass
class TrainState:
    model: RipoModel
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    log: list = field(default_factory=list)


def new_train_state(cfg: ModelConfig) -> TrainState:
    model = RipoModel(cfg)
    opt = Adam(model.params, lr=cfg.lr)
    return TrainState(model, opt, init_rng(cfg.seed, "shuffle"))


def train_step(state: TrainState, batch: Batch) -> tuple[float, float, float]:
    ce_p, ce_d, ce_sum = state.model.loss(batch)
    value = ce_sum.item()
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss at epoch {state.epoch}, step {state.optimizer.state.step_count}: "
            f"CE_p={ce_p.item()}, CE_d={ce_d.item()}")
    ce_sum.backward()
    for name, p in state.model.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient in {name}")
    state.optimizer.step()
    return ce_p.item(), ce_d.item(), value


def train(train_seqs: Sequence[TokenSequence], cfg: ModelConfig, epochs: int,
          heldout_seqs: Sequence[TokenSequence] = (), state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Adam training with a multiplicative per-epoch learning-rate decay.

    Logs token-weighted CE on the training batches seen during the epoch and,
    when given, a full pass over ``heldout_seqs`` after the epoch.
    """
    if not train_seqs:
        raise ValueError("empty training corpus")
    state = state if state is not None else new_train_state(cfg)
    while state.epoch < epochs:
        order = state.rng.permutation(len(train_seqs))
        tot = np.zeros(2)
        count = 0
        for batch in batches(train_seqs, cfg.batch_size, order):
            k = state.model.num_targets(batch)
            if k == 0:
                continue
            ce_p, ce_d, _ = train_step(state, batch)
            tot += (ce_p * k, ce_d * k)
            count += k
        state.epoch += 1
        state.optimizer.lr = state.optimizer.lr * cfg.lr_decay
        tp, td = tot / count
        state.log.append(LossRow(state.epoch, "train", tp, td, tp + td))
        if heldout_seqs:
            state.log.append(LossRow(state.epoch, "heldout",
                                     *evaluate_loss(state.model, heldout_seqs, cfg.batch_size)))
        log.info("epoch %d: %s", state.epoch,
                 ", ".join(f"{r.split} CE_sum={r.ce_sum:.4f}"
                           for r in state.log if r.epoch == state.epoch))
        if on_epoch is not None:
            on_epoch(state)
    return state


def write_loss_csv(path, rows: Sequence[LossRow]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOSS_CSV_HEADER + "\n")
        for r in rows:
            fh.write(r.csv() + "\n")


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, state: TrainState):
    """npz container: ``param/<name>``, ``adam/{m,v}/<name>`` and a JSON header."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.model.cfg.to_json(),
        "epoch": state.epoch,
        "adam": {"step_count": state.optimizer.state.step_count,
                 "lr": state.optimizer.state.lr},
        "rng_state": state.rng.bit_generator.state,
        "parameter_names": list(state.model.params),
        "log": [r.__dict__ for r in state.log],
    }
    arrays = {f"param/{k}": v for k, v in state.model.state_arrays().items()}
    arrays.update({f"adam/{k}": v for k, v in state.optimizer.state_arrays().items()})
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> TrainState:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        cfg = ModelConfig.from_json(header["config"])
        params = {name: parameter(np.array(z[f"param/{name}"]), name=name)
                  for name in header["parameter_names"]}
        adam_arrays = {k[len("adam/"):]: np.array(z[k]) for k in z.files if k.startswith("adam/")}
    model = RipoModel(cfg, params)
    opt = Adam(model.params, lr=cfg.lr)
    opt.load_state_arrays(adam_arrays, header["adam"]["step_count"], header["adam"]["lr"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    rows = [LossRow(**r) for r in header.get("log", [])]
    return TrainState(model, opt, rng, header["epoch"], rows)
