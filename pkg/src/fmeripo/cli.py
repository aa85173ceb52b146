"""Command-line entry point: make-corpus, train, generate, evaluate, inspect.

Every run writes ``resolved_config.json`` next to its outputs; passing that
file back with ``--config`` (optionally with a new ``--out``) repeats the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .decoding import GenerationConfig, generate, trace_ground_truth
from .fme import closed_form_distance
from .metrics import evaluate, write_piece_csv
from .model import (ModelConfig, RipoModel, TrainingDiverged, load_checkpoint, save_checkpoint,
                    train, write_loss_csv)
from .music import (VOCAB, CorpusSpec, TokenError, generate_melodies, melody_from_sequence,
                    read_melodies, split_train_test, write_melodies)

log = logging.getLogger("fmeripo")

OUTPUT_DIR_ENV = "FMERIPO_OUTPUT_DIR"


class CliError(Exception):
    pass


# checked after --config is merged so a saved config can stand in for them
REQUIRED = {
    "train": ("corpus",),
    "generate": ("checkpoint", "seeds"),
    "evaluate": ("generated", "reference"),
}


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_DIR_ENV) or os.path.join("runs", args.command)
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    return path


def _write_resolved(out: Path, args, extra: dict | None = None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config", "out")}
    cfg["version"] = __version__
    if extra:
        cfg.update(extra)
    _dump_json(out / "resolved_config.json", cfg)


def _load_sequences(path):
    if not Path(path).exists():
        raise CliError(f"missing corpus file {path}")
    return [m.encode() for m in read_melodies(path)]


# -- subcommands ------------------------------------------------------------------

def cmd_make_corpus(args):
    spec = CorpusSpec(
        num_pieces=args.num_pieces,
        bars_per_piece=args.bars,
        motif_length_range=(args.motif_min, args.motif_max),
        transposition_set=tuple(args.transpositions),
        rhythm_variation=args.rhythm_variation,
        rng_seed=args.seed,
    )
    out = _out_dir(args)
    melodies = generate_melodies(spec)
    train_part, test_part = split_train_test(melodies, 0.9, seed=args.seed)
    write_melodies(out / "train.jsonl", train_part)
    write_melodies(out / "test.jsonl", test_part)
    _dump_json(out / "vocab.json", VOCAB.to_json())
    _write_resolved(out, args, {"corpus_spec": spec.to_json()})
    log.info("wrote %d train / %d test pieces to %s", len(train_part), len(test_part), out)


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        num_layers=args.layers, num_heads=args.heads, model_dim=args.model_dim,
        fme_dim=args.fme_dim, proj_dim=args.model_dim // 2, ffn_dim=args.ffn_dim,
        batch_size=args.batch_size, lr=args.lr, lr_decay=args.lr_decay,
        embedding_mode=args.embedding, seed=args.seed,
        ablation={
            "use_rel_onset": not args.no_rel_onset,
            "use_rel_pitch": not args.no_rel_pitch,
            "use_rel_index": not args.no_rel_index,
            "use_pe_onset": not args.no_pe_onset,
            "use_pe_beat": not args.no_pe_beat,
        },
    )


def cmd_train(args):
    corpus = Path(args.corpus)
    train_seqs = _load_sequences(corpus / "train.jsonl")
    heldout = _load_sequences(corpus / "test.jsonl") if (corpus / "test.jsonl").exists() else []
    if not train_seqs:
        raise CliError("training corpus is empty")
    cfg = _model_config(args)
    out = _out_dir(args)
    _write_resolved(out, args, {"model_config": cfg.to_json()})
    state = train(train_seqs, cfg, args.epochs, heldout)
    write_loss_csv(out / "loss.csv", state.log)
    save_checkpoint(out / "checkpoint.npz", state)
    _dump_json(out / "census.json", state.model.parameter_census())


def cmd_generate(args):
    if not Path(args.checkpoint).exists():
        raise CliError(f"missing checkpoint {args.checkpoint}")
    model = load_checkpoint(args.checkpoint).model
    pieces = _load_sequences(args.seeds)
    out = _out_dir(args)
    gen_cfg = GenerationConfig(strategy=args.strategy, k=args.k, p=args.p,
                               temperature=args.temperature, seed_bars=args.seed_bars,
                               target_bars=args.target_bars, rng_seed=args.seed).validate()
    _write_resolved(out, args, {"generation_config": gen_cfg.to_json()})
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    generated = []
    skipped = []
    for i, piece in enumerate(pieces):
        piece_seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        cfg_i = GenerationConfig(**{**gen_cfg.to_json(), "rng_seed": piece_seed})
        try:
            result = generate(model, piece, cfg_i)
        except ValueError as exc:
            log.warning("skipping piece %d (%s): %s", i, piece.name, exc)
            skipped.append(piece.name)
            continue
        result.sequence.name = piece.name
        generated.append(melody_from_sequence(result.sequence))
        result.trace.write_csv(trace_dir / f"{i:04d}.csv")
        if args.ground_truth_traces:
            trace_ground_truth(model, piece).write_csv(trace_dir / f"{i:04d}_ground_truth.csv")
    write_melodies(out / "generated.jsonl", generated)
    _dump_json(out / "summary.json", {"generated": len(generated), "skipped": skipped})


def cmd_evaluate(args):
    gen = _load_sequences(args.generated)
    ref = _load_sequences(args.reference)
    if not gen or not ref:
        raise CliError("evaluate needs non-empty corpora")
    out = _out_dir(args)
    _write_resolved(out, args)
    report, pieces = evaluate(gen, ref, direction=args.kl_direction)
    _dump_json(out / "metrics.json", report.to_json())
    write_piece_csv(out / "pieces.csv", pieces)


def self_distance(table: np.ndarray) -> np.ndarray:
    diff = table[:, None, :] - table[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _write_matrix(path, labels, matrix):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("token," + ",".join(str(x) for x in labels) + "\n")
        for lab, row in zip(labels, matrix):
            fh.write(f"{lab}," + ",".join(repr(float(v)) for v in row) + "\n")


def cmd_inspect(args):
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise CliError(f"missing checkpoint {args.checkpoint}")
        model = load_checkpoint(args.checkpoint).model
    else:
        model = RipoModel(ModelConfig(embedding_mode=args.embedding, seed=args.seed))
    out = _out_dir(args)
    _write_resolved(out, args, {"model_config": model.cfg.to_json()})
    for family in ("pitch", "duration"):
        table = model.token_table(family).data
        fmt = VOCAB.pitch_is_fmt if family == "pitch" else VOCAB.duration_is_fmt
        tokens = VOCAB.pitch_tokens if family == "pitch" else VOCAB.duration_tokens
        labels = [t for t, f in zip(tokens, fmt) if f]
        _write_matrix(out / f"{family}_self_distance.csv", labels, self_distance(table[fmt]))
    deltas = np.arange(0, 127.0 + 1e-9, 0.25)
    with open(out / "distance_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("delta,pitch_distance,duration_distance\n")
        dp = closed_form_distance(deltas, model.cfg.fme_dim, model.cfg.fme.pitch_base)
        dd = closed_form_distance(deltas, model.cfg.fme_dim, model.cfg.fme.duration_base)
        for x, a, b in zip(deltas, dp, dd):
            fh.write(f"{x!r},{float(a)!r},{float(b)!r}\n")


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmeripo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None,
                       help=f"output directory (default: ${OUTPUT_DIR_ENV} or runs/<command>)")
        p.add_argument("--config", default=None,
                       help="resolved_config.json of an earlier run to repeat")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("make-corpus", help="write a synthetic motif corpus (90/10 split)")
    common(p)
    p.add_argument("--num-pieces", type=int, default=200)
    p.add_argument("--bars", type=int, default=16)
    p.add_argument("--motif-min", type=int, default=3)
    p.add_argument("--motif-max", type=int, default=6)
    p.add_argument("--transpositions", type=int, nargs="+", default=[-2, -1, 0, 1, 2, 3, 4])
    p.add_argument("--rhythm-variation", type=float, default=0.25)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train", help="train a RIPO transformer")
    common(p)
    p.add_argument("--corpus", help="directory with train.jsonl / test.jsonl (required)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--embedding", choices=["fme", "table", "onehot"], default="fme")
    p.add_argument("--no-rel-onset", action="store_true")
    p.add_argument("--no-rel-pitch", action="store_true")
    p.add_argument("--no-rel-index", action="store_true")
    p.add_argument("--no-pe-onset", action="store_true")
    p.add_argument("--no-pe-beat", action="store_true")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--model-dim", type=int, default=256)
    p.add_argument("--fme-dim", type=int, default=256)
    p.add_argument("--ffn-dim", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.95)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="continue the first bars of each seed piece")
    common(p)
    p.add_argument("--checkpoint", help="(required)")
    p.add_argument("--seeds", help="JSONL pieces to seed from, usually the test split (required)")
    p.add_argument("--strategy", choices=["top_k", "top_p"], default="top_p")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("-p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed-bars", type=int, default=2)
    p.add_argument("--target-bars", type=int, default=16)
    p.add_argument("--ground-truth-traces", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="objective metrics of generated pieces")
    common(p)
    p.add_argument("--generated", help="(required)")
    p.add_argument("--reference", help="(required)")
    p.add_argument("--kl-direction", choices=["gen_ref", "ref_gen"], default="gen_ref")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="self-distance matrices and the distance curve")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--embedding", choices=["fme", "table", "onehot"], default="fme")
    p.set_defaults(func=cmd_inspect)
    return parser


def resolve_args(args: argparse.Namespace) -> argparse.Namespace:
    """Merge a saved resolved_config.json into parsed args and check required options."""
    if args.config:
        try:
            saved = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if saved.get("command") != args.command:
            raise CliError(f"config is for {saved.get('command')!r}, not {args.command!r}")
        for key, value in saved.items():
            if key in vars(args) and key not in ("out", "config", "verbose"):
                setattr(args, key, value)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise CliError(f"missing required option(s): {flags}")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        resolve_args(args)
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                            logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.func(args)
    except (CliError, TokenError, TrainingDiverged, ValueError, OSError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
