"""``perfrnn`` command line: encode, decode, prep, train, sample, eval.

Options may also come from a ``--config`` file of ``key=value`` lines
(``#`` starts a comment); command-line flags win over the file. The
``PERF_SEED`` environment variable replaces the default seed.

Exit codes: 0 success, 2 bad input, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .lstm import ModelConfig
from .midi_io import MidiError, extract_performance, read_midi, write_midi
from .preprocess import LESS, MORE, NONE, CROSS, UNION, Manifest, build_manifest, extend_with_pedal
from .sampling import SamplerConfig, generate
from .train import (
    EmptyManifest,
    NonFiniteLoss,
    TrainingConfig,
    evaluate,
    new_checkpoint,
    run_training,
)
from .vocab import FULL_VOCAB, NO_VELOCITY_VOCAB, decode_with_repairs, encode, from_text, to_text

log = logging.getLogger("perfrnn")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MIDI_SUFFIXES = (".mid", ".midi")


class InputError(Exception):
    pass


def _default_seed() -> int:
    env = os.environ.get("PERF_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"PERF_SEED must be an integer, got {env!r}") from None


def _flag(p, name, **kw):
    p.add_argument(name, **kw)


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="perfrnn", description=__doc__, formatter_class=fmt)
    parser.add_argument("--config", help="key=value file of option defaults", default=None)
    parser.add_argument("--print-config", action="store_true", help="print resolved options as key=value and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="MIDI file -> event text dump", formatter_class=fmt)
    p.add_argument("midi_path")
    p.add_argument("out_path")
    _flag(p, "--pedal", action="store_true", help="extend notes held by the sustain pedal")
    _flag(p, "--no-velocity", action="store_true", help="use the 381-event vocabulary without VELOCITY")

    p = sub.add_parser("decode", help="event text dump -> MIDI file", formatter_class=fmt)
    p.add_argument("dump_path")
    p.add_argument("out_midi")
    _flag(p, "--no-velocity", action="store_true", help="dump uses the no-velocity vocabulary")
    _flag(p, "--strict", action="store_true", help="fail on ill-formed event sequences instead of repairing")

    p = sub.add_parser("prep", help="corpus directory -> clip manifest", formatter_class=fmt)
    p.add_argument("corpus_dir")
    p.add_argument("manifest_out")
    _flag(p, "--clip-len", type=float, default=30.0, help="clip length in seconds")
    _flag(p, "--pedal", action="store_true", help="extend notes held by the sustain pedal")
    _flag(p, "--heldout-fraction", type=float, default=0.1, help="fraction of source files held out")

    d = TrainingConfig()
    p = sub.add_parser("train", help="train or resume a model", formatter_class=fmt)
    p.add_argument("manifest")
    p.add_argument("ckpt_out")
    _flag(p, "--log", default=None, help="training log path (default: CKPT_OUT.log)")
    _flag(p, "--resume", action="store_true", help="continue from CKPT_OUT if it exists")
    _flag(p, "--layers", type=int, default=3, help="LSTM layers")
    _flag(p, "--cells", type=int, default=512, help="cells per LSTM layer")
    _flag(p, "--dtype", choices=("float32", "float64"), default="float32", help="parameter precision")
    _flag(p, "--batch-size", type=int, default=d.batch_size, help="sequences per update")
    _flag(p, "--learning-rate", type=float, default=d.learning_rate, help="SGD step size")
    _flag(p, "--grad-clip", type=float, default=d.grad_clip_norm, help="global gradient norm limit")
    _flag(p, "--max-steps", type=int, default=d.max_steps, help="total updates")
    _flag(p, "--eval-interval", type=int, default=d.eval_interval, help="updates between log lines")
    _flag(p, "--checkpoint-interval", type=int, default=d.checkpoint_interval, help="updates between checkpoints")
    _flag(p, "--segment-len", type=float, default=d.segment_len_s, help="training segment seconds")
    _flag(p, "--augmentation", choices=(LESS, MORE, NONE), default=d.augmentation, help="augmentation policy")
    _flag(p, "--combine", choices=(CROSS, UNION), default=d.combine, help="how Less combines its two augmentations")
    _flag(p, "--no-velocity", action="store_true", help="drop VELOCITY events (381-event vocabulary)")
    _flag(p, "--seed", type=int, default=seed_default, help="random seed")

    s = SamplerConfig()
    p = sub.add_parser("sample", help="generate a performance from a checkpoint", formatter_class=fmt)
    p.add_argument("ckpt")
    p.add_argument("out_midi")
    _flag(p, "--temperature", type=float, default=s.temperature, help="softmax temperature")
    _flag(p, "--greedy", action="store_true", help="argmax instead of sampling")
    _flag(p, "--beam", type=int, default=s.beam_width, help="beam width (1 = plain sampling)")
    _flag(p, "--branch-factor", type=int, default=s.branch_factor, help="continuations drawn per beam")
    _flag(p, "--seconds", type=float, default=s.max_seconds, help="stop once this much time has elapsed")
    _flag(p, "--max-events", type=int, default=s.max_events, help="stop after this many events")
    _flag(p, "--dump", default=None, help="also write the event text dump here")
    _flag(p, "--seed", type=int, default=seed_default, help="random seed")

    p = sub.add_parser("eval", help="held-out per-event log-loss", formatter_class=fmt)
    p.add_argument("ckpt")
    p.add_argument("manifest")
    _flag(p, "--segment-len", type=float, default=d.segment_len_s, help="evaluation crop seconds")
    _flag(p, "--batch-size", type=int, default=d.batch_size, help="sequences per forward pass")
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(action, text: str):
    if isinstance(action, (argparse._StoreTrueAction,)):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"{action.dest}: expected a boolean, got {text!r}")
    value = action.type(text) if action.type else text
    if action.choices and value not in action.choices:
        raise InputError(f"{action.dest}: {value!r} not one of {sorted(action.choices)}")
    return value


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser(_default_seed())
    args = parser.parse_args(argv)
    if args.config:
        sp = _subparser(parser, args.command)
        actions = {a.dest: a for a in sp._actions if a.option_strings and a.dest != "help"}
        try:
            values = read_config(args.config)
        except OSError as e:
            raise InputError(f"cannot read config {args.config}: {e}") from e
        defaults = {}
        for key, text in values.items():
            if key not in actions:
                raise InputError(f"{args.config}: unknown option {key!r} for '{args.command}'")
            defaults[key] = _coerce(actions[key], text)
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def config_text(args: argparse.Namespace) -> str:
    """Resolved options of the chosen subcommand in config-file form."""
    parser = build_parser()
    sp = _subparser(parser, args.command)
    lines = [f"# perfrnn {args.command}"]
    for a in sp._actions:
        if a.option_strings and a.dest != "help":
            v = getattr(args, a.dest)
            lines.append(f"{a.dest}={'' if v is None else v}")
    return "\n".join(lines) + "\n"


def _vocab(no_velocity: bool):
    return NO_VELOCITY_VOCAB if no_velocity else FULL_VOCAB


# ---------------------------------------------------------------------------
# commands


def cmd_encode(args) -> int:
    try:
        perf = extract_performance(read_midi(args.midi_path))
    except (MidiError, OSError) as e:
        raise InputError(f"{args.midi_path}: {e}") from e
    notes = extend_with_pedal(perf.notes, perf.pedals) if args.pedal else perf.notes
    vocab = _vocab(args.no_velocity)
    seq = encode(notes, vocab=vocab, clip_id=Path(args.midi_path).name)
    Path(args.out_path).write_text(to_text(seq, vocab), encoding="utf-8")
    print(f"events: {len(seq)}  duration: {seq.duration_s:.3f} s  notes: {len(notes)}")
    return EXIT_OK


def cmd_decode(args) -> int:
    vocab = _vocab(args.no_velocity)
    try:
        seq = from_text(Path(args.dump_path).read_text(encoding="utf-8"), vocab)
        res = decode_with_repairs(seq.events, strict=args.strict, vocab=vocab)
    except (OSError, ValueError) as e:
        raise InputError(f"{args.dump_path}: {e}") from e
    write_midi(args.out_midi, res.notes, end_s=res.end_s)
    print(f"notes: {len(res.notes)}  duration: {res.end_s:.3f} s  repairs: {res.repairs.total}")
    return EXIT_OK


def cmd_prep(args) -> int:
    corpus = Path(args.corpus_dir)
    if not corpus.is_dir():
        raise InputError(f"{corpus} is not a directory")
    paths = sorted(p for p in corpus.rglob("*") if p.suffix.lower() in MIDI_SUFFIXES)
    if not paths:
        raise InputError(f"no MIDI files under {corpus}")
    if not 0.0 <= args.heldout_fraction <= 1.0:
        raise InputError("heldout-fraction must lie in [0, 1]")
    out = Path(args.manifest_out)
    try:
        m = build_manifest(paths, args.clip_len, args.pedal, args.heldout_fraction, root=out.parent.resolve())
    except (MidiError, OSError) as e:
        raise InputError(str(e)) from e
    m.save(out)
    c = m.counts()
    print(f"files: {len(paths)}  clips: train {c['train']}  heldout {c['heldout']}")
    return EXIT_OK


def _load_manifest(path) -> Manifest:
    try:
        return Manifest.load(path)
    except (OSError, ValueError) as e:
        raise InputError(f"{path}: {e}") from e


def _load_ckpt(path) -> ckpt_io.Checkpoint:
    try:
        return ckpt_io.load_checkpoint(path)
    except ckpt_io.CheckpointError as e:
        raise InputError(f"{path}: {e}") from e


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        grad_clip_norm=args.grad_clip,
        max_steps=args.max_steps,
        eval_interval=args.eval_interval,
        checkpoint_interval=args.checkpoint_interval,
        segment_len_s=args.segment_len,
        augmentation=args.augmentation,
        combine=args.combine,
        use_velocity=not args.no_velocity,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    import numpy as np

    manifest = _load_manifest(args.manifest)
    try:
        cfg = _training_config(args)
    except ValueError as e:
        raise InputError(str(e)) from e
    ckpt_path = Path(args.ckpt_out)
    log_path = args.log or str(ckpt_path) + ".log"
    if args.resume and ckpt_path.exists():
        ck = _load_ckpt(ckpt_path)
        if ck.model.vocab_size != cfg.vocab.size:
            raise InputError("checkpoint vocabulary does not match --no-velocity setting")
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        log.info("resuming %s at step %d", ckpt_path, ck.step)
    else:
        model = ModelConfig(args.layers, args.cells, cfg.vocab.size, args.dtype)
        ck, rng = new_checkpoint(model, cfg)
        Path(log_path).unlink(missing_ok=True)
    ck.training = cfg.__dict__.copy()
    try:
        ck = run_training(manifest, ck, rng, cfg, ckpt_path, log_path)
    except NonFiniteLoss as e:
        print(f"error: training diverged: {e}; last good checkpoint kept at {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EmptyManifest, MidiError, OSError) as e:
        raise InputError(str(e)) from e
    print(f"step: {ck.step}  checkpoint: {ckpt_path}  log: {log_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ck = _load_ckpt(args.ckpt)
    vocab = FULL_VOCAB if ck.model.vocab_size == FULL_VOCAB.size else NO_VELOCITY_VOCAB
    if ck.model.vocab_size != vocab.size:
        raise InputError(f"checkpoint vocabulary size {ck.model.vocab_size} is not a known layout")
    try:
        scfg = SamplerConfig(
            temperature=args.temperature,
            greedy=args.greedy,
            beam_width=args.beam,
            branch_factor=args.branch_factor,
            max_events=args.max_events,
            max_seconds=args.seconds,
            seed=args.seed,
        )
    except ValueError as e:
        raise InputError(str(e)) from e
    seq = generate(ck.params, scfg, vocab)
    res = decode_with_repairs(seq.events, vocab=vocab)
    write_midi(args.out_midi, res.notes, end_s=res.end_s)
    if args.dump:
        Path(args.dump).write_text(to_text(seq, vocab), encoding="utf-8")
    print(f"events: {len(seq)}  notes: {len(res.notes)}  duration: {res.end_s:.3f} s  repairs: {res.repairs.total}")
    return EXIT_OK


def variant_label(ck: ckpt_io.Checkpoint, manifest: Manifest, segment_len_s: float) -> str:
    label = "RNN"
    if ck.model.vocab_size == NO_VELOCITY_VOCAB.size:
        label += "-NV"
    if manifest.extend_pedal:
        label += "-SUS"
    if segment_len_s >= 30:
        label += "-30s"
    return label


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.ckpt)
    manifest = _load_manifest(args.manifest)
    cfg = TrainingConfig(
        batch_size=args.batch_size,
        segment_len_s=args.segment_len,
        use_velocity=ck.model.vocab_size == FULL_VOCAB.size,
    )
    try:
        loss = evaluate(ck.params, manifest, cfg)
    except (EmptyManifest, MidiError, OSError) as e:
        raise InputError(str(e)) from e
    label = variant_label(ck, manifest, args.segment_len)
    print(f"model      log-loss (nats/event)  vocab  step")
    print(f"{label:<10} {loss:.4f}                 {ck.model.vocab_size:<6} {ck.step}")
    return EXIT_OK


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "prep": cmd_prep,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_config:
        sys.stdout.write(config_text(args))
        return EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
