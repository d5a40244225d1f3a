"""Command-line entry point.

Subcommands: synth, tokenize, pretrain, finetune, evaluate. Every command
takes --config (JSON file), --seed and --preset overrides; training
commands take --resume to continue from the latest checkpoint. Exit code 0
on success; 2 for config errors, 3 for data errors, 4 for checkpoint
mismatches.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .finetune import TASKS, Finetuner, evaluate_model, read_labels
from .midi_io import MidiError, parse_midi
from .model import ModelConfig, MusicEncoder
from .pretrain import Pretrainer
from .synth import SynthSpec, generate, write_corpus_dir
from .tokenizer import VOCAB, TokenWindow, encode_song, read_windows, window_song, write_windows

import torch


class DataError(ValueError):
    """Missing or inconsistent input data."""


def _load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "preset", None) is not None:
        overrides["preset"] = args.preset
    return RunConfig.load(args.config, overrides)


def _songs_from_windows(windows: list[TokenWindow]) -> dict[str, np.ndarray]:
    """Re-assemble per-song token arrays from corpus windows."""
    by_song: dict[str, list[TokenWindow]] = {}
    for w in windows:
        by_song.setdefault(w.song_id, []).append(w)
    songs: dict[str, np.ndarray] = {}
    for sid, ws in by_song.items():
        ws.sort(key=lambda w: w.origin_index)
        total = 0
        parts = []
        for w in ws:
            if w.origin_index != total:
                raise DataError(f"song {sid}: window at origin {w.origin_index}, expected {total}")
            parts.append(w.tokens[: w.real_len])
            total += w.real_len
        songs[sid] = np.concatenate(parts) if parts else np.zeros((0, 8), dtype=np.int64)
    return songs


def _load_songs(config: RunConfig) -> dict[str, np.ndarray]:
    if not os.path.exists(config.tokens_file):
        raise DataError(f"tokens file not found: {config.tokens_file}")
    windows, length = read_windows(config.tokens_file)
    if length != config.input_length:
        raise DataError(
            f"tokens file window length {length} does not match config input_length "
            f"{config.input_length}"
        )
    return _songs_from_windows(windows)


def _load_task_labels(config: RunConfig, task_name: str, songs: dict[str, np.ndarray]) -> dict:
    task = TASKS[task_name]
    if task_name == "velocity":
        return {}
    path = os.path.join(config.labels_dir, f"{task_name}.txt")
    if not os.path.exists(path):
        raise DataError(f"label file not found: {path}")
    labels = read_labels(path, task.level)
    missing = sorted(set(songs) - set(labels))
    if missing:
        raise DataError(f"no {task_name} label for songs: {', '.join(missing[:5])}")
    if task.level == "token":
        for sid in songs:
            if len(labels[sid]) != len(songs[sid]):
                raise DataError(
                    f"song {sid}: {len(labels[sid])} token labels for {len(songs[sid])} tokens"
                )
    return labels


# --- subcommands ---


def cmd_synth(args) -> int:
    config = _load_config(args)
    spec = SynthSpec(
        n_songs=config.n_songs,
        notes_per_song=config.notes_per_song,
        n_styles=config.n_styles,
        planted_rate=config.planted_rate,
        seed=config.seed,
        plant_attribute=config.plant_attribute,
    )
    corpus = generate(spec)
    write_corpus_dir(corpus, config.corpus_dir)
    print(f"wrote {len(corpus.notes)} songs to {config.corpus_dir}")
    return 0


def cmd_tokenize(args) -> int:
    config = _load_config(args)
    midi_dir = os.path.join(config.corpus_dir, "midi")
    if not os.path.isdir(midi_dir):
        raise DataError(f"MIDI directory not found: {midi_dir}")
    names = sorted(n for n in os.listdir(midi_dir) if n.endswith(".mid"))
    if not names:
        raise DataError(f"no .mid files in {midi_dir}")
    windows = []
    for name in names:
        with open(os.path.join(midi_dir, name), "rb") as fh:
            data = fh.read()
        try:
            meta, notes = parse_midi(data)
        except MidiError as exc:
            raise DataError(f"{name}: {exc}") from exc
        tokens = encode_song(meta, notes)
        windows.extend(window_song(VOCAB, tokens, config.input_length, name[:-4]))
    os.makedirs(os.path.dirname(os.path.abspath(config.tokens_file)), exist_ok=True)
    write_windows(config.tokens_file, windows, config.input_length)
    print(f"wrote {len(windows)} windows from {len(names)} songs to {config.tokens_file}")
    return 0


def _pretrain_ckpt(config: RunConfig) -> str:
    return os.path.join(config.checkpoint_dir, "pretrain.ckpt")


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    songs = _load_songs(config)
    trainer = Pretrainer(config, songs)
    ckpt = _pretrain_ckpt(config)
    if args.resume:
        if not os.path.exists(ckpt):
            raise DataError(f"cannot resume: {ckpt} does not exist")
        trainer.load(ckpt)
        print(f"resumed from {ckpt} at epoch {trainer.epoch}")
    trainer.train(config.epochs, ckpt, config.metrics_file)
    last = json.loads(trainer.metrics[-1]) if trainer.metrics else {}
    print(
        f"pre-trained {trainer.epoch} epochs; "
        f"mean loss {last.get('mean_loss', float('nan')):.4f}; "
        f"frozen fraction {last.get('frozen_fraction', 0.0):.3f}; "
        f"checkpoint {ckpt}"
    )
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    if args.task not in TASKS:
        raise ConfigError(f"unknown task {args.task!r} (expected one of {sorted(TASKS)})")
    task = TASKS[args.task]
    songs = _load_songs(config)
    labels = _load_task_labels(config, args.task, songs)
    pretrained = args.checkpoint
    if pretrained is None:
        default = _pretrain_ckpt(config)
        pretrained = default if os.path.exists(default) else None
    trainer = Finetuner(config, task, songs, labels, pretrained=pretrained)
    ckpt = os.path.join(config.checkpoint_dir, f"finetune-{task.name}.ckpt")
    if args.resume:
        if not os.path.exists(ckpt):
            raise DataError(f"cannot resume: {ckpt} does not exist")
        trainer.load(ckpt)
        print(f"resumed from {ckpt} at epoch {trainer.stopper.epoch}")
    report = trainer.run(ckpt)
    _write_report(config.report_file, report)
    print(
        f"task {task.name}: test accuracy {report['test_accuracy']:.4f} "
        f"(best val {report['best_val_accuracy']:.4f} at epoch {report['best_epoch']}, "
        f"{report['epochs_trained']} epochs); report {config.report_file}"
    )
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    if args.task not in TASKS:
        raise ConfigError(f"unknown task {args.task!r} (expected one of {sorted(TASKS)})")
    task = TASKS[args.task]
    if args.checkpoint is None:
        raise ConfigError("evaluate requires --checkpoint")
    ckpt_config, arrays, extra = load_checkpoint(args.checkpoint)
    if extra.get("kind") != "finetune":
        raise CheckpointError(f"{args.checkpoint}: not a fine-tuned checkpoint")
    saved = extra["task"]
    if saved["name"] != task.name or saved["level"] != task.level or saved[
        "n_classes"
    ] != task.n_classes:
        raise CheckpointError(
            f"{args.checkpoint}: checkpoint holds a {saved['level']}-level "
            f"{saved['name']} head ({saved['n_classes']} classes), not task {task.name}"
        )
    model_config = ModelConfig.from_dict(ckpt_config["model"])
    model = MusicEncoder(model_config)
    prefix = "best/" if any(n.startswith("best/") for n in arrays) else "model/"
    state = {
        name[len(prefix) :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith(prefix)
    }
    model.load_state_dict(state)

    songs = _load_songs(config)
    labels = _load_task_labels(config, args.task, songs)
    split = args.split
    if split == "all":
        sids = sorted(songs)
    else:
        sids = [s for s in extra["splits"][split] if s in songs]
        if not sids:
            raise DataError(f"no songs from the checkpoint's {split} split are in the corpus")
    accuracy, confusion = evaluate_model(
        model, task, songs, labels, sids, model_config.input_length
    )
    report = {
        "task": task.name,
        "split": split,
        "n_songs": len(sids),
        "accuracy": accuracy,
        "confusion": confusion.tolist(),
    }
    _write_report(config.report_file, report)
    print(f"task {task.name} [{split}]: accuracy {accuracy:.4f} over {len(sids)} songs")
    return 0


def _write_report(path: str, report: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    txt = path + ".txt" if not path.endswith(".json") else path[: -len(".json")] + ".txt"
    with open(txt, "w", encoding="utf-8") as fh:
        for key, value in sorted(report.items()):
            if key == "confusion":
                fh.write("confusion:\n")
                for row in value:
                    fh.write("  " + " ".join(f"{v:6d}" for v in row) + "\n")
            else:
                fh.write(f"{key}: {value}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="midimlm",
        description="Masked-language-model training for symbolic music "
        "with adversarial mask selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("synth", cmd_synth, "generate a synthetic labeled corpus"),
        ("tokenize", cmd_tokenize, "tokenize a MIDI directory into a token corpus file"),
        ("pretrain", cmd_pretrain, "run adversarial masked pre-training"),
        ("finetune", cmd_finetune, "fine-tune on a downstream task"),
        ("evaluate", cmd_evaluate, "evaluate a fine-tuned checkpoint"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--preset", choices=["desk", "paper"], help="model scale preset")
        if name in ("pretrain", "finetune"):
            p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
        if name in ("finetune", "evaluate"):
            p.add_argument("--task", required=True, choices=sorted(TASKS))
            p.add_argument("--checkpoint", help="checkpoint file to start from / evaluate")
        if name == "evaluate":
            p.add_argument(
                "--split",
                default="test",
                choices=["train", "val", "test", "all"],
                help="which stored split to evaluate (default: test)",
            )
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, MidiError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
