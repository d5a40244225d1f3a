"""Deterministic synthetic corpora with planted context-free tokens.

Each style is a fixed generative rule: a scale, a rhythm cycle, a role
pattern (bass/accompaniment/melody) that controls register, a velocity
contour, and a tempo/time-signature choice. Every non-planted attribute of
note i is a pure function of (style, i), so held-out structure is fully
learnable from context.

A fraction of positions per song is "planted": their velocity (or pitch,
by option) is overwritten i.i.d. from a skewed categorical distribution.
The values themselves are ordinary contour values, so a planted token is
an in-vocabulary token that disagrees with the pattern its neighbors
imply; it is statistically independent of its context and genuinely
unrecoverable from it. Planted positions are recorded as ground truth so
tests can check that adversarial mask selection finds and freezes them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .midi_io import NoteEvent, SongMeta, write_midi
from .finetune import write_seq_labels, write_tok_labels

GRID_TICKS = 120  # sixteenth note at 480 ticks per quarter
TPQ = 480

ROLE_PATTERN = (2, 0, 1, 1, 0, 1, 0, 1)  # 0 accompaniment, 1 melody, 2 bass
ROLE_OFFSET = {0: 0, 1: 12, 2: -12}

SCALES = (
    (60, 62, 64, 65, 67, 69, 71, 72),
    (57, 59, 60, 62, 64, 65, 68, 69),
    (62, 64, 65, 67, 69, 71, 72, 74),
    (52, 53, 56, 57, 59, 60, 63, 64),
    (65, 67, 69, 71, 72, 74, 76, 77),
    (55, 57, 60, 62, 64, 67, 69, 72),
    (59, 62, 63, 64, 66, 69, 71, 74),
    (60, 62, 64, 66, 68, 70, 72, 74),
)
RHYTHMS = (
    (4, 4, 2, 2, 4),
    (2, 2, 2, 2, 4, 4),
    (4, 2, 4, 2),
    (2, 4, 2, 4, 4),
    (4, 4, 4, 2, 2),
    (2, 2, 4, 4),
    (4, 2, 2, 2, 2),
    (2, 4, 4, 2),
)
TEMPI_US = (625000, 500000, 416667, 357143)  # 96, 120, 144, 168 BPM
PLANTED_VELOCITIES = (42, 60, 78)
PLANTED_PITCHES = (60, 67, 74)
PLANTED_PROBS = (0.6, 0.3, 0.1)

N_STYLES_MAX = len(SCALES)


@dataclass
class SynthSpec:
    n_songs: int = 200
    notes_per_song: int = 256
    n_styles: int = 8
    planted_rate: float = 0.1
    seed: int = 0
    plant_attribute: str = "velocity"  # or "pitch"

    def __post_init__(self) -> None:
        if not 1 <= self.n_styles <= N_STYLES_MAX:
            raise ValueError(f"n_styles must be in 1..{N_STYLES_MAX}")
        if not 0.0 <= self.planted_rate <= 1.0:
            raise ValueError("planted_rate must be in [0, 1]")
        if self.plant_attribute not in ("velocity", "pitch"):
            raise ValueError("plant_attribute must be 'velocity' or 'pitch'")


@dataclass
class SynthCorpus:
    meta: dict[str, SongMeta] = field(default_factory=dict)
    notes: dict[str, list[NoteEvent]] = field(default_factory=dict)
    style: dict[str, int] = field(default_factory=dict)
    emotion: dict[str, int] = field(default_factory=dict)
    melody_roles: dict[str, np.ndarray] = field(default_factory=dict)
    planted: dict[str, list[int]] = field(default_factory=dict)


def _style_note(style: int, i: int) -> tuple[int, int, int, int]:
    """(duration_units, pitch, velocity, role) for note i of a style."""
    scale = SCALES[style]
    rhythm = RHYTHMS[style]
    role = ROLE_PATTERN[i % len(ROLE_PATTERN)]
    degree = (i * 3 + style) % len(scale)
    pitch = scale[degree] + ROLE_OFFSET[role]
    velocity = 36 + 6 * ((i + style) % 8)
    duration = rhythm[i % len(rhythm)]
    return duration, pitch, velocity, role


def generate(spec: SynthSpec) -> SynthCorpus:
    """Build the corpus; fully reproducible from (spec, seed)."""
    rng = np.random.default_rng(spec.seed)
    corpus = SynthCorpus()
    planted_values = (
        PLANTED_VELOCITIES if spec.plant_attribute == "velocity" else PLANTED_PITCHES
    )
    for idx in range(spec.n_songs):
        sid = f"s{idx:04d}"
        style = idx % spec.n_styles
        n = spec.notes_per_song

        durations = np.zeros(n, dtype=np.int64)
        pitches = np.zeros(n, dtype=np.int64)
        velocities = np.zeros(n, dtype=np.int64)
        roles = np.zeros(n, dtype=np.int64)
        for i in range(n):
            durations[i], pitches[i], velocities[i], roles[i] = _style_note(style, i)

        if spec.planted_rate > 0:
            mask = rng.random(n) < spec.planted_rate
            planted_idx = np.nonzero(mask)[0]
            values = rng.choice(planted_values, size=len(planted_idx), p=PLANTED_PROBS)
            if spec.plant_attribute == "velocity":
                velocities[planted_idx] = values
            else:
                pitches[planted_idx] = values
        else:
            planted_idx = np.zeros(0, dtype=np.int64)

        notes = []
        onset_units = 0
        for i in range(n):
            notes.append(
                NoteEvent(
                    onset_ticks=onset_units * GRID_TICKS,
                    duration_ticks=int(durations[i]) * GRID_TICKS,
                    pitch=int(pitches[i]),
                    velocity=int(velocities[i]),
                    instrument=0,
                    track=0,
                )
            )
            onset_units += int(durations[i])

        timesig = (4, 4) if style % 2 == 0 else (3, 4)
        meta = SongMeta(
            TPQ,
            tempo_changes=[(0, TEMPI_US[style % len(TEMPI_US)])],
            timesig_changes=[(0, *timesig)],
        )
        corpus.meta[sid] = meta
        corpus.notes[sid] = notes
        corpus.style[sid] = style
        corpus.emotion[sid] = style * 4 // spec.n_styles
        corpus.melody_roles[sid] = roles
        corpus.planted[sid] = [int(i) for i in planted_idx]
    return corpus


def write_corpus_dir(corpus: SynthCorpus, out_dir: str) -> None:
    """Write MIDI files, label files, and the planted-position manifest."""
    midi_dir = os.path.join(out_dir, "midi")
    labels_dir = os.path.join(out_dir, "labels")
    os.makedirs(midi_dir, exist_ok=True)
    os.makedirs(labels_dir, exist_ok=True)
    for sid in sorted(corpus.notes):
        with open(os.path.join(midi_dir, f"{sid}.mid"), "wb") as fh:
            fh.write(write_midi(corpus.meta[sid], corpus.notes[sid]))
    write_seq_labels(os.path.join(labels_dir, "composer.txt"), corpus.style)
    write_seq_labels(os.path.join(labels_dir, "emotion.txt"), corpus.emotion)
    write_tok_labels(os.path.join(labels_dir, "melody.txt"), corpus.melody_roles)
    with open(os.path.join(out_dir, "planted.txt"), "w", encoding="utf-8") as fh:
        for sid in sorted(corpus.planted):
            fh.write(f"{sid}: {','.join(str(i) for i in corpus.planted[sid])}\n")


def read_planted(path: str) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, _, rest = line.partition(":")
            rest = rest.strip()
            out[sid.strip()] = [int(x) for x in rest.split(",")] if rest else []
    return out
