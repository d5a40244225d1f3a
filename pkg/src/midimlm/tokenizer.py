"""Octuple tokenization of note streams.

Each note becomes one token with eight attributes: time signature, tempo,
bar, position, instrument, pitch, duration, velocity. Every attribute has
its own vocabulary with PAD=0 and MASK=1 reserved; real values start at 2.

Timing is quantized to a grid of 4 subdivisions per quarter note. Positions
0-63 cover up to 16 quarters per bar, durations span 1-64 grid units, tempo
uses 49 bins of width 4 BPM centred on 32..224, and velocity uses 32 equal
bins over 1-127.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .midi_io import NoteEvent, SongMeta, canonical_note_order

PAD_ID = 0
MASK_ID = 1
FIRST_REAL_ID = 2

ATTR_NAMES = (
    "time_sig",
    "tempo",
    "bar",
    "position",
    "instrument",
    "pitch",
    "duration",
    "velocity",
)
TS, TEMPO, BAR, POSITION, INSTRUMENT, PITCH, DURATION, VELOCITY = range(8)

TIME_SIGNATURES: tuple[tuple[int, int], ...] = (
    (1, 4), (2, 4), (3, 4), (4, 4), (5, 4), (6, 4), (7, 4), (8, 4),
    (3, 8), (5, 8), (6, 8), (7, 8), (9, 8), (12, 8),
    (2, 2), (3, 2), (4, 2),
)

GRID_PER_QUARTER = 4
N_POSITIONS = 64
N_DURATIONS = 64
N_BARS = 256
TEMPO_BASE_BPM = 32
TEMPO_STEP_BPM = 4
N_TEMPO_BINS = 49
N_VELOCITY_BINS = 32

VOCAB_SIZES = (
    2 + len(TIME_SIGNATURES),  # 19
    2 + N_TEMPO_BINS,          # 51
    2 + N_BARS,                # 258
    2 + N_POSITIONS,           # 66
    2 + 129,                   # 131 (programs 0-127 plus percussion)
    2 + 128,                   # 130
    2 + N_DURATIONS,           # 66
    2 + N_VELOCITY_BINS,       # 34
)

DECODE_TPQ = 480  # resolution used when reconstructing notes from tokens


def _round_half_up(numer: int, denom: int) -> int:
    """Round numer/denom to the nearest integer, halves away from zero."""
    if numer < 0:
        raise ValueError("negative value not supported")
    return (2 * numer + denom) // (2 * denom)


def round_count(percent: float, total: int) -> int:
    """Count corresponding to percent% of total, half rounded away from zero."""
    return int(math.floor(percent / 100.0 * total + 0.5))


class Vocabulary:
    """Fixed attribute vocabularies and the quantization maps behind them."""

    sizes = VOCAB_SIZES

    def __init__(self) -> None:
        self._ts_to_id = {
            sig: FIRST_REAL_ID + i for i, sig in enumerate(TIME_SIGNATURES)
        }
        self.fallback_ts_id = FIRST_REAL_ID + len(TIME_SIGNATURES) - 1

    # --- time signature ---

    def ts_id(self, numerator: int, denominator: int) -> int:
        return self._ts_to_id.get((numerator, denominator), self.fallback_ts_id)

    def ts_value(self, ts_id: int) -> tuple[int, int]:
        return TIME_SIGNATURES[ts_id - FIRST_REAL_ID]

    # --- tempo ---

    def tempo_id(self, us_per_quarter: int) -> int:
        bpm = 60_000_000.0 / us_per_quarter
        bin_ = int((bpm - TEMPO_BASE_BPM) / TEMPO_STEP_BPM + 0.5)
        bin_ = min(max(bin_, 0), N_TEMPO_BINS - 1)
        return FIRST_REAL_ID + bin_

    def tempo_us(self, tempo_id: int) -> int:
        bpm = TEMPO_BASE_BPM + TEMPO_STEP_BPM * (tempo_id - FIRST_REAL_ID)
        return round(60_000_000 / bpm)

    # --- velocity ---

    def velocity_id(self, velocity: int) -> int:
        return FIRST_REAL_ID + (velocity - 1) * N_VELOCITY_BINS // 127

    def velocity_value(self, velocity_id: int) -> int:
        bin_ = velocity_id - FIRST_REAL_ID
        v = 1 + int((bin_ + 0.5) * 127 / N_VELOCITY_BINS + 0.5)
        return min(v, 127)

    # --- simple offsets ---

    def bar_id(self, bar: int) -> int:
        return FIRST_REAL_ID + bar

    def position_id(self, position: int) -> int:
        return FIRST_REAL_ID + position

    def pitch_id(self, pitch: int) -> int:
        return FIRST_REAL_ID + pitch

    def instrument_id(self, instrument: int) -> int:
        return FIRST_REAL_ID + instrument

    def duration_id(self, units: int) -> int:
        return FIRST_REAL_ID + units - 1

    def duration_units(self, duration_id: int) -> int:
        return duration_id - FIRST_REAL_ID + 1


VOCAB = Vocabulary()


@dataclass
class TokenWindow:
    """Fixed-length slice of a song: [L, 8] token array plus padding mask."""

    tokens: np.ndarray
    attn_mask: np.ndarray
    song_id: str
    origin_index: int

    @property
    def real_len(self) -> int:
        return int(self.attn_mask.sum())


def _units_per_bar(numerator: int, denominator: int) -> int:
    # cap keeps position ids inside the vocabulary for exotic signatures
    return min(N_POSITIONS, max(1, GRID_PER_QUARTER * 4 * numerator // denominator))


def _grid(tick: int, tpq: int) -> int:
    return _round_half_up(tick * GRID_PER_QUARTER, tpq)


def encode_song(meta: SongMeta, notes: list[NoteEvent]) -> np.ndarray:
    """Tokenize notes against meta; returns an [N, 8] int64 array.

    Tokens come out sorted by (bar, position, pitch, ...); bar indices are
    re-based in segments of 256 bars so they always fit the bar vocabulary.
    """
    if not notes:
        return np.zeros((0, 8), dtype=np.int64)
    tpq = meta.ticks_per_quarter

    # grid points of signature changes; same grid point: last change wins
    points: list[tuple[int, int]] = []
    for tick, num, den in meta.timesig_changes:
        g = _grid(tick, tpq)
        sid = VOCAB.ts_id(num, den)
        if points and points[-1][0] == g:
            points[-1] = (g, sid)
        else:
            points.append((g, sid))
    # merge runs with equal ids so bar math matches what tokens can express
    merged = [p for i, p in enumerate(points) if i == 0 or points[i - 1][1] != p[1]]

    segments = []  # (grid_start, units_per_bar, ts_id, bar_base)
    bar_base = 0
    for i, (g_start, sid) in enumerate(merged):
        # bar length follows the signature the id denotes, not the raw one,
        # so unsupported signatures quantize consistently with decoding
        upb = _units_per_bar(*VOCAB.ts_value(sid))
        segments.append((g_start, upb, sid, bar_base))
        if i + 1 < len(merged):
            span = merged[i + 1][0] - g_start
            bar_base += -(-span // upb)  # partial final bar counts as full
    seg_starts = [s[0] for s in segments]

    # tempo lookup happens in grid space so notes sharing a cell share a bin
    tempo_points: list[tuple[int, int]] = []
    for tick, us in meta.tempo_changes:
        g = _grid(tick, tpq)
        tid = VOCAB.tempo_id(us)
        if tempo_points and tempo_points[-1][0] == g:
            tempo_points[-1] = (g, tid)
        else:
            tempo_points.append((g, tid))
    tempo_grids = [g for g, _ in tempo_points]

    rows = []
    for note in canonical_note_order(notes):
        g = _grid(note.onset_ticks, tpq)
        seg = segments[bisect_right(seg_starts, g) - 1]
        g_start, upb, ts_id, base = seg
        bar = base + (g - g_start) // upb
        pos = (g - g_start) % upb
        units = min(max(_round_half_up(note.duration_ticks * GRID_PER_QUARTER, tpq), 1), N_DURATIONS)
        tempo_id = tempo_points[bisect_right(tempo_grids, g) - 1][1]
        rows.append(
            (
                ts_id,
                tempo_id,
                bar,
                VOCAB.position_id(pos),
                VOCAB.instrument_id(note.instrument),
                VOCAB.pitch_id(note.pitch),
                VOCAB.duration_id(units),
                VOCAB.velocity_id(note.velocity),
            )
        )

    rows.sort(key=lambda r: (r[BAR], r[POSITION], r[PITCH], r[INSTRUMENT], r[DURATION], r[VELOCITY], r[TS], r[TEMPO]))

    tokens = np.asarray(rows, dtype=np.int64)
    base = 0
    for row in tokens:
        while row[BAR] - base > N_BARS - 1:
            base += N_BARS
        row[BAR] = VOCAB.bar_id(int(row[BAR]) - base)
    return tokens


class DecodeError(ValueError):
    """Token stream contains PAD or MASK attributes."""


def decode_song(vocab: Vocabulary, tokens: np.ndarray) -> tuple[SongMeta, list[NoteEvent]]:
    """Reconstruct (meta, notes) so that re-encoding reproduces the tokens.

    Absolute timing uses a fixed resolution of 480 ticks per quarter; bar
    ids that drop relative to the previous token are read as a 256-bar
    re-basing boundary.
    """
    tokens = np.asarray(tokens)
    bad = np.nonzero(tokens < FIRST_REAL_ID)
    if bad[0].size:
        i, j = int(bad[0][0]), int(bad[1][0])
        kind = "PAD" if tokens[i, j] == PAD_ID else "MASK"
        raise DecodeError(f"{kind} {ATTR_NAMES[j]} attribute at token {i}")
    if tokens.shape[0] == 0:
        return SongMeta(DECODE_TPQ), []

    unit = DECODE_TPQ // GRID_PER_QUARTER
    notes = []
    tempo_changes: list[tuple[int, int]] = []
    timesig_changes: list[tuple[int, int, int]] = []

    bar_base = 0
    prev_raw_bar = -1
    cur_ts_id = -1
    cur_tempo_id = -1
    seg_start_bar = 0
    seg_start_grid = 0
    upb = 1

    for row in tokens:
        raw_bar = int(row[BAR]) - FIRST_REAL_ID
        if raw_bar < prev_raw_bar:
            bar_base += N_BARS
        prev_raw_bar = raw_bar
        bar = bar_base + raw_bar

        if int(row[TS]) != cur_ts_id:
            first_seg = cur_ts_id == -1
            cur_ts_id = int(row[TS])
            num, den = vocab.ts_value(cur_ts_id)
            if not first_seg:
                # later segments begin at their first token's bar
                seg_start_grid += (bar - seg_start_bar) * upb
                seg_start_bar = bar
            upb = _units_per_bar(num, den)
            timesig_changes.append((seg_start_grid * unit, num, den))

        pos = int(row[POSITION]) - FIRST_REAL_ID
        g = seg_start_grid + (bar - seg_start_bar) * upb + pos
        tick = g * unit

        if int(row[TEMPO]) != cur_tempo_id:
            cur_tempo_id = int(row[TEMPO])
            tempo_changes.append((tick, vocab.tempo_us(cur_tempo_id)))

        notes.append(
            NoteEvent(
                onset_ticks=tick,
                duration_ticks=vocab.duration_units(int(row[DURATION])) * unit,
                pitch=int(row[PITCH]) - FIRST_REAL_ID,
                velocity=vocab.velocity_value(int(row[VELOCITY])),
                instrument=int(row[INSTRUMENT]) - FIRST_REAL_ID,
            )
        )

    # anchor the maps at tick 0 so re-encoding sees the same context
    timesig_changes[0] = (0, *timesig_changes[0][1:])
    tempo_changes[0] = (0, tempo_changes[0][1])
    return SongMeta(DECODE_TPQ, tempo_changes, timesig_changes), notes


def transpose(tokens: np.ndarray, semitones: int) -> np.ndarray:
    """Shift every pitch by `semitones`, clamped song-wide to stay in 0-127."""
    if abs(semitones) > 11:
        raise ValueError(f"transposition must be within [-11, 11], got {semitones}")
    out = np.array(tokens, copy=True)
    real = out[:, PITCH] >= FIRST_REAL_ID
    if semitones == 0 or not real.any():
        return out
    lo = int(out[real, PITCH].min()) - FIRST_REAL_ID
    hi = int(out[real, PITCH].max()) - FIRST_REAL_ID
    if semitones > 0:
        shift = min(semitones, 127 - hi)
    else:
        shift = max(semitones, -lo)
    out[real, PITCH] += shift
    return out


def window_song(
    vocab: Vocabulary,
    tokens: np.ndarray,
    length: int,
    song_id: str = "",
) -> list[TokenWindow]:
    """Cut a token sequence into consecutive windows of `length`.

    The last window is right-padded with PAD tokens; bar attributes are
    re-based so each window starts at bar 0 (a mid-window 256-bar reset
    ends the subtraction, since bars restart from 0 there anyway).
    """
    if length < 1:
        raise ValueError("window length must be >= 1")
    windows = []
    for start in range(0, len(tokens), length):
        chunk = np.array(tokens[start : start + length], copy=True)
        n = len(chunk)
        delta = int(chunk[0, BAR]) - FIRST_REAL_ID
        prev = -1
        for row in chunk:
            raw = int(row[BAR]) - FIRST_REAL_ID
            if raw < prev:
                delta = 0
            prev = raw
            row[BAR] = FIRST_REAL_ID + raw - delta
        padded = np.zeros((length, 8), dtype=np.int64)
        padded[:n] = chunk
        mask = np.zeros(length, dtype=bool)
        mask[:n] = True
        windows.append(TokenWindow(padded, mask, song_id, start))
    return windows


# ---------------------------------------------------------------------------
# corpus interchange format

_HEADER_PREFIX = "octuple-corpus v1"


def write_windows(path: str, windows: list[TokenWindow], length: int) -> None:
    """Write windows as text: header, then one window per line.

    Line format: ``song_id origin_index tok;tok;...`` where each token is 8
    comma-separated attribute ids. Only real (non-PAD) tokens are written.
    """
    sizes = ",".join(str(s) for s in VOCAB_SIZES)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_HEADER_PREFIX} L={length} vocab={sizes}\n")
        for w in windows:
            toks = ";".join(
                ",".join(str(int(v)) for v in row) for row in w.tokens[: w.real_len]
            )
            fh.write(f"{w.song_id} {w.origin_index} {toks}\n")


def read_windows(path: str) -> tuple[list[TokenWindow], int]:
    """Read the corpus text format back; returns (windows, L)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(_HEADER_PREFIX):
            raise ValueError(f"{path}: not a token corpus file")
        fields = dict(part.split("=", 1) for part in header[len(_HEADER_PREFIX) :].split())
        length = int(fields["L"])
        sizes = tuple(int(s) for s in fields["vocab"].split(","))
        if sizes != VOCAB_SIZES:
            raise ValueError(f"{path}: vocabulary sizes {sizes} do not match {VOCAB_SIZES}")
        windows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                song_id, origin, toks = line.split(" ", 2)
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: bad window record") from exc
            rows = [
                [int(v) for v in tok.split(",")] for tok in toks.split(";") if tok
            ]
            arr = np.zeros((length, 8), dtype=np.int64)
            mask = np.zeros(length, dtype=bool)
            if rows:
                arr[: len(rows)] = np.asarray(rows, dtype=np.int64)
                mask[: len(rows)] = True
            windows.append(TokenWindow(arr, mask, song_id, int(origin)))
    return windows, length
