"""Standard MIDI File (SMF) parsing and writing.

Supports format 0 and 1 files, note-on/note-off/program-change channel
events, and the tempo (0x51) / time-signature (0x58) meta events. Other
events are skipped. Notes are returned in a canonical order so that
``parse_midi(write_midi(meta, notes)) == (meta, notes)`` holds for any
canonically ordered input.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

DEFAULT_TEMPO_US = 500_000  # microseconds per quarter note (120 BPM)
DEFAULT_TIMESIG = (4, 4)
PERCUSSION_CHANNEL = 9
PERCUSSION_INSTRUMENT = 128

# Melodic channels in assignment order; channel 9 is reserved for percussion.
_MELODIC_CHANNELS = [c for c in range(16) if c != PERCUSSION_CHANNEL]


class MidiError(ValueError):
    """Malformed or unsupported MIDI data."""


@dataclass(frozen=True)
class NoteEvent:
    """One note with absolute tick timing.

    ``instrument`` is the General MIDI program number 0-127, or 128 for
    notes on the percussion channel.
    """

    onset_ticks: int
    duration_ticks: int
    pitch: int
    velocity: int
    instrument: int = 0
    track: int = 0

    def __post_init__(self) -> None:
        if self.onset_ticks < 0:
            raise ValueError(f"onset_ticks must be >= 0, got {self.onset_ticks}")
        if self.duration_ticks < 1:
            raise ValueError(f"duration_ticks must be >= 1, got {self.duration_ticks}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not 0 <= self.instrument <= 128:
            raise ValueError(f"instrument out of range: {self.instrument}")
        if self.track < 0:
            raise ValueError(f"track must be >= 0, got {self.track}")

    def sort_key(self) -> tuple:
        return (
            self.onset_ticks,
            self.track,
            self.instrument,
            self.pitch,
            self.duration_ticks,
            self.velocity,
        )


@dataclass
class SongMeta:
    """Timing context for a song: resolution, tempo map and time signatures.

    Both change lists are normalised on construction: strictly sorted by
    tick, at most one entry per tick (last wins), with a default entry
    inserted at tick 0 when absent.
    """

    ticks_per_quarter: int
    tempo_changes: list[tuple[int, int]] = field(default_factory=list)
    timesig_changes: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 1 <= self.ticks_per_quarter <= 0x7FFF:
            raise ValueError("ticks_per_quarter must be in 1..32767")
        self.tempo_changes = _normalize(self.tempo_changes, (0, DEFAULT_TEMPO_US))
        self.timesig_changes = _normalize(self.timesig_changes, (0, *DEFAULT_TIMESIG))
        for _, tempo in self.tempo_changes:
            if not 1 <= tempo <= 0xFFFFFF:
                raise ValueError(f"tempo out of range: {tempo}")
        for _, num, den in self.timesig_changes:
            if not 1 <= num <= 255 or not 1 <= den <= 256 or den & (den - 1):
                raise ValueError(f"bad time signature {num}/{den} (denominator must be a power of 2)")


def _normalize(changes: list, default: tuple) -> list:
    out: dict[int, tuple] = {}
    for entry in sorted(changes, key=lambda e: e[0]):
        tick = entry[0]
        if tick < 0:
            raise ValueError(f"change tick must be >= 0, got {tick}")
        out[tick] = tuple(entry)
    if 0 not in out:
        out[0] = default
    return [out[t] for t in sorted(out)]


def canonical_note_order(notes: list[NoteEvent]) -> list[NoteEvent]:
    return sorted(notes, key=NoteEvent.sort_key)


# ---------------------------------------------------------------------------
# reading


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def bytes(self, n: int) -> bytes:
        if self.remaining() < n:
            raise MidiError(f"truncated data: wanted {n} bytes, have {self.remaining()}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.bytes(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.bytes(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.bytes(4))[0]

    def vlq(self) -> int:
        value = 0
        for _ in range(4):
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiError("variable-length quantity longer than 4 bytes")

    def data_byte(self) -> int:
        b = self.u8()
        if b & 0x80:
            raise MidiError(f"expected data byte, got status byte 0x{b:02x}")
        return b


def parse_midi(data: bytes) -> tuple[SongMeta, list[NoteEvent]]:
    """Parse SMF bytes into song metadata and a canonically ordered note list.

    Note-on with velocity 0 is treated as note-off; same-pitch overlaps on a
    channel are paired first-on/first-off; note-ons left open at end of
    track are closed at the track's final tick (with a warning).
    """
    r = _Reader(data)
    if r.bytes(4) != b"MThd":
        raise MidiError("missing MThd header")
    header_len = r.u32()
    if header_len < 6:
        raise MidiError(f"bad MThd length {header_len}")
    fmt = r.u16()
    n_tracks = r.u16()
    division = r.u16()
    r.bytes(header_len - 6)
    if fmt not in (0, 1):
        raise MidiError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiError("SMPTE time division not supported")
    if division == 0:
        raise MidiError("time division must be positive")

    notes: list[NoteEvent] = []
    tempo_changes: list[tuple[int, int]] = []
    timesig_changes: list[tuple[int, int, int]] = []

    for track_index in range(n_tracks):
        if r.bytes(4) != b"MTrk":
            raise MidiError(f"missing MTrk chunk for track {track_index}")
        track_len = r.u32()
        if r.remaining() < track_len:
            raise MidiError(f"truncated track {track_index}")
        tr = _Reader(r.data, r.pos, r.pos + track_len)
        r.pos += track_len
        notes.extend(
            _parse_track(tr, track_index, tempo_changes, timesig_changes)
        )

    try:
        meta = SongMeta(division, tempo_changes, timesig_changes)
    except ValueError as exc:
        raise MidiError(f"invalid tempo or time-signature data: {exc}") from exc
    return meta, canonical_note_order(notes)


def _parse_track(
    tr: _Reader,
    track_index: int,
    tempo_changes: list,
    timesig_changes: list,
) -> list[NoteEvent]:
    notes: list[NoteEvent] = []
    # (channel, pitch) -> FIFO of (onset_tick, velocity, instrument)
    active: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    programs = [0] * 16
    tick = 0
    status = None
    ended = False

    while tr.remaining() > 0 and not ended:
        tick += tr.vlq()
        first = tr.u8()
        if first & 0x80:
            status = first
        else:
            if status is None or status >= 0xF0:
                raise MidiError("data byte without running status")
            tr.pos -= 1

        if status == 0xFF:
            meta_type = tr.u8()
            length = tr.vlq()
            payload = tr.bytes(length)
            if meta_type == 0x2F:
                ended = True
            elif meta_type == 0x51:
                if length != 3:
                    raise MidiError("tempo meta event must carry 3 bytes")
                tempo_changes.append((tick, int.from_bytes(payload, "big")))
            elif meta_type == 0x58:
                if length < 2:
                    raise MidiError("time-signature meta event too short")
                timesig_changes.append((tick, payload[0], 1 << payload[1]))
            status = None
        elif status in (0xF0, 0xF7):
            tr.bytes(tr.vlq())
            status = None
        elif status is not None and 0x80 <= status < 0xF0:
            kind = status & 0xF0
            channel = status & 0x0F
            if kind == 0x90:
                pitch = tr.data_byte()
                velocity = tr.data_byte()
                if velocity == 0:
                    _close_note(notes, active, channel, pitch, tick, track_index)
                else:
                    instrument = (
                        PERCUSSION_INSTRUMENT
                        if channel == PERCUSSION_CHANNEL
                        else programs[channel]
                    )
                    active.setdefault((channel, pitch), []).append(
                        (tick, velocity, instrument)
                    )
            elif kind == 0x80:
                pitch = tr.data_byte()
                tr.data_byte()
                _close_note(notes, active, channel, pitch, tick, track_index)
            elif kind == 0xC0:
                programs[channel] = tr.data_byte()
            elif kind in (0xA0, 0xB0, 0xE0):
                tr.data_byte()
                tr.data_byte()
            elif kind == 0xD0:
                tr.data_byte()
        else:
            raise MidiError(f"unexpected status byte 0x{first:02x}")

    if active:
        open_count = sum(len(v) for v in active.values())
        logger.warning(
            "track %d: closing %d unmatched note-on(s) at final tick %d",
            track_index,
            open_count,
            tick,
        )
        for (channel, pitch), stack in active.items():
            for onset, velocity, instrument in stack:
                notes.append(
                    NoteEvent(
                        onset_ticks=onset,
                        duration_ticks=max(1, tick - onset),
                        pitch=pitch,
                        velocity=velocity,
                        instrument=instrument,
                        track=track_index,
                    )
                )
    return notes


def _close_note(notes, active, channel, pitch, tick, track_index) -> None:
    stack = active.get((channel, pitch))
    if not stack:
        logger.warning("track %d: note-off without matching note-on (pitch %d)", track_index, pitch)
        return
    onset, velocity, instrument = stack.pop(0)
    if not stack:
        del active[(channel, pitch)]
    notes.append(
        NoteEvent(
            onset_ticks=onset,
            duration_ticks=max(1, tick - onset),
            pitch=pitch,
            velocity=velocity,
            instrument=instrument,
            track=track_index,
        )
    )


# ---------------------------------------------------------------------------
# writing


def _vlq_bytes(value: int) -> bytes:
    if value < 0:
        raise ValueError("cannot encode negative delta")
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(chunks))


def write_midi(meta: SongMeta, notes: list[NoteEvent]) -> bytes:
    """Serialize to a format-1 SMF whose parse reproduces ``(meta, notes)``.

    Tempo and time-signature events go to track 0; each note goes to the SMF
    track named by its ``track`` field. Notes are canonicalised to parse
    order before writing.
    """
    notes = canonical_note_order(notes)
    n_tracks = max([1] + [n.track + 1 for n in notes])

    chunks = [struct.pack(">4sIHHH", b"MThd", 6, 1, n_tracks, meta.ticks_per_quarter)]
    for track_index in range(n_tracks):
        track_notes = [n for n in notes if n.track == track_index]
        events = _track_events(meta if track_index == 0 else None, track_notes)
        chunks.append(_encode_track(events))
    return b"".join(chunks)


def _track_events(meta: SongMeta | None, notes: list[NoteEvent]) -> list[tuple[int, int, bytes]]:
    """Build (tick, priority, payload) events; priority fixes same-tick order."""
    events: list[tuple[int, int, bytes]] = []
    if meta is not None:
        for tick, num, den in meta.timesig_changes:
            dd = den.bit_length() - 1
            events.append((tick, 0, bytes([0xFF, 0x58, 0x04, num, dd, 24, 8])))
        for tick, tempo in meta.tempo_changes:
            events.append((tick, 0, bytes([0xFF, 0x51, 0x03]) + tempo.to_bytes(3, "big")))

    channel_of: dict[int, int] = {}
    channel_program: dict[int, int] = {}
    for note in notes:
        if note.instrument == PERCUSSION_INSTRUMENT:
            channel = PERCUSSION_CHANNEL
        else:
            if note.instrument not in channel_of:
                slot = len(channel_of)
                # beyond 15 distinct programs, share the last melodic channel
                channel_of[note.instrument] = _MELODIC_CHANNELS[
                    min(slot, len(_MELODIC_CHANNELS) - 1)
                ]
            channel = channel_of[note.instrument]
            if channel_program.get(channel) != note.instrument:
                # same priority as the note-on keeps it directly in front even
                # when several programs share one channel at one tick
                events.append(
                    (note.onset_ticks, 3, bytes([0xC0 | channel, note.instrument]))
                )
                channel_program[channel] = note.instrument
        events.append(
            (note.onset_ticks, 3, bytes([0x90 | channel, note.pitch, note.velocity]))
        )
        events.append(
            (note.onset_ticks + note.duration_ticks, 2, bytes([0x80 | channel, note.pitch, 0]))
        )
    return events


def _encode_track(events: list[tuple[int, int, bytes]]) -> bytes:
    events = sorted(
        enumerate(events), key=lambda item: (item[1][0], item[1][1], item[0])
    )
    payload = bytearray()
    tick = 0
    for _, (event_tick, _, data) in events:
        payload += _vlq_bytes(event_tick - tick)
        payload += data
        tick = event_tick
    payload += _vlq_bytes(0) + bytes([0xFF, 0x2F, 0x00])
    return struct.pack(">4sI", b"MTrk", len(payload)) + bytes(payload)
