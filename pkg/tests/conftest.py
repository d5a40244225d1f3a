"""Shared fixtures and hypothesis strategies."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from midimlm.midi_io import NoteEvent, SongMeta, canonical_note_order

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


# --- strategies ---

DENOMS = (1, 2, 4, 8)


@st.composite
def song_metas(draw):
    tpq = draw(st.sampled_from([96, 240, 480, 960]))
    n_tempo = draw(st.integers(0, 3))
    tempo_changes = [
        (draw(st.integers(0, 4000)), draw(st.integers(200_000, 2_000_000)))
        for _ in range(n_tempo)
    ]
    n_ts = draw(st.integers(0, 3))
    timesig_changes = [
        (
            draw(st.integers(0, 4000)),
            draw(st.integers(1, 12)),
            draw(st.sampled_from(DENOMS)),
        )
        for _ in range(n_ts)
    ]
    return SongMeta(tpq, tempo_changes, timesig_changes)


@st.composite
def note_lists(draw, max_notes: int = 30):
    """Note lists whose same-(track, instrument, pitch) notes never overlap,
    so the SMF round trip is exact (FIFO pairing cannot cross)."""
    n = draw(st.integers(0, max_notes))
    instruments = draw(
        st.lists(st.integers(0, 128), min_size=1, max_size=6, unique=True)
    )
    raw = []
    for _ in range(n):
        raw.append(
            NoteEvent(
                onset_ticks=draw(st.integers(0, 4000)),
                duration_ticks=draw(st.integers(1, 1000)),
                pitch=draw(st.integers(0, 127)),
                velocity=draw(st.integers(1, 127)),
                instrument=draw(st.sampled_from(instruments)),
                track=draw(st.integers(0, 2)),
            )
        )
    kept = []
    last_end: dict[tuple, int] = {}
    for note in canonical_note_order(raw):
        key = (note.track, note.instrument, note.pitch)
        if note.onset_ticks >= last_end.get(key, 0):
            kept.append(note)
            last_end[key] = note.onset_ticks + note.duration_ticks
    return canonical_note_order(kept)


@st.composite
def songs(draw, max_notes: int = 30):
    return draw(song_metas()), draw(note_lists(max_notes))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
