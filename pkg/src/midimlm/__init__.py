"""Masked-language-model training for symbolic music with adversarial mask selection."""

from .config import RunConfig
from .midi_io import NoteEvent, SongMeta, parse_midi, write_midi
from .model import ModelConfig, MusicEncoder, build_model
from .tokenizer import VOCAB, VOCAB_SIZES, TokenWindow, Vocabulary, decode_song, encode_song

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "NoteEvent",
    "SongMeta",
    "parse_midi",
    "write_midi",
    "ModelConfig",
    "MusicEncoder",
    "build_model",
    "VOCAB",
    "VOCAB_SIZES",
    "TokenWindow",
    "Vocabulary",
    "decode_song",
    "encode_song",
    "__version__",
]
