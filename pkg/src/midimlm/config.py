"""Run configuration: JSON file + presets + overrides.

A config file is a single JSON object. Unknown keys are rejected by name;
parse errors are reported with their line number. The ``desk`` preset
(default) is a small model that trains in minutes on a CPU; ``paper`` is
the full-scale configuration. Every value can be overridden individually.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .model import DESK_PRESET, PAPER_PRESET, ModelConfig


class ConfigError(ValueError):
    """Bad configuration file or option."""


PRESETS = {
    "desk": dict(DESK_PRESET, dropout=0.1),
    "paper": dict(PAPER_PRESET, dropout=0.1),
}


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0

    # model
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    inner: int = 256
    dropout: float = 0.1
    input_length: int = 128

    # optimization
    batch_size: int = 8
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-5
    lr_masker: float | None = None
    weight_decay: float = 0.01

    # adversarial pre-training schedule
    p: float = 15.0
    q: float = 30.0
    a: float = 30.0
    b: float = 10.0
    k: int = 15
    epochs: int = 30
    augment: bool = True
    adversarial_backbone: bool = False

    # fine-tuning
    mask_p: float = 15.0
    patience: int = 30
    max_epochs: int = 500
    freeze_backbone: bool = False

    # synthetic corpus
    n_songs: int = 200
    notes_per_song: int = 256
    n_styles: int = 8
    planted_rate: float = 0.1
    plant_attribute: str = "velocity"

    # paths
    corpus_dir: str = "corpus"
    tokens_file: str = "corpus/tokens.txt"
    labels_dir: str = "corpus/labels"
    checkpoint_dir: str = "checkpoints"
    metrics_file: str = "metrics.jsonl"
    report_file: str = "report.json"

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r} (expected desk or paper)")
        if not 0 < self.p <= 100:
            raise ConfigError(f"p must be in (0, 100], got {self.p}")
        if not 0 < self.q <= 50:
            raise ConfigError(f"q must be in (0, 50], got {self.q}")
        if not 0 <= self.a <= 100 or not 0 <= self.b <= 100:
            raise ConfigError("a and b must be in [0, 100]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def model_config(
        self, n_seq_classes: int | None = None, n_tok_classes: int | None = None
    ) -> ModelConfig:
        return ModelConfig(
            hidden=self.hidden,
            layers=self.layers,
            heads=self.heads,
            inner=self.inner,
            dropout=self.dropout,
            input_length=self.input_length,
            n_seq_classes=n_seq_classes if n_seq_classes is not None else 8,
            n_tok_classes=n_tok_classes if n_tok_classes is not None else 6,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "RunConfig":
        """Build a config from an optional JSON file plus explicit overrides.

        Precedence: preset values, then file keys, then overrides.
        """
        raw: dict = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        if overrides:
            raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}

        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")

        preset = raw.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (expected desk or paper)")
        merged = {**PRESETS[preset], "preset": preset, **raw}
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
