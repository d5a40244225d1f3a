"""Config file loading, presets, validation, and override precedence."""

from __future__ import annotations

import json

import pytest

from midimlm.config import PRESETS, ConfigError, RunConfig


class TestDefaults:
    def test_desk_preset_is_default(self):
        cfg = RunConfig()
        assert cfg.preset == "desk"
        assert cfg.hidden == 64
        assert cfg.layers == 2
        assert cfg.input_length == 128

    def test_schedule_defaults(self):
        cfg = RunConfig()
        assert (cfg.p, cfg.q, cfg.a, cfg.b, cfg.k) == (15.0, 30.0, 30.0, 10.0, 15)

    def test_model_config_carries_dimensions(self):
        mc = RunConfig(hidden=16, layers=1, heads=2, inner=32).model_config()
        assert mc.hidden == 16 and mc.layers == 1
        assert mc.n_seq_classes == 8 and mc.n_tok_classes == 6
        mc2 = RunConfig().model_config(n_seq_classes=4, n_tok_classes=3)
        assert mc2.n_seq_classes == 4 and mc2.n_tok_classes == 3


class TestValidation:
    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            RunConfig(preset="huge")

    def test_p_bounds(self):
        with pytest.raises(ConfigError):
            RunConfig(p=0)
        with pytest.raises(ConfigError):
            RunConfig(p=101)

    def test_q_bounds(self):
        with pytest.raises(ConfigError):
            RunConfig(q=51)

    def test_a_b_bounds(self):
        with pytest.raises(ConfigError):
            RunConfig(a=-1)
        with pytest.raises(ConfigError):
            RunConfig(b=101)

    def test_k_and_batch(self):
        with pytest.raises(ConfigError):
            RunConfig(k=0)
        with pytest.raises(ConfigError):
            RunConfig(batch_size=0)


class TestLoad:
    def test_missing_path_gives_defaults(self):
        cfg = RunConfig.load(None)
        assert cfg == RunConfig()

    def test_file_values_applied(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            json.dump({"hidden": 32, "epochs": 7, "lr_pretrain": 0.002}, fh)
        cfg = RunConfig.load(path)
        assert cfg.hidden == 32 and cfg.epochs == 7 and cfg.lr_pretrain == 0.002

    def test_preset_then_file_then_overrides(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            json.dump({"preset": "paper", "epochs": 7}, fh)
        cfg = RunConfig.load(path, overrides={"epochs": 9, "seed": 4})
        assert cfg.hidden == PRESETS["paper"]["hidden"] == 768
        assert cfg.epochs == 9
        assert cfg.seed == 4

    def test_none_overrides_ignored(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            json.dump({"epochs": 7}, fh)
        cfg = RunConfig.load(path, overrides={"epochs": None})
        assert cfg.epochs == 7

    def test_unknown_key_named(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            json.dump({"hiden": 32}, fh)
        with pytest.raises(ConfigError, match="hiden"):
            RunConfig.load(path)

    def test_parse_error_reports_line(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            fh.write('{\n  "hidden": 32,\n}\n')
        with pytest.raises(ConfigError, match=r"cfg\.json:3"):
            RunConfig.load(path)

    def test_non_object_rejected(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            fh.write("[1, 2]")
        with pytest.raises(ConfigError, match="object"):
            RunConfig.load(path)

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError, match="cannot read"):
            RunConfig.load("/nonexistent/cfg.json")

    def test_round_trips_through_dict(self):
        cfg = RunConfig(hidden=32, epochs=3)
        assert RunConfig(**cfg.to_dict()) == cfg
