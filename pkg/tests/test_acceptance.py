"""Acceptance gate: desk-scale quantitative checks for the full system.

Each test prints one PASS line with its measured numbers (visible with
pytest -s or -rP). Criteria 6 and 7 train real models and dominate the
runtime; everything else finishes in seconds.
"""

from __future__ import annotations

import json
import math
import os
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from midimlm.checkpoint import load_checkpoint
from midimlm.cli import main as cli_main
from midimlm.config import RunConfig
from midimlm.finetune import TASKS, EarlyStop, Finetuner
from midimlm.midi_io import NoteEvent, SongMeta, canonical_note_order, parse_midi, write_midi
from midimlm.model import ModelConfig, build_model
from midimlm.pretrain import (
    Pretrainer,
    apply_plan,
    masker_loss,
    masker_targets,
    plan_masks,
    recovery_loss,
    update_weights,
)
from midimlm.synth import SynthSpec, generate
from midimlm.tokenizer import VOCAB, decode_song, encode_song, round_count, window_song


def _report(n: int, label: str, detail: str) -> None:
    print(f"ACCEPTANCE {n} ({label}): PASS: {detail}")


# ---------------------------------------------------------------------------
# 1. formula oracles


class TestCriterion1FormulaOracles:
    def test_formula_oracles(self):
        # recovery loss: three hand-computed fixtures, tolerance 1e-6
        rows = [torch.zeros(2, 2, dtype=torch.float64) for _ in range(8)]
        w8 = torch.full((8,), 0.125, dtype=torch.float64)
        total, _, _ = recovery_loss(rows, torch.zeros(2, 8, dtype=torch.long), w8)
        assert abs(total.item() - 2 * math.log(2)) < 1e-6

        rows = [torch.tensor([[math.log(9.0), 0.0]], dtype=torch.float64)]
        rows += [torch.tensor([[100.0, 0.0]], dtype=torch.float64) for _ in range(7)]
        w = torch.tensor([0.5] + [0.5 / 7] * 7, dtype=torch.float64)
        total, _, _ = recovery_loss(rows, torch.zeros(1, 8, dtype=torch.long), w)
        assert abs(total.item() - 0.5 * -math.log(0.9)) < 1e-6

        rows = [torch.tensor([[0.0, 5.0]], dtype=torch.float64) for _ in range(8)]
        total, _, _ = recovery_loss(rows, torch.zeros(1, 8, dtype=torch.long), w8)
        assert abs(total.item() - math.log(1 + math.exp(5.0))) < 1e-6

        # attribute reweighting: three fixtures, tolerance 1e-9
        assert np.allclose(update_weights(np.full(8, 0.5)), 0.125, atol=1e-9)
        w = update_weights(np.array([1.0, 0.5, 0.25, 1, 1, 1, 1, 1]))
        assert np.allclose(w, np.array([1, 2, 4, 1, 1, 1, 1, 1]) / 12.0, atol=1e-9)
        w = update_weights(np.array([0.0, 1, 1, 1, 1, 1, 1, 1]))
        assert abs(w[0] - 1000.0 / 1007.0) < 1e-9
        assert abs(w[1] - 1.0 / 1007.0) < 1e-9

        # masker target selection: three fixtures, exact index sets
        top, bottom = masker_targets(np.array([5.0, 1.0, 3.0, 2.0, 4.0]), 40)
        assert sorted(top) == [0, 4] and sorted(bottom) == [1, 3]
        top, bottom = masker_targets(np.array([1.0, 1.0, 1.0, 1.0]), 50)
        assert top.tolist() == [0, 1] and bottom.tolist() == [0, 1]
        top, bottom = masker_targets(np.array([2.0, 7.0]), 50)
        assert top.tolist() == [1] and bottom.tolist() == [0]

        # masker regression loss: three fixtures, tolerance 1e-9
        probs = torch.tensor([0.2, 0.9, 0.5], dtype=torch.float64)
        assert abs(masker_loss(probs, np.array([1]), np.array([0])).item() - 0.05) < 1e-9
        probs = torch.tensor([1.0, 0.0], dtype=torch.float64)
        assert masker_loss(probs, np.array([0]), np.array([1])).item() == 0.0
        probs = torch.tensor([0.1, 0.2, 0.8, 0.7], dtype=torch.float64)
        got = masker_loss(probs, np.array([2, 3]), np.array([0, 1])).item()
        assert abs(got - (0.04 + 0.09 + 0.01 + 0.04)) < 1e-9

        _report(1, "formula oracles", "12 fixtures across 4 formulas within tolerance")


# ---------------------------------------------------------------------------
# 2. gradient correctness


class TestCriterion2Gradients:
    def test_finite_difference_check(self):
        t0 = time.time()
        torch.manual_seed(0)
        config = ModelConfig(hidden=16, layers=1, heads=2, inner=32, dropout=0.0, input_length=12)
        model = build_model(config, seed=0).double()

        meta = SongMeta(480)
        notes = [NoteEvent(i * 240, 240, 40 + (i * 7) % 60, 20 + (i * 11) % 100) for i in range(20)]
        windows = window_song(VOCAB, encode_song(meta, notes), 12, "g")
        tokens_t = torch.from_numpy(np.stack([w.tokens for w in windows]))
        mask_t = torch.from_numpy(np.stack([w.attn_mask for w in windows]))
        win_idx = torch.tensor([0, 0, 0, 1, 1])
        pos = torch.tensor([1, 3, 5, 0, 2])
        originals = tokens_t[win_idx, pos]
        w8 = torch.full((8,), 0.125, dtype=torch.float64)
        tok_target = torch.tensor([2, 0, 1, 2, 0, 1, 2, 0])

        def objective() -> torch.Tensor:
            h = model(tokens_t, mask_t, training=False)
            rows = [l[win_idx, pos] for l in model.recover_logits(h)]
            total, _, _ = recovery_loss(rows, originals, w8)
            chosen = model.masker_probs(h)[win_idx, pos]
            m = masker_loss(chosen, np.array([0, 2]), np.array([1, 3]))
            seq = F.cross_entropy(model.seq_logits(h, mask_t), torch.tensor([1, 3]))
            tok = F.cross_entropy(
                model.tok_logits(h)[:, :4].reshape(-1, config.n_tok_classes), tok_target
            )
            return total + m + seq + tok

        loss = objective()
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}

        rng = np.random.default_rng(7)
        eps = 1e-5
        checked = 0
        worst = 0.0
        with torch.no_grad():
            for name, param in model.named_parameters():
                flat = param.data.view(-1)
                n = flat.numel()
                coords = rng.choice(n, size=min(64, n), replace=False)
                for c in coords:
                    c = int(c)
                    orig = flat[c].item()
                    flat[c] = orig + eps
                    up = objective().item()
                    flat[c] = orig - eps
                    down = objective().item()
                    flat[c] = orig
                    fd = (up - down) / (2 * eps)
                    an = grads[name].view(-1)[c].item()
                    rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-8)
                    assert rel < 1e-3, f"{name}[{c}]: fd={fd:.3e} autograd={an:.3e} rel={rel:.3e}"
                    worst = max(worst, rel)
                    checked += 1
        elapsed = time.time() - t0
        assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
        _report(
            2, "gradient correctness",
            f"{checked} coordinates, worst relative error {worst:.2e}, {elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# 3. round trips


def _fuzz_song(rng: np.random.Generator):
    tpq = int(rng.choice([96, 240, 480, 960]))
    tempo_changes = [
        (int(rng.integers(0, 4000)), int(rng.integers(200_000, 2_000_000)))
        for _ in range(rng.integers(0, 3))
    ]
    timesig_changes = [
        (int(rng.integers(0, 4000)), int(rng.integers(1, 13)), int(rng.choice([1, 2, 4, 8])))
        for _ in range(rng.integers(0, 3))
    ]
    meta = SongMeta(tpq, tempo_changes, timesig_changes)
    instruments = rng.choice(129, size=rng.integers(1, 5), replace=False)
    raw = [
        NoteEvent(
            onset_ticks=int(rng.integers(0, 4000)),
            duration_ticks=int(rng.integers(1, 1000)),
            pitch=int(rng.integers(0, 128)),
            velocity=int(rng.integers(1, 128)),
            instrument=int(rng.choice(instruments)),
            track=int(rng.integers(0, 3)),
        )
        for _ in range(rng.integers(1, 30))
    ]
    kept, last_end = [], {}
    for note in canonical_note_order(raw):
        key = (note.track, note.instrument, note.pitch)
        if note.onset_ticks >= last_end.get(key, 0):
            kept.append(note)
            last_end[key] = note.onset_ticks + note.duration_ticks
    return meta, canonical_note_order(kept)


class TestCriterion3RoundTrips:
    def test_tokenizer_and_midi_round_trips(self):
        t0 = time.time()
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            meta, notes = _fuzz_song(rng)

            once = encode_song(meta, notes)
            meta2, notes2 = decode_song(VOCAB, once)
            again = encode_song(meta2, notes2)
            assert np.array_equal(once, again)

            meta3, notes3 = parse_midi(write_midi(meta, notes))
            assert notes3 == notes
            assert meta3 == meta
        elapsed = time.time() - t0
        assert elapsed < 60.0, f"round trips took {elapsed:.1f}s"
        _report(3, "round trips", f"1000 songs, tokenizer and MIDI exact, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. mask-plan invariants


class TestCriterion4MaskPlans:
    def test_ten_thousand_seeded_plans(self):
        t0 = time.time()
        rng = np.random.default_rng(99)
        p = 15.0
        for _ in range(10_000):
            n = int(rng.integers(8, 64))
            probs = rng.random(n)
            attn = rng.random(n) < 0.9
            frozen = set(int(i) for i in rng.choice(n, size=n // 4, replace=False))
            plan = plan_masks(probs, attn, frozen, p, rng)
            candidates = [i for i in range(n) if attn[i] and i not in frozen]
            if not candidates:
                assert plan.is_empty
                continue
            assert not set(plan.chosen.tolist()) & frozen
            assert plan.chosen.size == max(1, round_count(p, len(candidates)))
            assert plan.mask_positions.size == round_count(80, plan.chosen.size)
            assert plan.random_positions.size == plan.chosen.size - plan.mask_positions.size
            assert sorted(plan.mask_positions.tolist() + plan.random_positions.tolist()) == (
                plan.chosen.tolist()
            )
        elapsed = time.time() - t0
        assert elapsed < 60.0
        _report(4, "mask-plan invariants", f"10000 plans clean, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. tiny overfit


class TestCriterion5TinyOverfit:
    def test_single_window_recovery(self):
        t0 = time.time()
        config = RunConfig().model_config()  # desk preset dimensions
        model = build_model(config, seed=0)
        from midimlm.optim import AdamW

        spec = SynthSpec(n_songs=1, notes_per_song=256, n_styles=1, planted_rate=0.0, seed=0)
        corpus = generate(spec)
        tokens = encode_song(corpus.meta["s0000"], corpus.notes["s0000"])
        window = window_song(VOCAB, tokens, config.input_length, "s0000")[0]

        rng = np.random.default_rng(0)
        plan = plan_masks(rng.random(len(window.tokens)), window.attn_mask, set(), 15, rng)
        masked = apply_plan(window.tokens, plan, rng)

        masked_t = torch.from_numpy(masked[None])
        mask_t = torch.from_numpy(window.attn_mask[None])
        originals = torch.from_numpy(plan.originals)
        pos = torch.from_numpy(plan.chosen)
        w8 = torch.full((8,), 0.125)
        opt = AdamW(model.backbone_parameters(), lr=1e-3)
        gen = torch.Generator().manual_seed(1)

        reached = None
        for step in range(1, 501):
            h = model(masked_t, mask_t, training=True, gen=gen)
            rows = [l[0, pos] for l in model.recover_logits(h)]
            loss, _, _ = recovery_loss(rows, originals, w8)
            model.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if step % 10 == 0:
                with torch.no_grad():
                    h = model(masked_t, mask_t, training=False)
                    rows = [l[0, pos] for l in model.recover_logits(h)]
                    correct = sum(
                        int((r.argmax(dim=1) == originals[:, j]).sum()) for j, r in enumerate(rows)
                    )
                acc = correct / (8 * len(plan.chosen))
                if acc >= 0.99:
                    reached = step
                    break
        elapsed = time.time() - t0
        assert reached is not None, "never reached 99% recovery within 500 steps"
        assert elapsed < 300.0
        _report(5, "tiny overfit", f"99%+ recovery at step {reached}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. planted-position enrichment

ADVERSARIAL_RECIPE = dict(
    layers=1, dropout=0.0, augment=False, adversarial_backbone=True,
    lr_pretrain=1e-3, lr_masker=3e-4, k=15,
)


def _enrichment_ratio(seed: int) -> float:
    spec = SynthSpec(n_songs=200, notes_per_song=256, n_styles=8, planted_rate=0.1, seed=seed)
    corpus = generate(spec)
    tokens = {sid: encode_song(corpus.meta[sid], corpus.notes[sid]) for sid in corpus.notes}
    planted = {sid: set(v) for sid, v in corpus.planted.items()}

    cfg = RunConfig(seed=seed, batch_size=4, epochs=45, **ADVERSARIAL_RECIPE)
    trainer = Pretrainer(cfg, tokens)
    for _ in range(45):  # three freeze cycles at k=15
        trainer.run_epoch()

    hits = expected = 0.0
    for sid, frozen in trainer.registry.items():
        hits += len(frozen & planted[sid])
        expected += len(frozen) * len(planted[sid]) / len(tokens[sid])
    return hits / expected


class TestCriterion6Enrichment:
    def test_frozen_set_concentrates_on_planted_positions(self):
        t0 = time.time()
        ratios = [_enrichment_ratio(seed) for seed in (0, 1, 2)]
        mean = sum(ratios) / len(ratios)
        elapsed = time.time() - t0
        assert mean >= 2.0, f"mean enrichment {mean:.3f} < 2.0 (per seed: {ratios})"
        assert elapsed < 1800.0
        shown = ", ".join(f"{r:.2f}" for r in ratios)
        _report(6, "planted-position enrichment", f"ratios [{shown}], mean {mean:.2f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. mask fine-tuning comparison


def _paired_composer_runs(seed: int, tmpdir: str) -> tuple[int, int, float, float]:
    spec = SynthSpec(n_songs=400, notes_per_song=64, n_styles=8, planted_rate=0.1, seed=seed)
    corpus = generate(spec)
    tokens = {sid: encode_song(corpus.meta[sid], corpus.notes[sid]) for sid in corpus.notes}

    base = dict(
        seed=seed, input_length=64, batch_size=8, epochs=15,
        lr_finetune=1e-3, patience=10, **ADVERSARIAL_RECIPE,
    )
    pretrainer = Pretrainer(RunConfig(**base), tokens)
    for _ in range(15):
        pretrainer.run_epoch()
    ckpt = os.path.join(tmpdir, f"pretrained-{seed}.ckpt")
    pretrainer.save(ckpt)

    reports = {}
    for mask_p in (0, 15):
        cfg = RunConfig(**dict(base, mask_p=mask_p))
        tuner = Finetuner(cfg, TASKS["composer"], tokens, corpus.style, pretrained=ckpt)
        reports[mask_p] = (tuner.run(), list(tuner.val_history))

    rep0, _ = reports[0]
    rep15, hist15 = reports[15]
    target = rep0["best_val_accuracy"]
    reach = next((i + 1 for i, v in enumerate(hist15) if v >= target), len(hist15) + 1)
    return rep0["best_epoch"], reach, rep0["test_accuracy"], rep15["test_accuracy"]


class TestCriterion7MaskFinetuning:
    def test_masked_finetuning_matches_unmasked(self, tmp_path):
        t0 = time.time()
        runs = [_paired_composer_runs(seed, str(tmp_path)) for seed in (0, 1, 2)]
        mean_best0 = sum(r[0] for r in runs) / len(runs)
        mean_reach = sum(r[1] for r in runs) / len(runs)
        mean_delta = sum(r[3] - r[2] for r in runs) / len(runs)
        elapsed = time.time() - t0
        assert mean_reach <= mean_best0, (
            f"masked runs reached the unmasked best in {mean_reach:.2f} epochs on average, "
            f"unmasked took {mean_best0:.2f}"
        )
        assert mean_delta >= -0.02, f"masked test accuracy {mean_delta:+.4f} below unmasked"
        assert elapsed < 1800.0
        _report(
            7, "mask fine-tuning",
            f"reach {mean_reach:.2f} vs best {mean_best0:.2f} epochs, "
            f"test delta {mean_delta:+.4f}, {elapsed:.0f}s",
        )


# ---------------------------------------------------------------------------
# 8. early stopping


class TestCriterion8EarlyStopping:
    def test_patience_30_and_cap_500(self):
        s = EarlyStop(patience=30, max_epochs=500)
        s.update(0.5)
        for i in range(29):
            s.update(0.5)
            assert not s.done, f"stopped early at non-improvement {i + 1}"
        s.update(0.5)
        assert s.done and s.epoch == 31

        s = EarlyStop(patience=30, max_epochs=500)
        for i in range(1, 500):
            s.update(float(i))
            assert not s.done
        s.update(500.0)
        assert s.done and s.epoch == 500
        _report(8, "early stopping", "halts exactly at patience 30 and at the 500-epoch cap")


# ---------------------------------------------------------------------------
# 9. reproducibility


REPRO_CONFIG = dict(
    hidden=16, layers=1, heads=2, inner=32, input_length=16,
    batch_size=8, epochs=3, k=2, lr_pretrain=1e-3,
    n_songs=10, notes_per_song=24, n_styles=2, planted_rate=0.1,
)


def _run_pretrain(root: str, epochs: int, resume: bool = False) -> bytes:
    cwd = os.getcwd()
    os.chdir(root)
    try:
        cfg = dict(REPRO_CONFIG, epochs=epochs)
        with open("config.json", "w") as fh:
            json.dump(cfg, fh)
        if not os.path.exists("corpus/tokens.txt"):
            assert cli_main(["synth", "--config", "config.json"]) == 0
            assert cli_main(["tokenize", "--config", "config.json"]) == 0
        argv = ["pretrain", "--config", "config.json"] + (["--resume"] if resume else [])
        assert cli_main(argv) == 0
        with open("metrics.jsonl", "rb") as fh:
            return fh.read()
    finally:
        os.chdir(cwd)


class TestCriterion9Reproducibility:
    def test_identical_runs_and_resume(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        c = tmp_path / "c"
        for d in (a, b, c):
            d.mkdir()

        metrics_a = _run_pretrain(str(a), epochs=3)
        metrics_b = _run_pretrain(str(b), epochs=3)
        assert metrics_a == metrics_b, "same config and seed produced different metrics"

        _run_pretrain(str(c), epochs=2)
        metrics_c = _run_pretrain(str(c), epochs=3, resume=True)
        assert metrics_c == metrics_a, "resumed run diverged from the uninterrupted run"

        _, arrays_a, extra_a = load_checkpoint(str(a / "checkpoints" / "pretrain.ckpt"))
        _, arrays_c, extra_c = load_checkpoint(str(c / "checkpoints" / "pretrain.ckpt"))
        assert sorted(arrays_a) == sorted(arrays_c)
        for name in arrays_a:
            assert np.array_equal(arrays_a[name], arrays_c[name]), name
        assert extra_a["registry"] == extra_c["registry"]
        assert extra_a["np_rng"] == extra_c["np_rng"]
        capsys.readouterr()
        _report(9, "reproducibility", "identical metrics files; resume bit-identical")
