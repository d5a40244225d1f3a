"""Adversarial masked pre-training.

Each batch runs two phases. First the masker scores every position and the
top p% hardest unfrozen real tokens are chosen; 80% of them become MASK and
20% random tokens. The recoverer is trained to restore the originals with a
per-token loss L_i = sum_j w_j * CE_j, summed over the chosen set. Second,
the masker itself is regressed toward 1 on the top q% highest-loss chosen
tokens and toward 0 on the bottom q%, so it learns to propose tokens that
are genuinely hard to recover.

Attribute weights w are refreshed after every epoch from the epoch's
per-attribute recovery accuracies: w_j proportional to 1/a_j (accuracies
floored at 1e-3). Every k epochs a freeze registry is updated per song:
each frozen token is unfrozen with probability b%, then the hardest
unfrozen tokens (by epoch-mean masker probability) are frozen until a% of
the song is frozen. Frozen tokens are never eligible for masking, which
keeps persistently unrecoverable tokens out of the training signal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ModelConfig, MusicEncoder, build_model
from .optim import AdamW
from .tokenizer import (
    FIRST_REAL_ID,
    MASK_ID,
    VOCAB,
    VOCAB_SIZES,
    TokenWindow,
    round_count,
    transpose,
    window_song,
)

ACCURACY_FLOOR = 1e-3


@dataclass
class MaskPlan:
    """Positions chosen for replacement within one window."""

    chosen: np.ndarray
    mask_positions: np.ndarray
    random_positions: np.ndarray
    originals: np.ndarray | None = None

    @property
    def is_empty(self) -> bool:
        return self.chosen.size == 0


def plan_masks(
    mask_probs: np.ndarray,
    attn_mask: np.ndarray,
    frozen: set[int],
    p: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """Choose the top p% hardest unfrozen real positions and split 80/20.

    Returns an empty plan (window skipped) when no candidates exist.
    Ties in probability break toward the lower index. p=100 selects every
    candidate.
    """
    if not 0 < p <= 100:
        raise ValueError(f"p must be in (0, 100], got {p}")
    eligible = np.asarray(attn_mask, dtype=bool).copy()
    for i in frozen:
        if 0 <= i < len(eligible):
            eligible[i] = False
    candidates = np.nonzero(eligible)[0]
    if candidates.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return MaskPlan(empty, empty, empty)
    k = max(1, round_count(p, candidates.size))
    ranked = candidates[np.lexsort((candidates, -mask_probs[candidates]))]
    chosen = np.sort(ranked[:k])
    n_mask = round_count(80, k)
    shuffled = rng.permutation(chosen)
    return MaskPlan(
        chosen=chosen,
        mask_positions=np.sort(shuffled[:n_mask]),
        random_positions=np.sort(shuffled[n_mask:]),
    )


def apply_plan(tokens: np.ndarray, plan: MaskPlan, rng: np.random.Generator) -> np.ndarray:
    """Return a copy with the plan's replacements; records originals in the plan."""
    out = np.array(tokens, copy=True)
    plan.originals = np.array(tokens[plan.chosen], copy=True)
    out[plan.mask_positions] = MASK_ID
    for i in plan.random_positions:
        for j, size in enumerate(VOCAB_SIZES):
            out[i, j] = rng.integers(FIRST_REAL_ID, size)
    return out


def recovery_loss(
    logit_rows: list[torch.Tensor],
    originals: torch.Tensor,
    w: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Weighted recovery loss over a chosen set.

    logit_rows: 8 tensors of shape [m, size_j], one per attribute, already
    gathered at the chosen positions. originals: [m, 8] attribute ids.
    Returns (total loss = sum_i L_i, per-token losses L_i, per-attribute
    correct counts).
    """
    m = originals.shape[0]
    per_token = torch.zeros(m, dtype=logit_rows[0].dtype)
    correct = np.zeros(8, dtype=np.int64)
    for j in range(8):
        ce = F.cross_entropy(logit_rows[j], originals[:, j], reduction="none")
        per_token = per_token + w[j] * ce
        correct[j] = int((logit_rows[j].argmax(dim=1) == originals[:, j]).sum())
    return per_token.sum(), per_token, correct


def update_weights(accuracies: np.ndarray, floor: float = ACCURACY_FLOOR) -> np.ndarray:
    """New attribute weights: w_j = (1/a_j) / sum_i (1/a_i), accuracies floored."""
    a = np.maximum(np.asarray(accuracies, dtype=np.float64), floor)
    inv = 1.0 / a
    return inv / inv.sum()


def masker_targets(losses: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the top/bottom q% losses (targets 1 and 0 respectively).

    k = round(q% of m), capped at floor(m/2) so the sets stay disjoint;
    ties break toward the lower index. Middle tokens carry no target.
    """
    if not 0 < q <= 50:
        raise ValueError(f"q must be in (0, 50], got {q}")
    losses = np.asarray(losses, dtype=np.float64)
    m = losses.size
    k = min(round_count(q, m), m // 2)
    if k == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    idx = np.arange(m)
    top = np.lexsort((idx, -losses))[:k]
    bottom = np.lexsort((idx, losses))[:k]
    return top.astype(np.int64), bottom.astype(np.int64)


def masker_loss(probs: torch.Tensor, top: np.ndarray, bottom: np.ndarray) -> torch.Tensor:
    """Sum of squared errors pushing top-loss probs to 1 and bottom to 0."""
    if top.size == 0 and bottom.size == 0:
        return torch.zeros((), dtype=probs.dtype)
    loss = torch.zeros((), dtype=probs.dtype)
    if bottom.size:
        loss = loss + (probs[torch.from_numpy(bottom)] ** 2).sum()
    if top.size:
        loss = loss + ((probs[torch.from_numpy(top)] - 1.0) ** 2).sum()
    return loss


def freeze_update(
    registry: dict[str, set[int]],
    song_probs: dict[str, np.ndarray],
    a: float,
    b: float,
    rng: np.random.Generator,
) -> dict[str, set[int]]:
    """Per song: unfreeze each frozen token with probability b%, then freeze
    the highest-probability unfrozen tokens until round(a% of song length)
    tokens are frozen. Songs absent from song_probs keep their entry."""
    out: dict[str, set[int]] = {}
    for sid in sorted(song_probs):
        probs = song_probs[sid]
        n = len(probs)
        frozen = sorted(i for i in registry.get(sid, ()) if 0 <= i < n)
        if frozen and b > 0:
            draws = rng.random(len(frozen))
            kept = {i for i, d in zip(frozen, draws) if d >= b / 100.0}
        else:
            kept = set(frozen)
        need = round_count(a, n) - len(kept)
        if need > 0:
            unfrozen = [i for i in range(n) if i not in kept]
            unfrozen.sort(key=lambda i: (-probs[i], i))
            kept.update(unfrozen[:need])
        out[sid] = kept
    for sid, frozen in registry.items():
        out.setdefault(sid, set(frozen))
    return out


# ---------------------------------------------------------------------------
# training loop


def np_rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_np_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


class Pretrainer:
    """Owns the model, both optimizers, RNG streams, and the freeze registry.

    corpus: song_id -> [N, 8] token array. Checkpoints capture the complete
    training state, so a resumed run is bit-identical to an uninterrupted
    one.
    """

    def __init__(self, config, corpus: dict[str, np.ndarray]):
        self.config = config
        self.corpus = {sid: np.asarray(t, dtype=np.int64) for sid, t in corpus.items()}
        self.song_ids = sorted(self.corpus)
        self.model_config = config.model_config()
        self.model = build_model(self.model_config, config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.torch_gen = torch.Generator().manual_seed(config.seed + 1)
        self.opt_rec = AdamW(
            self.model.backbone_parameters(),
            lr=config.lr_pretrain,
            weight_decay=config.weight_decay,
        )
        self.opt_mask = AdamW(
            self.model.masker_parameters(config.adversarial_backbone),
            lr=config.lr_masker if config.lr_masker is not None else config.lr_pretrain,
            weight_decay=config.weight_decay,
        )
        self.weights = np.full(8, 0.125, dtype=np.float64)
        self.prev_acc: np.ndarray | None = None
        self.registry: dict[str, set[int]] = {}
        self.freeze_acc = {
            sid: np.zeros(len(t), dtype=np.float64) for sid, t in self.corpus.items()
        }
        self.cycle_epochs = 0
        self.epoch = 0
        self.metrics: list[str] = []

    # --- one epoch ---

    def run_epoch(self) -> dict:
        cfg = self.config
        length = self.model_config.input_length

        windows: list[TokenWindow] = []
        for sid in self.song_ids:
            tokens = self.corpus[sid]
            if cfg.augment:
                shift = int(self.rng.integers(-11, 12))
                tokens = transpose(tokens, shift)
            windows.extend(window_song(VOCAB, tokens, length, sid))

        order = self.rng.permutation(len(windows))
        correct = np.zeros(8, dtype=np.int64)
        chosen_total = 0
        loss_total = 0.0

        for start in range(0, len(order), cfg.batch_size):
            batch = [windows[i] for i in order[start : start + cfg.batch_size]]
            stats = self._train_batch(batch)
            correct += stats["correct"]
            chosen_total += stats["chosen"]
            loss_total += stats["loss_sum"]

        if chosen_total > 0:
            acc = correct / chosen_total
            self.weights = update_weights(acc)
            self.prev_acc = acc
            assert abs(self.weights.sum() - 1.0) < 1e-9 and (self.weights > 0).all()
        else:
            acc = np.zeros(8)

        self.cycle_epochs += 1
        self.epoch += 1

        if self.epoch % cfg.k == 0 and self.cycle_epochs > 0:
            song_means = {
                sid: self.freeze_acc[sid] / self.cycle_epochs for sid in self.song_ids
            }
            self.registry = freeze_update(self.registry, song_means, cfg.a, cfg.b, self.rng)
            for sid in self.song_ids:
                self.freeze_acc[sid][:] = 0.0
            self.cycle_epochs = 0

        total_tokens = sum(len(t) for t in self.corpus.values())
        frozen_tokens = sum(len(s) for s in self.registry.values())
        record = {
            "epoch": self.epoch,
            "accuracy": [float(x) for x in acc],
            "mean_loss": loss_total / chosen_total if chosen_total else 0.0,
            "frozen_fraction": frozen_tokens / total_tokens if total_tokens else 0.0,
        }
        self.metrics.append(json.dumps(record, sort_keys=True))
        return record

    def _train_batch(self, batch: list[TokenWindow]) -> dict:
        cfg = self.config
        tokens_np = np.stack([w.tokens for w in batch])
        mask_np = np.stack([w.attn_mask for w in batch])
        tokens_t = torch.from_numpy(tokens_np)
        mask_t = torch.from_numpy(mask_np)

        with torch.no_grad():
            hidden = self.model(tokens_t, mask_t, training=False)
            probs = self.model.masker_probs(hidden).numpy()

        plans: list[MaskPlan] = []
        masked_rows = []
        for i, w in enumerate(batch):
            real = w.real_len
            frozen_local = {
                g - w.origin_index
                for g in self.registry.get(w.song_id, ())
                if w.origin_index <= g < w.origin_index + real
            }
            self.freeze_acc[w.song_id][w.origin_index : w.origin_index + real] += probs[i, :real]
            plan = plan_masks(probs[i], w.attn_mask, frozen_local, cfg.p, self.rng)
            assert not (set(plan.chosen.tolist()) & frozen_local), "frozen position chosen"
            plans.append(plan)
            masked_rows.append(apply_plan(w.tokens, plan, self.rng))

        win_idx, positions, originals = [], [], []
        for i, plan in enumerate(plans):
            if plan.is_empty:
                continue
            win_idx.extend([i] * plan.chosen.size)
            positions.extend(plan.chosen.tolist())
            originals.append(plan.originals)
        if not positions:
            return {"correct": np.zeros(8, dtype=np.int64), "chosen": 0, "loss_sum": 0.0}

        win_idx_t = torch.tensor(win_idx, dtype=torch.long)
        pos_t = torch.tensor(positions, dtype=torch.long)
        originals_t = torch.from_numpy(np.concatenate(originals))

        masked_t = torch.from_numpy(np.stack(masked_rows))
        hidden = self.model(masked_t, mask_t, training=True, gen=self.torch_gen)
        logits = self.model.recover_logits(hidden)
        logit_rows = [l[win_idx_t, pos_t] for l in logits]
        w_t = torch.from_numpy(self.weights).to(logit_rows[0].dtype)
        loss, per_token, correct = recovery_loss(logit_rows, originals_t, w_t)
        self.model.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_rec.step()
        self.model.zero_grad(set_to_none=True)

        losses_np = per_token.detach().numpy()
        top, bottom = masker_targets(losses_np, cfg.q)
        if top.size or bottom.size:
            # the masker scores clean sequences at planning time, so its
            # gradient pass must see the clean input as well
            if cfg.adversarial_backbone:
                hidden2 = self.model(tokens_t, mask_t, training=False)
            else:
                with torch.no_grad():
                    hidden2 = self.model(tokens_t, mask_t, training=False)
            probs2 = self.model.masker_probs(hidden2)
            chosen_probs = probs2[win_idx_t, pos_t]
            m_loss = masker_loss(chosen_probs, top, bottom)
            m_loss.backward()
            self.opt_mask.step()
            self.model.zero_grad(set_to_none=True)

        return {
            "correct": correct,
            "chosen": len(positions),
            "loss_sum": float(losses_np.sum()),
        }

    # --- persistence ---

    def save(self, path: str, metrics_path: str | None = None) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, tensor in self.model.state_dict().items():
            arrays[f"model/{name}"] = tensor.detach().numpy().copy()
        rec_arrays, rec_steps = self.opt_rec.export_state()
        for name, arr in rec_arrays.items():
            arrays[f"opt_rec/{name}"] = arr
        mask_arrays, mask_steps = self.opt_mask.export_state()
        for name, arr in mask_arrays.items():
            arrays[f"opt_mask/{name}"] = arr
        for sid, acc in self.freeze_acc.items():
            arrays[f"freeze_acc/{sid}"] = acc
        arrays["torch_rng"] = self.torch_gen.get_state().numpy().copy()

        extra = {
            "kind": "pretrain",
            "epoch": self.epoch,
            "cycle_epochs": self.cycle_epochs,
            "weights": [float(x) for x in self.weights],
            "prev_acc": None if self.prev_acc is None else [float(x) for x in self.prev_acc],
            "registry": {sid: sorted(s) for sid, s in self.registry.items()},
            "np_rng": np_rng_state(self.rng),
            "opt_rec_steps": rec_steps,
            "opt_mask_steps": mask_steps,
            "metrics": self.metrics,
            "song_lengths": {sid: len(t) for sid, t in self.corpus.items()},
        }
        config = {"run": self.config.to_dict(), "model": self.model_config.to_dict()}
        save_checkpoint(path, config, arrays, extra)
        if metrics_path:
            self.write_metrics(metrics_path)

    def write_metrics(self, path: str) -> None:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.metrics:
                fh.write(line + "\n")

    def load(self, path: str) -> None:
        config, arrays, extra = load_checkpoint(path)
        if extra.get("kind") != "pretrain":
            raise CheckpointError(f"{path}: not a pre-training checkpoint")
        if config["model"] != self.model_config.to_dict():
            raise CheckpointError(
                f"{path}: checkpoint model config does not match the current config"
            )
        lengths = {sid: len(t) for sid, t in self.corpus.items()}
        if extra["song_lengths"] != lengths:
            raise CheckpointError(f"{path}: checkpoint corpus does not match the given corpus")

        state = {
            name[len("model/") :]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith("model/")
        }
        self.model.load_state_dict(state)
        self.opt_rec.import_state(
            {
                name[len("opt_rec/") :]: arr
                for name, arr in arrays.items()
                if name.startswith("opt_rec/")
            },
            extra["opt_rec_steps"],
        )
        self.opt_mask.import_state(
            {
                name[len("opt_mask/") :]: arr
                for name, arr in arrays.items()
                if name.startswith("opt_mask/")
            },
            extra["opt_mask_steps"],
        )
        for sid in self.song_ids:
            self.freeze_acc[sid] = arrays[f"freeze_acc/{sid}"].copy()
        self.torch_gen.set_state(torch.from_numpy(arrays["torch_rng"].copy()))
        self.rng = restore_np_rng(extra["np_rng"])
        self.weights = np.asarray(extra["weights"], dtype=np.float64)
        self.prev_acc = (
            None if extra["prev_acc"] is None else np.asarray(extra["prev_acc"])
        )
        self.registry = {sid: set(v) for sid, v in extra["registry"].items()}
        self.cycle_epochs = int(extra["cycle_epochs"])
        self.epoch = int(extra["epoch"])
        self.metrics = list(extra["metrics"])

    def train(
        self,
        epochs: int,
        checkpoint_path: str | None = None,
        metrics_path: str | None = None,
        stop_after: int | None = None,
    ) -> None:
        """Run epochs until `epochs` total; optionally stop early (for tests)."""
        ran = 0
        while self.epoch < epochs:
            self.run_epoch()
            if checkpoint_path:
                self.save(checkpoint_path, metrics_path)
            ran += 1
            if stop_after is not None and ran >= stop_after:
                break
