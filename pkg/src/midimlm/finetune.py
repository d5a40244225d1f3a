"""Downstream task fine-tuning with input masking.

Four tasks are built in: composer (sequence, 8 classes), emotion
(sequence, 4 classes), melody role (token, 3 classes), velocity class
(token, 6 classes). Songs are split 80/10/10 into train/validation/test
(stratified by label for sequence tasks). During training, round(p% of
real tokens) per window are replaced entirely with MASK, matching the
input distribution the encoder saw in pre-training; evaluation applies no
such masking. Training stops when validation accuracy fails to improve
for `patience` consecutive epochs or at `max_epochs`; the reported test
accuracy comes from the best-validation snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import MusicEncoder, build_model
from .optim import AdamW
from .pretrain import np_rng_state, restore_np_rng
from .tokenizer import (
    FIRST_REAL_ID,
    MASK_ID,
    VELOCITY,
    VOCAB,
    TokenWindow,
    round_count,
    transpose,
    window_song,
)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    level: str  # "sequence" | "token"
    n_classes: int
    augment: bool


TASKS = {
    "composer": TaskSpec("composer", "sequence", 8, augment=True),
    "emotion": TaskSpec("emotion", "sequence", 4, augment=False),
    "melody": TaskSpec("melody", "token", 3, augment=True),
    "velocity": TaskSpec("velocity", "token", 6, augment=False),
}

N_VELOCITY_CLASSES = 6


def mask_inputs(window: TokenWindow, p: float, rng: np.random.Generator) -> TokenWindow:
    """Replace round(p% of real tokens) with full-MASK tokens (training only)."""
    real = window.real_len
    n = round_count(p, real)
    tokens = np.array(window.tokens, copy=True)
    if n > 0:
        picks = rng.choice(real, size=n, replace=False)
        tokens[np.sort(picks)] = MASK_ID
    return TokenWindow(tokens, window.attn_mask, window.song_id, window.origin_index)


def velocity_class_of_id(velocity_id: int) -> int:
    """Map a velocity attribute id to one of 6 proportional classes over 1-127."""
    v = VOCAB.velocity_value(velocity_id)
    return (v - 1) * N_VELOCITY_CLASSES // 127


def velocity_class_of_raw(velocity: int) -> int:
    return (velocity - 1) * N_VELOCITY_CLASSES // 127


def prepare_velocity_task(window: TokenWindow) -> tuple[TokenWindow, np.ndarray]:
    """Mask the velocity attribute at every real position; labels from originals."""
    labels = np.full(len(window.tokens), -1, dtype=np.int64)
    tokens = np.array(window.tokens, copy=True)
    for i in range(window.real_len):
        vid = int(tokens[i, VELOCITY])
        if vid >= FIRST_REAL_ID:
            labels[i] = velocity_class_of_id(vid)
        tokens[i, VELOCITY] = MASK_ID
    return TokenWindow(tokens, window.attn_mask, window.song_id, window.origin_index), labels


class EarlyStop:
    """Halts after `patience` epochs without validation improvement, or at cap."""

    def __init__(self, patience: int = 30, max_epochs: int = 500):
        self.patience = patience
        self.max_epochs = max_epochs
        self.best = float("-inf")
        self.since_improvement = 0
        self.epoch = 0
        self.best_epoch = 0

    def update(self, accuracy: float) -> bool:
        """Record one epoch's validation accuracy; returns True on improvement."""
        self.epoch += 1
        if accuracy > self.best:
            self.best = accuracy
            self.best_epoch = self.epoch
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        return False

    @property
    def done(self) -> bool:
        return self.since_improvement >= self.patience or self.epoch >= self.max_epochs

    def state(self) -> dict:
        return {
            "best": self.best,
            "since_improvement": self.since_improvement,
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
        }

    def restore(self, state: dict) -> None:
        self.best = state["best"]
        self.since_improvement = state["since_improvement"]
        self.epoch = state["epoch"]
        self.best_epoch = state["best_epoch"]


def split_songs(
    song_ids: list[str],
    labels: dict[str, int] | None,
    rng: np.random.Generator,
    stratified: bool,
) -> tuple[list[str], list[str], list[str]]:
    """Seeded 80/10/10 split; stratified per label class when requested."""
    groups: list[list[str]]
    ids = sorted(song_ids)
    if stratified and labels is not None:
        by_label: dict[int, list[str]] = {}
        for sid in ids:
            by_label.setdefault(labels[sid], []).append(sid)
        groups = [by_label[k] for k in sorted(by_label)]
    else:
        groups = [ids]
    train, val, test = [], [], []
    for group in groups:
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        n = len(shuffled)
        n_test = round_count(10, n)
        n_val = round_count(10, n)
        if n >= 3:
            n_test = max(1, n_test)
            n_val = max(1, n_val)
        test.extend(shuffled[:n_test])
        val.extend(shuffled[n_test : n_test + n_val])
        train.extend(shuffled[n_test + n_val :])
    return sorted(train), sorted(val), sorted(test)


def _assert_no_full_mask(tokens: np.ndarray, attn_mask: np.ndarray) -> None:
    real = tokens[attn_mask]
    assert not (real == MASK_ID).all(axis=1).any(), "evaluation input contains MASK tokens"


def evaluate_model(
    model: MusicEncoder,
    task: TaskSpec,
    corpus: dict[str, np.ndarray],
    labels: dict,
    sids: list[str],
    length: int,
) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix over the given songs (no input masking)."""
    k = task.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    with torch.no_grad():
        for sid in sorted(sids):
            windows = window_song(VOCAB, corpus[sid], length, sid)
            if task.name == "velocity":
                prepared = [prepare_velocity_task(w) for w in windows]
                windows = [w for w, _ in prepared]
                win_labels = [l for _, l in prepared]
            for w in windows:
                _assert_no_full_mask(w.tokens, w.attn_mask)
            toks = torch.from_numpy(np.stack([w.tokens for w in windows]))
            mask = torch.from_numpy(np.stack([w.attn_mask for w in windows]))
            hidden = model(toks, mask, training=False)
            if task.level == "sequence":
                logits = model.seq_logits(hidden, mask)
                pred = int(logits.mean(dim=0).argmax())
                confusion[labels[sid], pred] += 1
            else:
                logits = model.tok_logits(hidden).numpy()
                for i, w in enumerate(windows):
                    if task.name == "velocity":
                        lab = win_labels[i]
                    else:
                        lab = np.full(len(w.tokens), -1, dtype=np.int64)
                        song_labels = labels[sid]
                        real = w.real_len
                        lab[:real] = song_labels[w.origin_index : w.origin_index + real]
                    valid = lab >= 0
                    preds = logits[i].argmax(axis=1)
                    for t, pr in zip(lab[valid], preds[valid]):
                        confusion[t, pr] += 1
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion)) / total if total else 0.0
    return accuracy, confusion


class Finetuner:
    """Training coordinator for one downstream task."""

    def __init__(
        self,
        config,
        task: TaskSpec,
        corpus: dict[str, np.ndarray],
        labels: dict,
        pretrained: str | None = None,
    ):
        self.config = config
        self.task = task
        self.corpus = {sid: np.asarray(t, dtype=np.int64) for sid, t in corpus.items()}
        self.labels = labels
        self.model_config = config.model_config(
            n_seq_classes=task.n_classes if task.level == "sequence" else 1,
            n_tok_classes=task.n_classes if task.level == "token" else 1,
        )
        self.model = build_model(self.model_config, config.seed)
        if pretrained is not None:
            self._load_pretrained_backbone(pretrained)
        self.rng = np.random.default_rng(config.seed)
        self.torch_gen = torch.Generator().manual_seed(config.seed + 1)

        seq_labels = labels if task.level == "sequence" else None
        self.train_ids, self.val_ids, self.test_ids = split_songs(
            list(self.corpus), seq_labels, self.rng, stratified=task.level == "sequence"
        )
        if not self.train_ids or not self.val_ids or not self.test_ids:
            raise ValueError("corpus too small to produce non-empty train/val/test splits")

        if config.freeze_backbone:
            head = "seq_head." if task.level == "sequence" else "tok_head."
            named = [(n, p) for n, p in self.model.named_parameters() if n.startswith(head)]
        else:
            named = list(self.model.named_parameters())
        self.opt = AdamW(named, lr=config.lr_finetune, weight_decay=config.weight_decay)

        self.stopper = EarlyStop(config.patience, config.max_epochs)
        self.best_state: dict[str, torch.Tensor] | None = None
        self.val_history: list[float] = []

    def _load_pretrained_backbone(self, path: str) -> None:
        ckpt_config, arrays, extra = load_checkpoint(path)
        if ckpt_config["model"]["hidden"] != self.model_config.hidden or ckpt_config[
            "model"
        ]["layers"] != self.model_config.layers or ckpt_config["model"][
            "input_length"
        ] != self.model_config.input_length:
            raise CheckpointError(f"{path}: checkpoint model dimensions do not match the config")
        if tuple(ckpt_config["model"]["vocab_sizes"]) != self.model_config.vocab_sizes:
            raise CheckpointError(f"{path}: checkpoint vocabulary does not match")
        own = self.model.state_dict()
        loaded = {}
        for name, arr in arrays.items():
            if not name.startswith("model/"):
                continue
            key = name[len("model/") :]
            if key in own and tuple(own[key].shape) == tuple(arr.shape):
                loaded[key] = torch.from_numpy(arr.copy())
        own.update(loaded)
        self.model.load_state_dict(own)

    # --- data plumbing ---

    def _train_windows(self) -> list[tuple[TokenWindow, np.ndarray | int]]:
        """Fresh windows for one epoch: augmentation, then per-task labels."""
        cfg = self.config
        length = self.model_config.input_length
        out = []
        for sid in self.train_ids:
            tokens = self.corpus[sid]
            if self.task.augment and cfg.augment:
                shift = int(self.rng.integers(-11, 12))
                tokens = transpose(tokens, shift)
            for w in window_song(VOCAB, tokens, length, sid):
                out.append(self._attach_label(w))
        return out

    def _attach_label(self, w: TokenWindow):
        if self.task.level == "sequence":
            return (w, self.labels[w.song_id])
        if self.task.name == "velocity":
            return prepare_velocity_task(w)
        lab = np.full(len(w.tokens), -1, dtype=np.int64)
        real = w.real_len
        song_labels = self.labels[w.song_id]
        lab[:real] = song_labels[w.origin_index : w.origin_index + real]
        return (w, lab)

    # --- training ---

    def train_epoch(self) -> None:
        cfg = self.config
        items = self._train_windows()
        order = self.rng.permutation(len(items))
        for start in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            windows = [mask_inputs(w, cfg.mask_p, self.rng) for w, _ in batch]
            toks = torch.from_numpy(np.stack([w.tokens for w in windows]))
            mask = torch.from_numpy(np.stack([w.attn_mask for w in windows]))
            hidden = self.model(toks, mask, training=True, gen=self.torch_gen)
            if self.task.level == "sequence":
                logits = self.model.seq_logits(hidden, mask)
                target = torch.tensor([lab for _, lab in batch], dtype=torch.long)
                loss = F.cross_entropy(logits, target)
            else:
                logits = self.model.tok_logits(hidden)
                target = torch.from_numpy(np.stack([lab for _, lab in batch]))
                loss = F.cross_entropy(
                    logits.reshape(-1, self.task.n_classes),
                    target.reshape(-1),
                    ignore_index=-1,
                )
            self.model.zero_grad(set_to_none=True)
            loss.backward()
            self.opt.step()
            self.model.zero_grad(set_to_none=True)

    def validate(self) -> float:
        acc, _ = evaluate_model(
            self.model,
            self.task,
            self.corpus,
            self.labels,
            self.val_ids,
            self.model_config.input_length,
        )
        return acc

    def run(
        self,
        checkpoint_path: str | None = None,
        max_epochs: int | None = None,
        stop_after: int | None = None,
    ) -> dict:
        """Train with early stopping; returns the report dict."""
        limit = max_epochs if max_epochs is not None else self.stopper.max_epochs
        ran = 0
        while not self.stopper.done and self.stopper.epoch < limit:
            self.train_epoch()
            val_acc = self.validate()
            improved = self.stopper.update(val_acc)
            self.val_history.append(val_acc)
            if improved:
                self.best_state = {
                    k: v.detach().clone() for k, v in self.model.state_dict().items()
                }
            if checkpoint_path:
                self.save(checkpoint_path)
            ran += 1
            if stop_after is not None and ran >= stop_after:
                return {}
        return self.report(checkpoint_path)

    def report(self, checkpoint_path: str | None = None) -> dict:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        test_acc, confusion = evaluate_model(
            self.model,
            self.task,
            self.corpus,
            self.labels,
            self.test_ids,
            self.model_config.input_length,
        )
        report = {
            "task": self.task.name,
            "level": self.task.level,
            "n_classes": self.task.n_classes,
            "best_val_accuracy": self.stopper.best,
            "best_epoch": self.stopper.best_epoch,
            "epochs_trained": self.stopper.epoch,
            "test_accuracy": test_acc,
            "confusion": confusion.tolist(),
        }
        if checkpoint_path:
            self.save(checkpoint_path, final=True)
        return report

    # --- persistence ---

    def save(self, path: str, final: bool = False) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, tensor in self.model.state_dict().items():
            arrays[f"model/{name}"] = tensor.detach().numpy().copy()
        if self.best_state is not None:
            for name, tensor in self.best_state.items():
                arrays[f"best/{name}"] = tensor.detach().numpy().copy()
        opt_arrays, opt_steps = self.opt.export_state()
        for name, arr in opt_arrays.items():
            arrays[f"opt/{name}"] = arr
        arrays["torch_rng"] = self.torch_gen.get_state().numpy().copy()
        extra = {
            "kind": "finetune",
            "task": {
                "name": self.task.name,
                "level": self.task.level,
                "n_classes": self.task.n_classes,
            },
            "early_stop": self.stopper.state(),
            "val_history": self.val_history,
            "np_rng": np_rng_state(self.rng),
            "opt_steps": opt_steps,
            "splits": {
                "train": self.train_ids,
                "val": self.val_ids,
                "test": self.test_ids,
            },
            "final": final,
        }
        config = {"run": self.config.to_dict(), "model": self.model_config.to_dict()}
        save_checkpoint(path, config, arrays, extra)

    def load(self, path: str) -> None:
        config, arrays, extra = load_checkpoint(path)
        if extra.get("kind") != "finetune":
            raise CheckpointError(f"{path}: not a fine-tuning checkpoint")
        saved_task = extra["task"]
        if saved_task["name"] != self.task.name or saved_task["n_classes"] != self.task.n_classes:
            raise CheckpointError(
                f"{path}: checkpoint task {saved_task['name']} does not match {self.task.name}"
            )
        if config["model"] != self.model_config.to_dict():
            raise CheckpointError(f"{path}: checkpoint model config does not match")
        state = {
            name[len("model/") :]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith("model/")
        }
        self.model.load_state_dict(state)
        best = {
            name[len("best/") :]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith("best/")
        }
        self.best_state = best or None
        self.opt.import_state(
            {
                name[len("opt/") :]: arr
                for name, arr in arrays.items()
                if name.startswith("opt/")
            },
            extra["opt_steps"],
        )
        self.torch_gen.set_state(torch.from_numpy(arrays["torch_rng"].copy()))
        self.rng = restore_np_rng(extra["np_rng"])
        self.stopper.restore(extra["early_stop"])
        self.val_history = list(extra["val_history"])
        self.train_ids = extra["splits"]["train"]
        self.val_ids = extra["splits"]["val"]
        self.test_ids = extra["splits"]["test"]


# ---------------------------------------------------------------------------
# label file format


def write_seq_labels(path: str, labels: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(labels):
            fh.write(f"{sid} {labels[sid]}\n")


def write_tok_labels(path: str, labels: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(labels):
            fh.write(f"{sid} {','.join(str(int(x)) for x in labels[sid])}\n")


def read_labels(path: str, level: str) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sid, value = line.split(" ", 1)
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: bad label record") from exc
            if level == "sequence":
                out[sid] = int(value)
            else:
                out[sid] = np.array([int(x) for x in value.split(",")], dtype=np.int64)
    return out
