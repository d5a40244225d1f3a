"""Transformer encoder over Octuple tokens with four output heads.

The encoder embeds each of the eight token attributes separately
(hidden/8 each), concatenates, projects, and adds learned absolute
position embeddings. Blocks are pre-layer-norm self-attention +
feed-forward with residuals. PAD key positions receive -inf attention
scores, so outputs at real positions are exactly invariant to PAD
content.

Heads: masker (per-position masking probability), recoverer (one logit
array per attribute), sequence classifier (mean-pooled over real
positions), token classifier (per position).

Dropout draws from an explicit torch.Generator so training runs are
reproducible and resumable from checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .tokenizer import VOCAB_SIZES

DESK_PRESET = dict(hidden=64, layers=2, heads=4, inner=256, input_length=128)
PAPER_PRESET = dict(hidden=768, layers=12, heads=12, inner=3072, input_length=1024)


@dataclass
class ModelConfig:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    inner: int = 256
    dropout: float = 0.1
    input_length: int = 128
    vocab_sizes: tuple[int, ...] = VOCAB_SIZES
    n_seq_classes: int = 8
    n_tok_classes: int = 6

    def __post_init__(self) -> None:
        if self.hidden % 8:
            raise ValueError("hidden must be divisible by 8 (eight attribute embeddings)")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if len(self.vocab_sizes) != 8:
            raise ValueError("vocab_sizes must have 8 entries")

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "inner": self.inner,
            "dropout": self.dropout,
            "input_length": self.input_length,
            "vocab_sizes": list(self.vocab_sizes),
            "n_seq_classes": self.n_seq_classes,
            "n_tok_classes": self.n_tok_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab_sizes"] = tuple(d["vocab_sizes"])
        return cls(**d)


def dropout(x: torch.Tensor, p: float, training: bool, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator."""
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype, device=x.device) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.w_q = nn.Linear(hidden, hidden)
        self.w_k = nn.Linear(hidden, hidden)
        self.w_v = nn.Linear(hidden, hidden)
        self.w_o = nn.Linear(hidden, hidden)

    def forward(
        self,
        x: torch.Tensor,
        key_mask: torch.Tensor,
        p: float,
        training: bool,
        gen: torch.Generator | None,
    ) -> torch.Tensor:
        b, length, hidden = x.shape
        shape = (b, length, self.heads, self.head_dim)
        q = self.w_q(x).view(shape).transpose(1, 2)
        k = self.w_k(x).view(shape).transpose(1, 2)
        v = self.w_v(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = dropout(attn, p, training, gen)
        out = (attn @ v).transpose(1, 2).reshape(b, length, hidden)
        return self.w_o(out)


class EncoderBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, inner: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.ff1 = nn.Linear(hidden, inner)
        self.ff2 = nn.Linear(inner, hidden)

    def forward(self, x, key_mask, p, training, gen):
        x = x + dropout(self.attn(self.ln1(x), key_mask, p, training, gen), p, training, gen)
        x = x + dropout(self.ff2(torch.nn.functional.gelu(self.ff1(self.ln2(x)))), p, training, gen)
        return x


class MusicEncoder(nn.Module):
    """Backbone encoder plus masker/recoverer/classifier heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        attr_dim = config.hidden // 8
        self.embeds = nn.ModuleList(
            nn.Embedding(size, attr_dim) for size in config.vocab_sizes
        )
        self.input_proj = nn.Linear(config.hidden, config.hidden)
        self.pos_emb = nn.Parameter(torch.zeros(config.input_length, config.hidden))
        self.blocks = nn.ModuleList(
            EncoderBlock(config.hidden, config.heads, config.inner)
            for _ in range(config.layers)
        )
        self.final_ln = nn.LayerNorm(config.hidden)
        self.masker = nn.Linear(config.hidden, 1)
        self.recoverers = nn.ModuleList(
            nn.Linear(config.hidden, size) for size in config.vocab_sizes
        )
        self.seq_head = nn.Linear(config.hidden, config.n_seq_classes)
        self.tok_head = nn.Linear(config.hidden, config.n_tok_classes)

    def init_params(self, gen: torch.Generator) -> None:
        """Re-initialize all weights from the given generator."""
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Embedding)):
                    module.weight.copy_(
                        torch.normal(0.0, 0.02, module.weight.shape, generator=gen)
                    )
                    if isinstance(module, nn.Linear) and module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            self.pos_emb.copy_(torch.normal(0.0, 0.02, self.pos_emb.shape, generator=gen))

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """[B, L, 8] attribute ids -> [B, L, hidden] pre-encoder states."""
        for j, size in enumerate(self.config.vocab_sizes):
            col = tokens[..., j]
            if int(col.max()) >= size or int(col.min()) < 0:
                raise ValueError(f"attribute {j} id out of vocabulary range")
        parts = [emb(tokens[..., j]) for j, emb in enumerate(self.embeds)]
        x = self.input_proj(torch.cat(parts, dim=-1))
        return x + self.pos_emb[: tokens.shape[1]]

    def forward(
        self,
        tokens: torch.Tensor,
        attn_mask: torch.Tensor,
        training: bool = False,
        gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        p = self.config.dropout
        x = dropout(self.embed(tokens), p, training, gen)
        for block in self.blocks:
            x = block(x, attn_mask, p, training, gen)
        return self.final_ln(x)

    def masker_probs(self, hidden: torch.Tensor) -> torch.Tensor:
        """[B, L, H] -> per-position masking probability in (0, 1)."""
        return torch.sigmoid(self.masker(hidden).squeeze(-1))

    def recover_logits(self, hidden: torch.Tensor) -> list[torch.Tensor]:
        """[B, L, H] -> list of 8 logit tensors [B, L, size_j]."""
        return [head(hidden) for head in self.recoverers]

    def seq_logits(self, hidden: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        """Mean-pool over real positions, then classify: [B, n_seq_classes]."""
        counts = attn_mask.sum(dim=1)
        if int(counts.min()) == 0:
            raise ValueError("cannot pool a window with zero real tokens")
        mask = attn_mask.to(hidden.dtype).unsqueeze(-1)
        pooled = (hidden * mask).sum(dim=1) / counts.to(hidden.dtype).unsqueeze(-1)
        return self.seq_head(pooled)

    def tok_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.tok_head(hidden)

    def backbone_parameters(self):
        """Everything except the masker head (named)."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("masker.")]

    def masker_parameters(self, include_backbone: bool = False):
        if include_backbone:
            return list(self.named_parameters())
        return [(n, p) for n, p in self.named_parameters() if n.startswith("masker.")]


def build_model(config: ModelConfig, seed: int) -> MusicEncoder:
    model = MusicEncoder(config)
    gen = torch.Generator().manual_seed(seed)
    model.init_params(gen)
    return model
