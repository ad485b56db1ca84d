"""Tokenizer and toy trainable condition encoders.

Two small single-block transformer encoders stand in for the paper-scale
text encoders; the ensemble concatenates their outputs along the sequence
axis. The NULL condition is all-zero rows, which makes the unconditional
branch of guidance an exact object rather than a learned one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import VOCABULARY

__all__ = [
    "TokenSeq",
    "ConditionEmbedding",
    "TextEncoder",
    "tokenize",
    "ensemble_encode",
    "dropout_condition",
    "null_embedding",
    "write_vocabulary",
    "load_vocabulary",
    "PAD_ID",
    "UNK_ID",
    "L_MAX",
]

L_MAX = 16
PAD_ID = 0
UNK_ID = 1
_VOCAB_INDEX = {word: i for i, word in enumerate(VOCABULARY)}


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple

    def __post_init__(self):
        if len(self.ids) != L_MAX:
            raise ValueError(f"token sequence must have length {L_MAX}")
        if any(not (0 <= i < len(VOCABULARY)) for i in self.ids):
            raise ValueError("token id out of vocabulary")

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.ids, dtype=torch.long)


@dataclass
class ConditionEmbedding:
    """M x d_tau token embedding sequence fed to cross-attention."""

    vectors: torch.Tensor
    is_null: bool = False

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("condition embedding must be (M, d_tau)")
        if not torch.isfinite(self.vectors).all():
            raise ValueError("condition embedding must be finite")

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def tokenize(caption: str) -> TokenSeq:
    """Lowercase, whitespace split, map to ids, pad/truncate to L_MAX."""
    words = caption.lower().split()[:L_MAX]
    ids = [_VOCAB_INDEX.get(w, UNK_ID) for w in words]
    ids += [PAD_ID] * (L_MAX - len(ids))
    return TokenSeq(tuple(ids))


def write_vocabulary(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(VOCABULARY) + "\n", encoding="utf-8")


def load_vocabulary(path):
    return tuple(Path(path).read_text(encoding="utf-8").splitlines())


class TextEncoder(nn.Module):
    """Embedding + positions + one self-attention/feed-forward block."""

    def __init__(self, d_tau: int = 64, seed: int = 0):
        super().__init__()
        self.d_tau = d_tau
        gen = torch.Generator().manual_seed(seed)
        self.token_table = nn.Parameter(torch.randn(len(VOCABULARY), d_tau, generator=gen) * 0.1)
        self.pos_table = nn.Parameter(torch.randn(L_MAX, d_tau, generator=gen) * 0.1)
        self.wq = nn.Parameter(torch.randn(d_tau, d_tau, generator=gen) / np.sqrt(d_tau))
        self.wk = nn.Parameter(torch.randn(d_tau, d_tau, generator=gen) / np.sqrt(d_tau))
        self.wv = nn.Parameter(torch.randn(d_tau, d_tau, generator=gen) / np.sqrt(d_tau))
        self.wo = nn.Parameter(torch.randn(d_tau, d_tau, generator=gen) / np.sqrt(d_tau))
        self.ff1 = nn.Linear(d_tau, 2 * d_tau)
        self.ff2 = nn.Linear(2 * d_tau, d_tau)

    def forward(self, tokens: TokenSeq | torch.Tensor) -> ConditionEmbedding:
        ids = tokens.tensor() if isinstance(tokens, TokenSeq) else tokens
        x = self.token_table[ids] + self.pos_table
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        scores = torch.softmax(q @ k.T / np.sqrt(self.d_tau), dim=-1)
        x = x + (scores @ v) @ self.wo
        x = x + self.ff2(torch.nn.functional.silu(self.ff1(x)))
        return ConditionEmbedding(x, is_null=False)


def null_embedding(m: int, d_tau: int, dtype=torch.float32) -> ConditionEmbedding:
    """The exact unconditional-branch object: all-zero rows."""
    return ConditionEmbedding(torch.zeros(m, d_tau, dtype=dtype), is_null=True)


def ensemble_encode(tokens: TokenSeq, encoder_a: TextEncoder,
                    encoder_b: TextEncoder) -> ConditionEmbedding:
    """Concatenate both encoders' outputs along the sequence axis (M = 2*L_MAX)."""
    a = encoder_a(tokens)
    b = encoder_b(tokens)
    if a.width != b.width:
        raise ValueError(f"encoder width mismatch: {a.width} vs {b.width}")
    return ConditionEmbedding(torch.cat([a.vectors, b.vectors], dim=0), is_null=False)


def dropout_condition(emb: ConditionEmbedding, p: float, rng: np.random.Generator,
                      per_part: bool = True, n_parts: int = 2) -> ConditionEmbedding:
    """Replace ensemble parts with zero rows, each independently with prob p.

    When every part is dropped the result is the NULL embedding
    (unconditional training sample).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if emb.is_null:
        return emb
    m = emb.vectors.shape[0]
    if not per_part:
        n_parts = 1
    if m % n_parts != 0:
        raise ValueError(f"sequence length {m} not divisible into {n_parts} parts")
    part = m // n_parts
    drops = [rng.random() < p for _ in range(n_parts)]
    if not any(drops):
        return emb
    if all(drops):
        return null_embedding(m, emb.width, dtype=emb.vectors.dtype)
    vectors = emb.vectors.clone()
    for i, drop in enumerate(drops):
        if drop:
            vectors[i * part:(i + 1) * part] = 0.0
    return ConditionEmbedding(vectors, is_null=False)
