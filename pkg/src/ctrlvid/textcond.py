"""Caption tokenization and learned text context for cross-attention.

The vocabulary is closed over the caption grammar; a null token fills the
whole sequence for the unconditional branches of classifier-free guidance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import torch
import torch.nn as nn

from .scenes import COLOR_NAMES, DIRECTION_NAMES, KINDS

NULL_ID = 0
PAD_ID = 1

GRAMMAR_WORDS = ("a", "and", "moving") + COLOR_NAMES + KINDS + DIRECTION_NAMES


class Vocabulary:
    """Dense word -> id table with reserved NULL (0) and PAD (1) slots."""

    def __init__(self, words: tuple[str, ...] = GRAMMAR_WORDS, max_len: int = 8):
        self.words = tuple(dict.fromkeys(words))
        self.max_len = max_len
        self.ids = {w: i + 2 for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words) + 2

    def tokenize(self, caption: str) -> list[int]:
        """Lowercase, split on whitespace, map unknowns to PAD, pad/truncate."""
        ids = [self.ids.get(w, PAD_ID) for w in caption.lower().split()]
        ids = ids[: self.max_len]
        return ids + [PAD_ID] * (self.max_len - len(ids))

    def null_tokens(self) -> list[int]:
        return [NULL_ID] * self.max_len

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self.words[i - 2] for i in ids if i >= 2)

    def to_json(self) -> str:
        return json.dumps({"words": list(self.words), "max_len": self.max_len},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        raw = json.loads(text)
        return cls(words=tuple(raw["words"]), max_len=int(raw["max_len"]))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class Context:
    """Cross-attention context: [L, C] rows, one per token position."""

    values: torch.Tensor
    is_null: bool


class TextEncoder(nn.Module):
    """Token + position embedding lookup producing Context matrices."""

    def __init__(self, vocab: Vocabulary, width: int = 64):
        super().__init__()
        self.vocab = vocab
        self.width = width
        self.tok_emb = nn.Embedding(len(vocab), width)
        self.pos_emb = nn.Parameter(torch.zeros(vocab.max_len, width))
        nn.init.normal_(self.pos_emb, std=0.02)

    def embed(self, tokens: list[int]) -> Context:
        ids = torch.as_tensor(tokens, dtype=torch.long)
        if ids.ndim != 1 or ids.numel() != self.vocab.max_len:
            raise ValueError(
                f"expected {self.vocab.max_len} token ids, got shape {tuple(ids.shape)}"
            )
        if int(ids.min()) < 0 or int(ids.max()) >= len(self.vocab):
            raise ValueError(
                f"token id out of range [0, {len(self.vocab)}): {ids.tolist()}"
            )
        values = self.tok_emb(ids) + self.pos_emb
        return Context(values=values, is_null=bool((ids == NULL_ID).all()))

    def encode(self, caption: str) -> Context:
        return self.embed(self.vocab.tokenize(caption))

    def null_context(self) -> Context:
        return self.embed(self.vocab.null_tokens())
