"""Prompt templates, the token-table text encoder and training-time condition dropout."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

GOOD = "good"
NULL = "<null>"
TEMPLATE = ("a", "photo", "of")
# position of the defect name inside the defect and fusion prompts
DEFECT_TOKEN_INDEX = len(TEMPLATE)


class Vocabulary:
    """Ordered token table. Sentinels and template words are always present."""

    def __init__(self, labels: Sequence[str] = ()):
        tokens = [NULL, GOOD, *TEMPLATE]
        for label in labels:
            label = label.strip().lower()
            if label and label not in tokens:
                tokens.append(label)
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def labels(self) -> list[str]:
        return [t for t in self.tokens if t not in TEMPLATE and t != NULL and t != GOOD]

    def ids(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Rebuild a vocabulary with exactly this token order (e.g. from a checkpoint)."""
        vocab = cls()
        if list(tokens[: len(vocab.tokens)]) != vocab.tokens:
            raise ValueError("token list does not start with the reserved tokens")
        vocab.tokens = list(tokens)
        vocab.index = {tok: i for i, tok in enumerate(vocab.tokens)}
        return vocab

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln.strip() and not ln.startswith("#")])

    def save(self, path):
        # template words are implicit; sentinels are written so the file is self-describing
        body = [t for t in self.tokens if t not in TEMPLATE]
        Path(path).write_text("\n".join(body) + "\n")


@dataclass(frozen=True)
class PromptTriple:
    background: tuple[str, ...]
    defect: tuple[str, ...]
    fusion: tuple[str, ...]


@dataclass(frozen=True)
class ConditionPair:
    defect: str
    product: str


def build_prompts(product: str, defect: str, vocab: Vocabulary | None = None) -> PromptTriple:
    """Background / defect / fusion prompts. A NULL product collapses the background prompt to the
    bare null token."""
    if vocab is not None:
        for label in (product, defect):
            if label not in vocab:
                raise KeyError(f"unknown label {label!r}")
    if product == GOOD:
        raise ValueError("'good' is a defect sentinel, not a product")
    if defect == NULL:
        raise ValueError("'<null>' is a product sentinel, not a defect")
    background = (NULL,) if product == NULL else (*TEMPLATE, product)
    return PromptTriple(background, (*TEMPLATE, defect), (*TEMPLATE, defect, product))


def sinusoidal_positions(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: width // 2])
    return table


class TextEncoder(nn.Module):
    """Learned token table plus fixed sinusoidal positions.

    Stands in for a frozen language encoder; the table is trained with the denoiser.
    """

    max_len = 16

    def __init__(self, vocab: Vocabulary, width: int = 64):
        super().__init__()
        self.vocab = vocab
        self.width = width
        self.table = nn.Embedding(len(vocab), width)
        nn.init.normal_(self.table.weight, std=1.0)
        self.register_buffer("positions", sinusoidal_positions(self.max_len, width).float(), persistent=False)

    @property
    def null_embedding(self) -> torch.Tensor:
        return self.table.weight[self.vocab.index[NULL]]

    def forward(self, prompts: Sequence[Sequence[str]]) -> torch.Tensor:
        """Encode equal-length prompts to a (B, l, C) batch."""
        lengths = {len(p) for p in prompts}
        if len(lengths) != 1:
            raise ValueError(f"prompts in one batch must share a length, got {sorted(lengths)}")
        ids = torch.tensor([self.vocab.ids(p) for p in prompts], dtype=torch.long)
        emb = self.table(ids)
        if ids.shape[1] == 1 and bool((ids == self.vocab.index[NULL]).all()):
            return emb
        return emb + self.positions[: ids.shape[1]].to(emb.dtype)

    def encode(self, prompt: Sequence[str]) -> torch.Tensor:
        return self.forward([prompt])[0]

    def pooled(self, prompts: Sequence[Sequence[str]]) -> torch.Tensor:
        """Mean-pooled (B, C) embeddings; prompt lengths may differ."""
        return torch.stack([self.encode(p).mean(dim=0) for p in prompts])


@dataclass
class ConditionTriple:
    """Encoded conditions for a batch: pooled background, token sequences for defect and fusion."""
    background: torch.Tensor  # (B, C)
    defect: torch.Tensor  # (B, l, C)
    fusion: torch.Tensor  # (B, l', C)


def encode_conditions(encoder: TextEncoder, defects: Sequence[str], products: Sequence[str]) -> ConditionTriple:
    triples = [build_prompts(p, d, encoder.vocab) for d, p in zip(defects, products)]
    return ConditionTriple(
        background=encoder.pooled([t.background for t in triples]),
        defect=encoder([t.defect for t in triples]),
        fusion=encoder([t.fusion for t in triples]),
    )


def double_free_dropout(sample_defect: str, sample_product: str, p1: float, p2: float,
                        rng: np.random.Generator) -> ConditionPair:
    """Drop the product condition with prob ``p1`` and, for defect samples, swap the defect for
    GOOD with prob ``p2``. Two uniforms are consumed on every call."""
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
        raise ValueError(f"probabilities must lie in [0, 1], got p1={p1}, p2={p2}")
    u_product, u_defect = rng.random(2)
    product = NULL if u_product < p1 else sample_product
    defect = sample_defect
    if sample_defect != GOOD and u_defect < p2:
        defect = GOOD
    return ConditionPair(defect, product)
