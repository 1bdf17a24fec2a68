"""Caption tokenization and the frozen bidirectional text encoder.

Captions are word-tokenized against a corpus-built vocabulary. The encoder
prepends a sentence-aggregator token, adds sinusoidal positions, runs a
stack of frozen transformer layers, and reads the aggregator's final
hidden state as the global text embedding. Only the token-embedding table
trains; it is the single text-side adapter.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, take_rows
from .errors import EncodingError
from .textnorm import normalize_caption, tokenize
from .transformer import EncoderBlock, init_weight, sinusoidal_positions

PAD, BOS, EOS, CLS, UNK = 0, 1, 2, 3, 4
SPECIALS = ["<pad>", "<bos>", "<eos>", "<cls>", "<unk>"]


class Vocabulary:
    """Bijective word/id map with five reserved specials at ids 0..4."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = SPECIALS + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        unk = self.token_to_id["<unk>"]
        return [self.token_to_id.get(t, unk) for t in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise EncodingError(f"token id {i} outside vocabulary of size {len(self)}")
            if i >= len(SPECIALS):
                words.append(self.id_to_token[i])
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(SPECIALS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Count word tokens and keep those seen at least ``min_count`` times.

    Ids are assigned by (count desc, token asc) so construction is
    deterministic for any corpus ordering.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for line in corpus:
        counts.update(tokenize(line))
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class CaptionSequence:
    """A caption as vocabulary ids (specials excluded) plus its source text."""

    ids: list[int]
    text: str

    @classmethod
    def from_text(cls, text: str, vocab: Vocabulary) -> "CaptionSequence":
        return cls(ids=vocab.encode(text), text=text)

    def render(self, vocab: Vocabulary) -> str:
        return vocab.decode(self.ids)

    def normalized(self) -> str:
        return normalize_caption(self.text)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TextEncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    freeze_seed: int = 11

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


class TextEncoder:
    """Trainable embedding table feeding frozen bidirectional layers."""

    def __init__(self, config: TextEncoderConfig, vocab_size: int,
                 init_rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.embed = init_weight(init_rng, (vocab_size, config.d_model),
                                 "text.embed", trainable=True)
        self.params[self.embed.name] = self.embed
        frozen_rng = np.random.default_rng(config.freeze_seed)
        self.blocks = [
            EncoderBlock(frozen_rng, config.d_model, config.n_heads,
                         f"text.frozen.layer{i}", trainable=False, params=self.params)
            for i in range(config.n_layers)
        ]

    def encode(self, ids: list[int]) -> Tensor:
        """Global text embedding: final hidden state at the aggregator slot."""
        vocab_size = self.embed.shape[0]
        for i in ids:
            if not 0 <= i < vocab_size:
                raise EncodingError(f"token id {i} outside vocabulary of size {vocab_size}")
        seq_ids = np.array([CLS] + list(ids), dtype=np.int64)
        h = take_rows(self.embed, seq_ids)
        h = h + Tensor(sinusoidal_positions(len(seq_ids), self.config.d_model))
        for block in self.blocks:
            h = block(h)
        return h[0]
