"""Class-name text labels and the small text transformer that embeds them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TEXT_MODES
from .encoder import EncoderBlock
from .errors import ConfigError, InputError, VocabularyError
from .nn import Linear, Module, param, trunc_normal
from .tensor import Tensor

BOS, EOS = "<bos>", "<eos>"

TEMPLATES = {
    "word": "{expression}",
    "phrase": "a face image of {expression}",
    "active": "this is a face image of {expression}",
    "passive": "{article} {expression} expression is shown in the image",
}


@dataclass(frozen=True)
class TextLabelSet:
    mode: str
    texts: tuple[str, ...]

    @property
    def M(self) -> int:
        return len(self.texts)

    @property
    def enabled(self) -> bool:
        return self.mode != "none"


@dataclass
class TextFeatureSet:
    T: Tensor  # (M, D), unit-norm rows


def article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def render(template_mode: str, name: str) -> str:
    return TEMPLATES[template_mode].format(expression=name, article=article(name))


def build_labels(class_names, mode: str) -> TextLabelSet:
    names = list(class_names)
    if not names:
        raise ConfigError("class name list is empty")
    if mode not in TEXT_MODES:
        raise ConfigError(f"unknown text mode {mode!r}; expected one of {TEXT_MODES}")
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"duplicate class names: {dup}")
    if mode == "none":
        return TextLabelSet(mode, ())
    return TextLabelSet(mode, tuple(render(mode, n) for n in names))


class Vocabulary:
    """Closed word vocabulary: markers first, then words in sorted order."""

    def __init__(self, words):
        self.words = [BOS, EOS] + sorted(set(words) - {BOS, EOS})
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def for_classes(cls, class_names) -> "Vocabulary":
        words = set()
        for mode in TEMPLATES:
            for name in class_names:
                words.update(render(mode, name).lower().split())
        return cls(words)

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, s: str) -> list[int]:
        ids = [self.index[BOS]]
        for w in s.lower().split():
            if w not in self.index:
                raise VocabularyError(f"word {w!r} is not in the vocabulary")
            ids.append(self.index[w])
        ids.append(self.index[EOS])
        return ids


class TextEncoder(Module):
    """Token + position embeddings, transformer blocks, end-marker readout, linear map, L2 norm."""

    def __init__(self, vocab: Vocabulary, out_dim: int, rng: np.random.Generator, dim: int = 64,
                 depth: int = 2, heads: int = 2, mlp_ratio: int = 4, max_len: int = 16):
        self._vocab = vocab
        self._max_len = max_len
        self.tok = param(trunc_normal(rng, (len(vocab), dim)))
        self.pos = param(trunc_normal(rng, (max_len, dim)))
        self.blocks = [EncoderBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.proj = Linear(dim, out_dim, rng)

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def encode_ids(self, ids: np.ndarray) -> Tensor:
        """(B, L) id matrix of equal-length sequences -> (B, out_dim) features."""
        L = ids.shape[1]
        if L > self._max_len:
            raise InputError(f"text sequence of {L} tokens exceeds the maximum length {self._max_len}")
        x = T.embedding(self.tok, ids) + self.pos[:L]
        for b in self.blocks:
            x = b(x)
        return T.l2_normalize(self.proj(x[:, L - 1, :]))

    def forward(self, labels: TextLabelSet | list[str]) -> TextFeatureSet:
        texts = labels.texts if isinstance(labels, TextLabelSet) else tuple(labels)
        if not texts:
            raise InputError("no text labels to encode")
        seqs = [self._vocab.tokenize(s) for s in texts]
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            groups.setdefault(len(s), []).append(i)
        if len(groups) == 1:
            return TextFeatureSet(self.encode_ids(np.array(seqs)))
        parts, order = [], []
        for length in sorted(groups):
            rows = groups[length]
            parts.append(self.encode_ids(np.array([seqs[i] for i in rows])))
            order.extend(rows)
        stacked = T.concat(parts, axis=0)
        return TextFeatureSet(stacked[np.argsort(order)])


def encode_texts(labels: TextLabelSet, encoder: TextEncoder) -> TextFeatureSet:
    return encoder(labels)


def tokenize(s: str, vocab: Vocabulary) -> list[int]:
    return vocab.tokenize(s)
