"""Frozen toy text and image encoders, tokenization and vocabulary embedding.

The encoders stand in for a pretrained text-image discriminative model. Their
weights come from a named seed and are never trained; every parameter has
``requires_grad=False``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

PAD_ID = 0

_PUNCT = re.compile(r"[^\w\s]+", flags=re.UNICODE)


def _read_lines(text: str) -> list[str]:
    lines = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return lines


def _resource_text(name: str) -> str:
    return resources.files("ovpanoptic").joinpath(f"resources/{name}").read_text(encoding="utf-8")


def load_lexicon(path: str | Path | None = None) -> tuple[str, ...]:
    """Read a noun lexicon: UTF-8, one noun per line, ``#`` comments."""
    text = Path(path).read_text(encoding="utf-8") if path else _resource_text("lexicon.txt")
    words = []
    for line in _read_lines(text):
        word = normalize_text(line)
        if word and word not in words:
            words.append(word)
    return tuple(words)


def load_synonyms(path: str | Path | None = None) -> tuple[tuple[str, ...], ...]:
    """Read synonym groups: one group per line, comma-separated names."""
    text = Path(path).read_text(encoding="utf-8") if path else _resource_text("synonyms.txt")
    groups = []
    for line in _read_lines(text):
        names = tuple(normalize_text(n) for n in line.split(",") if normalize_text(n))
        if len(names) >= 2:
            groups.append(names)
    return tuple(groups)


def load_templates(path: str | Path | None = None) -> tuple[str, ...]:
    """Read prompt templates; each line must hold exactly one ``{}``."""
    text = Path(path).read_text(encoding="utf-8") if path else _resource_text("templates.txt")
    templates = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.count("{}") != 1:
            raise ValueError(f"template must contain exactly one '{{}}': {stripped!r}")
        templates.append(stripped)
    if not templates:
        raise ValueError("template file holds no templates")
    return tuple(templates)


def load_stopwords() -> frozenset[str]:
    return frozenset(normalize_text(w) for w in _read_lines(_resource_text("stopwords.txt")))


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def num_content(self) -> int:
        return sum(1 for t in self.tokens if t != PAD_ID)


class Tokenizer:
    """Word-level tokenizer with synonym canonicalization.

    Lexicon words get stable ids ``1..len(lexicon)``; any other word is hashed
    (CRC32, stable across processes) into the remaining id range. Synonyms are
    rewritten to their group's first member before lookup, which is what makes
    synonym names share embeddings.
    """

    def __init__(self, context_length: int = 16, vocab_size: int = 4096,
                 lexicon: Sequence[str] | None = None,
                 synonyms: Sequence[Sequence[str]] | None = None):
        self.context_length = context_length
        self.vocab_size = vocab_size
        self.lexicon = tuple(lexicon) if lexicon is not None else load_lexicon()
        if len(self.lexicon) + 2 > vocab_size:
            raise ValueError("vocab_size too small for lexicon")
        self._ids = {w: i + 1 for i, w in enumerate(self.lexicon)}
        groups = synonyms if synonyms is not None else load_synonyms()
        self._canonical: dict[tuple[str, ...], tuple[str, ...]] = {}
        for group in groups:
            head = tuple(group[0].split())
            for name in group:
                self._canonical[tuple(name.split())] = head
        self._max_phrase = max((len(k) for k in self._canonical), default=1)

    def canonical_words(self, text: str) -> list[str]:
        words = normalize_text(text).split()
        out: list[str] = []
        i = 0
        while i < len(words):
            for n in range(min(self._max_phrase, len(words) - i), 0, -1):
                phrase = tuple(words[i:i + n])
                if phrase in self._canonical:
                    out.extend(self._canonical[phrase])
                    i += n
                    break
            else:
                out.append(words[i])
                i += 1
        return out

    def canonical_name(self, text: str) -> str:
        return " ".join(self.canonical_words(text))

    def word_id(self, word: str) -> int:
        if word in self._ids:
            return self._ids[word]
        offset = len(self.lexicon) + 1
        return offset + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - offset)

    def __call__(self, text: str) -> TokenSequence:
        ids = [self.word_id(w) for w in self.canonical_words(text)][: self.context_length]
        ids += [PAD_ID] * (self.context_length - len(ids))
        return TokenSequence(tuple(ids))


@lru_cache(maxsize=4)
def _default_tokenizer(context_length: int, vocab_size: int) -> Tokenizer:
    return Tokenizer(context_length, vocab_size)


def tokenize(text: str, context_length: int = 16, vocab_size: int = 4096) -> TokenSequence:
    return _default_tokenizer(context_length, vocab_size)(text)


def extract_nouns(caption: str, k_word: int = 8, lexicon: Iterable[str] | None = None,
                  stopwords: Iterable[str] | None = None) -> list[str]:
    """Lexicon nouns of a caption in order of first appearance, at most ``k_word``."""
    lex = set(lexicon) if lexicon is not None else set(load_lexicon())
    stop = set(stopwords) if stopwords is not None else load_stopwords()
    nouns: list[str] = []
    for word in normalize_text(caption).split():
        if word in lex and word not in stop and word not in nouns:
            nouns.append(word)
    return nouns[:k_word]


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


@dataclass
class TextEmbedding:
    sequence: Tensor  # (B, L, d)
    pooled: Tensor    # (B, d)
    padding: Tensor   # (B, L) bool, True at padding positions


class _SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: Tensor, key_padding: Tensor) -> Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / (d // self.heads) ** 0.5
        # All-padding rows attend everywhere so the empty caption stays finite.
        mask = key_padding & ~key_padding.all(dim=1, keepdim=True)
        scores = scores.masked_fill(mask[:, None, None, :], float("-inf"))
        out = (scores.softmax(-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        return x + self.mlp(self.norm2(x))


class ToyTextEncoder(nn.Module):
    """Small frozen transformer over word tokens."""

    def __init__(self, dim: int = 64, context_length: int = 16, layers: int = 2, heads: int = 4,
                 vocab_size: int = 4096, seed: int = 1001, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.tokenizer = tokenizer or Tokenizer(context_length, vocab_size)
        self.dim = dim
        self.context_length = context_length
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embedding = nn.Embedding(vocab_size, dim)
            self.blocks = nn.ModuleList(_SelfAttentionLayer(dim, heads) for _ in range(layers))
            self.final_norm = nn.LayerNorm(dim)
        with torch.no_grad():
            self.token_embedding.weight.copy_(torch.randn(vocab_size, dim, generator=gen))
        self.register_buffer("positional", 0.1 * torch.randn(context_length, dim, generator=gen))
        _freeze(self)

    def train(self, mode: bool = True) -> "ToyTextEncoder":
        return super().train(False)

    def tokenize(self, text: str) -> TokenSequence:
        return self.tokenizer(text)

    def forward(self, tokens: Sequence[TokenSequence] | TokenSequence) -> TextEmbedding:
        if isinstance(tokens, TokenSequence):
            tokens = [tokens]
        ids = torch.tensor([t.tokens for t in tokens], dtype=torch.long,
                           device=self.token_embedding.weight.device)
        padding = ids == PAD_ID
        x = self.token_embedding(ids) + self.positional[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, padding)
        x = self.final_norm(x)
        keep = (~padding).to(x.dtype)
        empty = keep.sum(1, keepdim=True) == 0
        keep = torch.where(empty, torch.ones_like(keep), keep)
        pooled = (x * keep[..., None]).sum(1) / keep.sum(1, keepdim=True)
        return TextEmbedding(sequence=x, pooled=pooled, padding=padding)

    def encode(self, texts: Sequence[str] | str) -> TextEmbedding:
        if isinstance(texts, str):
            texts = [texts]
        return self([self.tokenizer(t) for t in texts])


@dataclass
class ImageEmbedding:
    feature_map: Tensor  # (B, d, h, w)
    pooled: Tensor       # (B, d)


class ToyImageEncoder(nn.Module):
    """Frozen strided convnet; replicate padding keeps it translation-equivariant."""

    def __init__(self, dim: int = 64, width: int = 32, stride: int = 8, seed: int = 1002):
        super().__init__()
        if stride < 1 or stride & (stride - 1):
            raise ValueError("image encoder stride must be a power of two")
        self.stride = stride
        layers: list[nn.Module] = []
        channels = 3
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for _ in range(stride.bit_length() - 1):
                layers += [nn.Conv2d(channels, width, 3, stride=2, padding=1, padding_mode="replicate"), nn.GELU()]
                channels = width
            layers += [nn.Conv2d(channels, width, 3, padding=1, padding_mode="replicate"), nn.GELU(),
                       nn.Conv2d(width, dim, 1)]
            self.net = nn.Sequential(*layers)
        _freeze(self)

    def train(self, mode: bool = True) -> "ToyImageEncoder":
        return super().train(False)

    def forward(self, images: Tensor) -> ImageEmbedding:
        """``images``: (B, 3, H, W) with values in [0, 1]."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] <= 0 or images.shape[3] <= 0:
            raise ValueError("image height and width must be positive")
        fmap = self.net(images * 2 - 1)
        return ImageEmbedding(feature_map=fmap, pooled=fmap.mean(dim=(2, 3)))


@dataclass
class Vocabulary:
    names: list[str]
    isthing: list[bool]
    templates: list[str] = field(default_factory=lambda: list(load_templates()))

    def __post_init__(self) -> None:
        if len(self.names) != len(self.isthing):
            raise ValueError("names and isthing must have equal length")
        if not self.templates:
            raise ValueError("vocabulary needs at least one template")
        seen = set()
        for name in self.names:
            key = normalize_text(name)
            if not key:
                raise ValueError("empty category name")
            if key in seen:
                raise ValueError(f"duplicate category name: {name!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        key = normalize_text(name)
        for i, n in enumerate(self.names):
            if normalize_text(n) == key:
                return i
        raise KeyError(name)

    @classmethod
    def from_file(cls, path: str | Path, templates: Sequence[str] | None = None) -> "Vocabulary":
        """Parse ``thing: name`` / ``stuff: name`` lines (``#`` comments allowed)."""
        names, flags = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            kind, sep, name = line.partition(":")
            kind = kind.strip().lower()
            if not sep or kind not in ("thing", "stuff") or not name.strip():
                raise ValueError(f"{path}:{lineno}: expected 'thing: <name>' or 'stuff: <name>'")
            names.append(name.strip())
            flags.append(kind == "thing")
        if not names:
            raise ValueError(f"{path}: empty vocabulary")
        return cls(names, flags, list(templates) if templates else list(load_templates()))

    def to_text(self) -> str:
        return "".join(f"{'thing' if t else 'stuff'}: {n}\n" for n, t in zip(self.names, self.isthing))


def embed_vocabulary(vocab: Vocabulary, encoder: ToyTextEncoder) -> Tensor:
    """K x d matrix: per category, template embeddings averaged then L2-normalized."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    if len({normalize_text(n) for n in vocab.names}) != len(vocab.names):
        raise ValueError("duplicate normalized category names")
    prompts = [tpl.format(name) for name in vocab.names for tpl in vocab.templates]
    pooled = encoder.encode(prompts).pooled.view(len(vocab), len(vocab.templates), -1)
    return F.normalize(pooled.mean(1), dim=-1)


def embed_words(words: Sequence[str], encoder: ToyTextEncoder, templates: Sequence[str]) -> Tensor:
    """Embed free words (caption nouns) the same way vocabulary rows are embedded."""
    if not words:
        return torch.zeros(0, encoder.dim, dtype=encoder.token_embedding.weight.dtype)
    return embed_vocabulary(Vocabulary(list(words), [True] * len(words), list(templates)), encoder)
