"""Shared token vocabulary plus triple flattening.

Flattened-triple tokens are force-inserted into the same vocabulary as the
dialogue text, so graph nodes and text share one embedding space. Tokens
are whole words (whitespace split); relation names split at CamelCase
boundaries, e.g. RelatedTo -> "related to".
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .kb import KnowledgeBase, Triple

PAD, UNK, BOS, EOS, CTX = 0, 1, 2, 3, 4
SPECIAL_PIECES = ("<pad>", "<unk>", "<bos>", "<eos>", "<ctx>")
SPECIAL_IDS = frozenset(range(len(SPECIAL_PIECES)))

_CAMEL_RE = re.compile(r"(?<!^)(?=[A-Z])")


class EmptyCorpus(ValueError):
    pass


class BadId(ValueError):
    def __init__(self, token_id: int, size: int):
        super().__init__(f"token id {token_id} outside vocabulary of size {size}")
        self.token_id = token_id


@dataclass
class TokenSeq:
    ids: list[int]

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self):
        return len(self.ids)


class Vocabulary:
    def __init__(self, pieces: list[str]):
        if tuple(pieces[: len(SPECIAL_PIECES)]) != SPECIAL_PIECES:
            raise ValueError("vocabulary must start with the special pieces")
        self.id_to_piece: list[str] = list(pieces)
        self.piece_to_id: dict[str, int] = {p: i for i, p in enumerate(pieces)}
        if len(self.piece_to_id) != len(self.id_to_piece):
            raise ValueError("duplicate pieces in vocabulary")

    def __len__(self):
        return len(self.id_to_piece)

    def __contains__(self, piece: str) -> bool:
        return piece in self.piece_to_id

    def id(self, piece: str) -> int:
        return self.piece_to_id.get(piece, UNK)

    def piece(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_piece):
            raise BadId(token_id, len(self.id_to_piece))
        return self.id_to_piece[token_id]

    def content_hash(self) -> str:
        blob = "\n".join(self.id_to_piece).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_piece) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pieces = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(pieces)


def camel_split(name: str) -> list[str]:
    """Break a CamelCase relation name at uppercase boundaries, lowercased."""
    return [p.lower() for p in _CAMEL_RE.split(name) if p]


def flatten_triple(t: Triple) -> list[str]:
    """(coffee, RelatedTo, milk) -> ["coffee", "related", "to", "milk"]."""
    return [t.head.lower()] + camel_split(t.relation) + [t.tail.lower()]


def build_vocabulary(corpus: Iterable[str], kb: KnowledgeBase | None = None,
                     min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from a corpus token stream plus a KB.

    Corpus tokens with frequency >= min_freq enter in first-seen order;
    every token of every flattened KB triple is then inserted regardless of
    frequency (appended after the corpus tokens, first-seen order). Pieces
    that collide on spelling share one id.
    """
    freq: Counter[str] = Counter()
    order: list[str] = []
    for tok in corpus:
        if tok not in freq:
            order.append(tok)
        freq[tok] += 1
    if not freq:
        raise EmptyCorpus("corpus token stream is empty")
    pieces = list(SPECIAL_PIECES)
    seen = set(pieces)
    for tok in order:
        if freq[tok] >= min_freq and tok not in seen:
            pieces.append(tok)
            seen.add(tok)
    if kb is not None:
        for triple in kb.triples:
            for tok in flatten_triple(triple):
                if tok not in seen:
                    pieces.append(tok)
                    seen.add(tok)
    return Vocabulary(pieces)


def encode_text(text: str, v: Vocabulary, add_bos_eos: bool = False) -> TokenSeq:
    """Whitespace-split, lowercase, map OOV to UNK; optionally wrap BOS/EOS."""
    ids = [v.id(tok) for tok in text.lower().split()]
    if add_bos_eos:
        ids = [BOS] + ids + [EOS]
    return TokenSeq(ids=ids)


def encode_tokens(tokens: list[str], v: Vocabulary) -> TokenSeq:
    return TokenSeq(ids=[v.id(tok) for tok in tokens])


def decode_ids(seq: TokenSeq, v: Vocabulary) -> str:
    """Join pieces with single spaces, dropping all special tokens."""
    pieces = []
    for i in seq.ids:
        if not 0 <= i < len(v):
            raise BadId(i, len(v))
        if i in SPECIAL_IDS:
            continue
        pieces.append(v.id_to_piece[i])
    return " ".join(pieces)
