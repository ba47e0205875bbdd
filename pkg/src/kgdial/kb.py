"""Triple knowledge base: loading, entity-mention recognition, subgraph grouping.

The KB is a flat list of (head, relation, tail) facts plus a surface-form
index. Retrieval is exact lowercase whole-token matching of post tokens
against that index; the triples incident to each matched mention form one
subgraph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


class MalformedLine(ValueError):
    def __init__(self, line_no: int, reason: str = "expected 3 tab-separated fields"):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class EmptyKB(ValueError):
    pass


# small built-in stoplist; callers can always pass their own set
DEFAULT_STOPWORDS = frozenset(
    """a an the of to in on at by for and or but if is are was were be been am
    i you he she it we they this that these those as with from not no do does
    did have has had my your his her its our their me him them us what which
    who whom so than then there here when where why how all any both each
    s t ll re ve d m don isn""".split()
)


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            if not getattr(self, name):
                raise ValueError(f"triple {name} must be nonempty")
        if any(ch.isspace() for ch in self.head + self.tail):
            raise ValueError(f"concepts must be single words: ({self.head!r}, {self.tail!r})")


@dataclass
class Mention:
    surface: str
    positions: list[int]


@dataclass
class Subgraph:
    mention: Mention
    triples: list[Triple]


class KnowledgeBase:
    """Immutable after construction; concurrent read-only lookups are safe."""

    def __init__(self, triples: Iterable[Triple]):
        self.triples: tuple[Triple, ...] = tuple(triples)
        index: dict[str, set[int]] = {}
        for i, t in enumerate(self.triples):
            index.setdefault(t.head, set()).add(i)
            index.setdefault(t.tail, set()).add(i)
        self.surface_index: dict[str, list[int]] = {
            c: sorted(ids) for c, ids in index.items()
        }

    def __len__(self):
        return len(self.triples)

    def __contains__(self, concept: str) -> bool:
        return concept in self.surface_index

    def incident(self, concept: str) -> list[Triple]:
        """All triples touching `concept` as head or tail, in KB order."""
        return [self.triples[i] for i in self.surface_index.get(concept, [])]

    def concepts(self) -> list[str]:
        return list(self.surface_index)


def load_triples(source, dedup: bool = True) -> KnowledgeBase:
    """Load a KB from a 3-column TSV (a path, file object, or line iterable).

    Comment lines start with '#'; blank lines are skipped. Heads and tails
    are lowercased (concepts are single lowercase words); relations keep
    their CamelCase spelling. Raises MalformedLine on a bad line, EmptyKB
    if nothing loads.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_triples(fh, dedup=dedup)
    triples: list[Triple] = []
    seen: set[tuple[str, str, str]] = set()
    for line_no, raw in enumerate(source, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise MalformedLine(line_no)
        head, relation, tail = (f.strip() for f in fields)
        try:
            triple = Triple(head.lower(), relation, tail.lower())
        except ValueError as exc:
            raise MalformedLine(line_no, str(exc)) from exc
        key = (triple.head, triple.relation, triple.tail)
        if dedup:
            if key in seen:
                continue
            seen.add(key)
        triples.append(triple)
    if not triples:
        raise EmptyKB("no triples loaded")
    return KnowledgeBase(triples)


def recognize_mentions(post_tokens: list[str], kb: KnowledgeBase,
                       stopwords: frozenset[str] | set[str] = DEFAULT_STOPWORDS) -> list[Mention]:
    """One Mention per distinct post token that is a KB concept and not a
    stopword, in order of first occurrence. Tokens must be lowercased."""
    order: list[str] = []
    positions: dict[str, list[int]] = {}
    for i, tok in enumerate(post_tokens):
        if tok in positions:
            positions[tok].append(i)
            continue
        if tok in kb.surface_index and tok not in stopwords:
            order.append(tok)
            positions[tok] = [i]
    return [Mention(surface=tok, positions=positions[tok]) for tok in order]


def group_subgraphs(mentions: list[Mention], kb: KnowledgeBase,
                    max_triples_per_subgraph: int = 8,
                    max_subgraphs: int = 8) -> list[Subgraph]:
    """Group the triples incident to each mention into one subgraph.

    Triples keep KB order and are deduplicated, then truncated to the
    per-subgraph cap; mentions with zero incident triples are dropped; the
    subgraph list is truncated to `max_subgraphs` in mention order.
    """
    out: list[Subgraph] = []
    for m in mentions:
        if len(out) >= max_subgraphs:
            break
        incident = kb.incident(m.surface)
        uniq: list[Triple] = []
        seen: set[tuple[str, str, str]] = set()
        for t in incident:
            key = (t.head, t.relation, t.tail)
            if key not in seen:
                seen.add(key)
                uniq.append(t)
            if len(uniq) >= max_triples_per_subgraph:
                break
        if uniq:
            out.append(Subgraph(mention=m, triples=uniq))
    return out
