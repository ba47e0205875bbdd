"""Dynamic pseudo-graph construction.

Each retrieved triple becomes a level-0 pseudo node holding the embeddings
of its flattened tokens (fixed length W, PAD-filled); each subgraph gets a
level-1 node over its triples; a single root spans the subgraphs. States on
levels 1 and 2 are written later by the aggregation pass that owns the
graph, so a freshly built graph has them unset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import compute
from .compute import Tensor
from .kb import Subgraph, Triple
from .vocab import PAD, Vocabulary, flatten_triple


@dataclass
class PseudoTripleNode:
    source: Triple
    token_ids: list[int]          # exactly W ids, PAD-filled on the right
    embedding: Tensor             # W x E, rows positionally match token_ids


@dataclass
class SubgraphNode:
    subgraph_index: int
    children: list[PseudoTripleNode]
    state: Tensor | None = None   # W x E once the first forward layer ran


@dataclass
class PseudoGraphRoot:
    children: list[SubgraphNode]
    state: Tensor | None = None   # W x E once the second forward layer ran


@dataclass
class PseudoGraph:
    root: PseudoGraphRoot
    level0: list[PseudoTripleNode] = field(default_factory=list)
    level1: list[SubgraphNode] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not self.level0


def triple_token_ids(t: Triple, v: Vocabulary, width: int) -> list[int]:
    """Flattened-token ids right-padded/truncated to `width`.

    Truncation drops trailing relation pieces first and never the head or
    tail token.
    """
    if width < 4:
        raise ValueError(f"flattened-triple width must be >= 4, got {width}")
    tokens = flatten_triple(t)
    if len(tokens) > width:
        rel = tokens[1:-1][: width - 2]
        tokens = [tokens[0]] + rel + [tokens[-1]]
    ids = [v.id(tok) for tok in tokens]
    ids += [PAD] * (width - len(ids))
    return ids


def embed_triple_node(t: Triple, v: Vocabulary, emb: Tensor, width: int) -> PseudoTripleNode:
    """Level-0 node: gather the W embedding rows for the flattened triple.

    PAD positions gather the (trainable) PAD embedding row.
    """
    ids = triple_token_ids(t, v, width)
    return PseudoTripleNode(source=t, token_ids=ids,
                            embedding=compute.gather_rows(emb, ids))


def build_pseudo_graph(subgraphs: list[Subgraph], v: Vocabulary, emb: Tensor,
                       width: int) -> PseudoGraph:
    """Assemble the 3-level graph: triples -> subgraph nodes -> single root.

    An empty subgraph list yields an empty graph (valid only for the
    text-only ablation; aggregation refuses it otherwise).
    """
    level0: list[PseudoTripleNode] = []
    level1: list[SubgraphNode] = []
    for i, sg in enumerate(subgraphs):
        children = [embed_triple_node(t, v, emb, width) for t in sg.triples]
        level0.extend(children)
        level1.append(SubgraphNode(subgraph_index=i, children=children))
    root = PseudoGraphRoot(children=level1)
    return PseudoGraph(root=root, level0=level0, level1=level1)


def dump_graph(g: PseudoGraph, subgraphs: list[Subgraph] | None = None) -> str:
    """Structured one-node-per-line text export for debugging.

    Columns: level, node id, parent id, source, token ids.
    """
    lines = ["level\tnode\tparent\tsource\ttoken_ids"]
    lines.append("2\troot\t-\t<graph>\t-")
    for sg_node in g.level1:
        sg_id = f"g{sg_node.subgraph_index}"
        mention = "-"
        if subgraphs is not None and sg_node.subgraph_index < len(subgraphs):
            mention = subgraphs[sg_node.subgraph_index].mention.surface
        lines.append(f"1\t{sg_id}\troot\t{mention}\t-")
        for j, child in enumerate(sg_node.children):
            t = child.source
            ids = " ".join(str(i) for i in child.token_ids)
            lines.append(f"0\t{sg_id}.t{j}\t{sg_id}\t({t.head},{t.relation},{t.tail})\t{ids}")
    return "\n".join(lines)
