"""Encoder-decoder with hierarchical knowledge aggregation on the pseudo graph.

The encoder is a standard pre-norm transformer over [CTX] + post tokens.
Graph features are folded in through two routes: a static mean over all
triple nodes, and a two-layer attention cascade (triples -> subgraph nodes
-> root). The decoder cross-attends over the row-concatenated memory
[root ; static ; H_cls ; H_x]; ablation modes drop blocks of that memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import compute, kb as kb_mod, pseudograph, vocab as vocab_mod
from .compute import (Tensor, add, affine, concat, cross_entropy_with_logits,
                      gather_rows, gelu, layer_norm, matmul, maxpool_rows,
                      mean_tensors, mul, no_grad, reshape, scale, softmax,
                      split, transpose, tsum)
from .pseudograph import PseudoGraph, PseudoGraphRoot, SubgraphNode
from .vocab import BOS, CTX, EOS, PAD, TokenSeq, Vocabulary

ABLATIONS = ("full", "no_dy_agg", "no_st_agg", "no_kg")


class TooLong(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


class LayerOrderViolation(RuntimeError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass
class ModelConfig:
    E: int = 64                 # embedding / hidden size
    W: int = 6                  # flattened-triple length
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    max_seq_len: int = 64
    ablation: str = "full"
    precision: int = 64

    def __post_init__(self):
        if self.E % self.heads != 0:
            raise ValueError(f"E={self.E} must be divisible by heads={self.heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.W < 4:
            raise ValueError("W must be >= 4 (head + >=2 relation pieces + tail)")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        self.dtype = compute.dtype_for(self.precision)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("E", "W", "enc_layers", "dec_layers", "heads",
                 "max_seq_len", "ablation", "precision")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in
                      ("E", "W", "enc_layers", "dec_layers", "heads",
                       "max_seq_len", "ablation", "precision")})


class Parameters:
    """Named trainable tensors; iteration order is creation order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def embedding(self) -> Tensor:
        return self._tensors["emb"]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())


def _attn_names(prefix: str):
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


def init_parameters(cfg: ModelConfig, vocab_size: int, seed: int = 42) -> Parameters:
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    E, W = cfg.E, cfg.W
    tensors: dict[str, Tensor] = {}

    def w(name, *shape, std=0.02):
        tensors[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def zeros(name, *shape):
        tensors[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(name, *shape):
        tensors[name] = Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    def ln(prefix):
        ones(f"{prefix}.g", E)
        zeros(f"{prefix}.b", E)

    def attn(prefix):
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"{prefix}.{nm}", E, E)
        for nm in ("bq", "bk", "bv", "bo"):
            zeros(f"{prefix}.{nm}", E)

    def ffn(prefix):
        w(f"{prefix}.w1", E, 4 * E)
        zeros(f"{prefix}.b1", 4 * E)
        w(f"{prefix}.w2", 4 * E, E)
        zeros(f"{prefix}.b2", E)

    w("emb", vocab_size, E)
    w("enc_pos", cfg.max_seq_len, E)
    w("dec_pos", cfg.max_seq_len, E)
    for i in range(cfg.enc_layers):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    ln("enc_final_ln")
    for i in range(cfg.dec_layers):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    ln("dec_final_ln")
    w("w_g", 1, (W + 1) * E)
    w("w_G", 1, (W + 1) * E)
    w("fc.w", 2 * E, E)
    zeros("fc.b", E)
    w("w_res", E, vocab_size)
    return Parameters(tensors)


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _causal_mask(t: int, dtype) -> Tensor:
    key = (t, np.dtype(dtype).str)
    m = _MASK_CACHE.get(key)
    if m is None:
        m = np.triu(np.full((t, t), -1e30, dtype=dtype), k=1)
        _MASK_CACHE[key] = m
    return Tensor(m)


def _multi_head_attention(params: Parameters, prefix: str, x_q: Tensor,
                          x_kv: Tensor, heads: int, mask: Tensor | None = None) -> Tensor:
    n, E = x_q.shape
    m = x_kv.shape[0]
    dh = E // heads
    q = affine(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = affine(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = affine(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    qh = transpose(reshape(q, (n, heads, dh)), (1, 0, 2))       # (h, n, dh)
    kh = transpose(reshape(k, (m, heads, dh)), (1, 2, 0))       # (h, dh, m)
    vh = transpose(reshape(v, (m, heads, dh)), (1, 0, 2))       # (h, m, dh)
    scores = scale(matmul(qh, kh), 1.0 / math.sqrt(dh))         # (h, n, m)
    if mask is not None:
        scores = add(scores, mask)
    ctx = matmul(softmax(scores), vh)                           # (h, n, dh)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (n, E))
    return affine(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params: Parameters, prefix: str, x: Tensor) -> Tensor:
    h = gelu(affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return affine(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(params: Parameters, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


@dataclass
class EncoderOutput:
    h_cls: Tensor   # 1 x E context vector
    h_x: Tensor     # n x E token states


def encode_post(seq: TokenSeq, params: Parameters, cfg: ModelConfig) -> EncoderOutput:
    """Prepend CTX, run the encoder stack, split off row 0 as the context."""
    n = len(seq)
    if n < 1:
        raise ValueError("post must contain at least one token")
    if n > cfg.max_seq_len - 1:
        raise TooLong(f"post of {n} tokens exceeds max_seq_len-1={cfg.max_seq_len - 1}")
    ids = [CTX] + list(seq.ids)
    x = add(gather_rows(params["emb"], ids),
            gather_rows(params["enc_pos"], np.arange(len(ids))))
    for i in range(cfg.enc_layers):
        h = _ln(params, f"enc{i}.ln1", x)
        x = add(x, _multi_head_attention(params, f"enc{i}.attn", h, h, cfg.heads))
        x = add(x, _ffn(params, f"enc{i}.ffn", _ln(params, f"enc{i}.ln2", x)))
    x = _ln(params, "enc_final_ln", x)
    h_cls, h_x = split(x, [1, n], axis=0)
    return EncoderOutput(h_cls=h_cls, h_x=h_x)


# ---------------------------------------------------------------------------
# knowledge aggregation
# ---------------------------------------------------------------------------

@dataclass
class AggregationState:
    eps: Tensor | None = None            # W x E static mean
    eps_pooled: Tensor | None = None     # 1 x E column-max of eps
    q: Tensor | None = None              # 1 x E context query
    layer1_weights: list[Tensor] = field(default_factory=list)
    layer2_weights: Tensor | None = None
    root_state: Tensor | None = None     # W x E final root feature


def static_aggregate(level0) -> Tensor:
    """Unweighted elementwise mean of all triple-node embeddings."""
    if not level0:
        raise EmptyGraph("static aggregation needs at least one triple node "
                         "(text-only mode handles empty graphs)")
    return mean_tensors([node.embedding for node in level0])


def context_query(h_cls: Tensor, eps: Tensor | None, params: Parameters,
                  use_eps: bool = True) -> tuple[Tensor, Tensor]:
    """Fuse the post context with max-pooled static features into the query.

    With use_eps=False (static-aggregation ablation) the pooled vector is
    replaced by zeros, so the query carries text context only.
    """
    if use_eps:
        if eps is None:
            raise EmptyGraph("context_query needs the static mean")
        eps_pooled = maxpool_rows(eps)
    else:
        eps_pooled = Tensor(np.zeros((1, h_cls.shape[1]), dtype=h_cls.data.dtype))
    q = affine(concat([h_cls, eps_pooled], axis=1), params["fc.w"], params["fc.b"])
    return eps_pooled, q


def _attention_aggregate(children_flat: Tensor, q: Tensor, weight: Tensor,
                         width: int, E: int) -> tuple[Tensor, Tensor]:
    """Shared core of both forward layers: score -> softmax -> convex sum."""
    k = children_flat.shape[0]
    ones = Tensor(np.ones((k, 1), dtype=children_flat.data.dtype))
    feats = concat([children_flat, matmul(ones, q)], axis=1)    # (k, (W+1)E)
    scores = reshape(matmul(feats, transpose(weight)), (1, k))
    weights = softmax(scores)                                   # (1, k)
    state = reshape(matmul(weights, children_flat), (width, E))
    return state, reshape(weights, (k,))


def aggregate_subgraph_layer(node: SubgraphNode, q: Tensor,
                             params: Parameters) -> tuple[Tensor, Tensor]:
    """First forward layer: condense a subgraph's triple nodes into its state."""
    if not node.children:
        raise EmptyGraph("subgraph node has no triple children")
    width, E = node.children[0].embedding.shape
    flat = concat([reshape(c.embedding, (1, width * E)) for c in node.children], axis=0)
    state, weights = _attention_aggregate(flat, q, params["w_g"], width, E)
    node.state = state
    return state, weights


def aggregate_root_layer(root: PseudoGraphRoot, q: Tensor,
                         params: Parameters) -> tuple[Tensor, Tensor]:
    """Second forward layer: condense subgraph states into the root state."""
    if not root.children:
        raise EmptyGraph("root has no subgraph children")
    for child in root.children:
        if child.state is None:
            raise LayerOrderViolation(
                f"subgraph {child.subgraph_index} has no state; run layer 1 first")
    width, E = root.children[0].state.shape
    flat = concat([reshape(c.state, (1, width * E)) for c in root.children], axis=0)
    state, weights = _attention_aggregate(flat, q, params["w_G"], width, E)
    root.state = state
    return state, weights


def run_aggregation(graph: PseudoGraph, enc: EncoderOutput, params: Parameters,
                    cfg: ModelConfig) -> AggregationState | None:
    """Run the aggregation passes required by the configured ablation mode."""
    if cfg.ablation == "no_kg":
        return None
    if graph is None or graph.is_empty():
        raise EmptyGraph("aggregation on an empty pseudo graph")
    state = AggregationState()
    if cfg.ablation != "no_st_agg":
        state.eps = static_aggregate(graph.level0)
    if cfg.ablation == "no_dy_agg":
        return state
    state.eps_pooled, state.q = context_query(
        enc.h_cls, state.eps, params, use_eps=cfg.ablation != "no_st_agg")
    for node in graph.level1:
        _, w = aggregate_subgraph_layer(node, state.q, params)
        state.layer1_weights.append(w)
    state.root_state, state.layer2_weights = aggregate_root_layer(
        graph.root, state.q, params)
    return state


def assemble_encoder_memory(agg: AggregationState | None, enc: EncoderOutput,
                            ablation: str) -> Tensor:
    """Row-concatenate [root ; static ; H_cls ; H_x] per the ablation mode."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    blocks: list[Tensor] = []
    if ablation in ("full", "no_st_agg"):
        if agg is None or agg.root_state is None:
            raise EmptyGraph(f"{ablation} memory needs the aggregated root state")
        blocks.append(agg.root_state)
    if ablation in ("full", "no_dy_agg"):
        if agg is None or agg.eps is None:
            raise EmptyGraph(f"{ablation} memory needs the static mean")
        blocks.append(agg.eps)
    blocks.append(enc.h_cls)
    blocks.append(enc.h_x)
    return concat(blocks, axis=0)


# ---------------------------------------------------------------------------
# decoding and loss
# ---------------------------------------------------------------------------

def _decode_hidden(h_enc: Tensor, prefix_ids: list[int], params: Parameters,
                   cfg: ModelConfig) -> Tensor:
    t = len(prefix_ids)
    if t < 1:
        raise ValueError("decoder prefix must be nonempty")
    if t > cfg.max_seq_len:
        raise TooLong(f"prefix of {t} tokens exceeds max_seq_len={cfg.max_seq_len}")
    x = add(gather_rows(params["emb"], prefix_ids),
            gather_rows(params["dec_pos"], np.arange(t)))
    mask = _causal_mask(t, cfg.dtype)
    for i in range(cfg.dec_layers):
        h = _ln(params, f"dec{i}.ln1", x)
        x = add(x, _multi_head_attention(params, f"dec{i}.self", h, h,
                                         cfg.heads, mask=mask))
        x = add(x, _multi_head_attention(params, f"dec{i}.cross",
                                         _ln(params, f"dec{i}.ln2", x),
                                         h_enc, cfg.heads))
        x = add(x, _ffn(params, f"dec{i}.ffn", _ln(params, f"dec{i}.ln3", x)))
    return _ln(params, "dec_final_ln", x)


def decode_step(h_enc: Tensor, prefix: TokenSeq, params: Parameters,
                cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Next-token logits and probabilities after the given prefix."""
    hidden = _decode_hidden(h_enc, list(prefix.ids), params, cfg)
    t = hidden.shape[0]
    last = split(hidden, [t - 1, 1], axis=0)[1] if t > 1 else hidden
    logits = matmul(last, params["w_res"])
    return logits, softmax(logits)


def _memory_for_example(post_seq: TokenSeq, graph: PseudoGraph | None,
                        params: Parameters, cfg: ModelConfig) -> Tensor:
    """Encoder memory for one example; empty graphs fall back to text-only."""
    enc = encode_post(post_seq, params, cfg)
    if cfg.ablation == "no_kg" or graph is None or graph.is_empty():
        return assemble_encoder_memory(None, enc, "no_kg")
    agg = run_aggregation(graph, enc, params, cfg)
    return assemble_encoder_memory(agg, enc, cfg.ablation)


def sequence_loss(batch, params: Parameters, cfg: ModelConfig) -> Tensor:
    """Teacher-forced cross entropy, averaged over non-PAD response tokens.

    `batch` is a list of (post TokenSeq, response TokenSeq, PseudoGraph or
    None) with responses already BOS/EOS wrapped.
    """
    if not batch:
        raise EmptyBatch("sequence_loss needs at least one example")
    total: Tensor | None = None
    n_tokens = 0
    for post_seq, resp_seq, graph in batch:
        if len(resp_seq) < 2:
            raise ValueError("responses must be BOS/EOS wrapped")
        memory = _memory_for_example(post_seq, graph, params, cfg)
        dec_in = list(resp_seq.ids[:-1])
        targets = np.asarray(resp_seq.ids[1:], dtype=np.int64)
        hidden = _decode_hidden(memory, dec_in, params, cfg)
        logits = matmul(hidden, params["w_res"])
        losses = cross_entropy_with_logits(logits, targets)
        keep = targets != PAD
        if keep.all():
            contrib = tsum(losses)
            n_tokens += targets.shape[0]
        else:
            contrib = tsum(mul(losses, Tensor(keep.astype(losses.data.dtype))))
            n_tokens += int(keep.sum())
        total = contrib if total is None else add(total, contrib)
    if n_tokens == 0:
        raise EmptyBatch("batch contains no non-PAD response tokens")
    return scale(total, 1.0 / n_tokens)


def _log_probs(logits: Tensor) -> np.ndarray:
    z = logits.data[0].astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def generate_response(post: str, kb: "kb_mod.KnowledgeBase | None",
                      v: Vocabulary, params: Parameters, cfg: ModelConfig,
                      decoding: str = "greedy", beam_size: int = 3,
                      max_new: int = 32,
                      stopwords=kb_mod.DEFAULT_STOPWORDS,
                      max_triples_per_subgraph: int = 8,
                      max_subgraphs: int = 8) -> str:
    """Retrieve, aggregate, and decode a response for a raw post string.

    In the text-only ablation the KB argument is never touched (it may be
    None). Greedy decoding is deterministic; beam keeps `beam_size`
    hypotheses by summed log-probability and selects the final output by
    length-normalized score.
    """
    if decoding not in ("greedy", "beam"):
        raise ValueError(f"unknown decoding mode {decoding!r}")
    tokens = post.lower().split()
    if not tokens:
        return ""
    with no_grad():
        seq = vocab_mod.encode_tokens(tokens, v)
        graph = None
        if cfg.ablation != "no_kg":
            mentions = kb_mod.recognize_mentions(tokens, kb, stopwords)
            subgraphs = kb_mod.group_subgraphs(
                mentions, kb, max_triples_per_subgraph, max_subgraphs)
            graph = pseudograph.build_pseudo_graph(subgraphs, v, params["emb"], cfg.W)
        memory = _memory_for_example(seq, graph, params, cfg)
        if max_new <= 0:
            return ""
        if decoding == "greedy":
            ids = [BOS]
            for _ in range(max_new):
                if len(ids) >= cfg.max_seq_len:
                    break
                logits, _ = decode_step(memory, TokenSeq(ids), params, cfg)
                nxt = int(np.argmax(logits.data[0]))
                ids.append(nxt)
                if nxt == EOS:
                    break
            return vocab_mod.decode_ids(TokenSeq(ids), v)
        return _beam_decode(memory, params, cfg, v, beam_size, max_new)


def _beam_decode(memory: Tensor, params: Parameters, cfg: ModelConfig,
                 v: Vocabulary, beam_size: int, max_new: int) -> str:
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    hyps: list[tuple[list[int], float, bool]] = [([BOS], 0.0, False)]
    for _ in range(max_new):
        if all(done for _, _, done in hyps):
            break
        candidates: list[tuple[list[int], float, bool]] = []
        for ids, logp, done in hyps:
            if done or len(ids) >= cfg.max_seq_len:
                candidates.append((ids, logp, True))
                continue
            logits, _ = decode_step(memory, TokenSeq(ids), params, cfg)
            row = _log_probs(logits)
            top = np.argsort(-row, kind="stable")[:beam_size]
            for t in top:
                t = int(t)
                candidates.append((ids + [t], logp + float(row[t]), t == EOS))
        candidates.sort(key=lambda c: -c[1])
        hyps = candidates[:beam_size]
    # final selection is length-normalized over generated tokens
    best = max(hyps, key=lambda c: c[1] / max(1, len(c[0]) - 1))
    return vocab_mod.decode_ids(TokenSeq(best[0]), v)
