"""Optimization loop, checkpointing, determinism.

Adam with bias correction over seeded-shuffle batches; per-epoch mean loss
is token-weighted so it is independent of batch iteration order. A
checkpoint is a zip of raw .npy arrays plus a JSON manifest carrying
shapes, per-array sha256 digests, the model config, and the vocabulary
hash; loading verifies all of them.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kb as kb_mod
from .compute import Tensor, backward
from .model import ModelConfig, Parameters, sequence_loss
from .pseudograph import build_pseudo_graph
from .vocab import TokenSeq, Vocabulary, encode_text


class DivergedLoss(RuntimeError):
    def __init__(self, epoch: int, last_good_checkpoint: str | None):
        msg = f"loss diverged at epoch {epoch}"
        if last_good_checkpoint:
            msg += f"; last good checkpoint: {last_good_checkpoint}"
        super().__init__(msg)
        self.epoch = epoch
        self.last_good_checkpoint = last_good_checkpoint


class CorruptCheckpoint(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 5
    seed: int = 42
    grad_clip_norm: float | None = 1.0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Bias-corrected Adam over a fixed list of named tensors."""

    def __init__(self, tensors: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in tensors}
        self.v = {name: np.zeros_like(p.data) for name, p in tensors}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.tensors:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps))
            p.data -= update.astype(p.data.dtype)


def clip_gradients(tensors: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most `max_norm`."""
    total = 0.0
    for _, p in tensors:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, p in tensors:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def log_lines(self) -> list[str]:
        return [f"{e.epoch}\t{e.mean_loss:.6f}\t{e.seconds:.3f}" for e in self.epochs]


def prepare_examples(corpus: list[tuple[str, str]], kb: "kb_mod.KnowledgeBase | None",
                     v: Vocabulary, max_triples_per_subgraph: int = 8,
                     max_subgraphs: int = 8,
                     stopwords=kb_mod.DEFAULT_STOPWORDS):
    """Tokenize pairs once and retrieve each post's subgraphs once.

    Returns (post TokenSeq, response TokenSeq, subgraph list) triples; the
    pseudo graph itself is rebuilt per step so node embeddings track the
    current embedding table.
    """
    examples = []
    for post, response in corpus:
        post_seq = encode_text(post, v)
        resp_seq = encode_text(response, v, add_bos_eos=True)
        subgraphs = []
        if kb is not None:
            mentions = kb_mod.recognize_mentions(post.lower().split(), kb, stopwords)
            subgraphs = kb_mod.group_subgraphs(mentions, kb,
                                               max_triples_per_subgraph, max_subgraphs)
        examples.append((post_seq, resp_seq, subgraphs))
    return examples


def fit(corpus: list[tuple[str, str]], kb: "kb_mod.KnowledgeBase | None",
        v: Vocabulary, params: Parameters, cfg: ModelConfig, tcfg: TrainConfig,
        max_triples_per_subgraph: int = 8, max_subgraphs: int = 8,
        stop_loss: float | None = None) -> TrainReport:
    """Train in place; returns per-epoch (mean loss, wall-clock) stats.

    Batches are reshuffled per epoch with a generator seeded from
    tcfg.seed, so two runs with one seed produce identical loss traces.
    Raises DivergedLoss (pointing at the last good checkpoint) when the
    loss goes non-finite. `stop_loss` stops early once the epoch mean
    drops below it.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    needs_kb = cfg.ablation != "no_kg"
    examples = prepare_examples(corpus, kb if needs_kb else None, v,
                                max_triples_per_subgraph, max_subgraphs)
    named = list(params.items())
    opt = Adam(named, lr=tcfg.learning_rate, beta1=tcfg.beta1,
               beta2=tcfg.beta2, eps=tcfg.adam_epsilon)
    rng = np.random.default_rng(tcfg.seed)
    ckpt_dir = Path(tcfg.checkpoint_dir) if tcfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport()
    last_good: str | None = None
    log_fh = open(ckpt_dir / "train.log", "w", encoding="utf-8") if ckpt_dir else None
    try:
        for epoch in range(1, tcfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(examples))
            loss_sum = 0.0
            token_count = 0
            for lo in range(0, len(order), tcfg.batch_size):
                idxs = order[lo:lo + tcfg.batch_size]
                batch = []
                n_batch_tokens = 0
                for i in idxs:
                    post_seq, resp_seq, subgraphs = examples[int(i)]
                    graph = None
                    if needs_kb and subgraphs:
                        graph = build_pseudo_graph(subgraphs, v, params["emb"], cfg.W)
                    batch.append((post_seq, resp_seq, graph))
                    n_batch_tokens += len(resp_seq) - 1
                params.zero_grad()
                loss = sequence_loss(batch, params, cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergedLoss(epoch, last_good)
                backward(loss)
                if tcfg.grad_clip_norm is not None:
                    clip_gradients(named, tcfg.grad_clip_norm)
                opt.step()
                loss_sum += value * n_batch_tokens
                token_count += n_batch_tokens
            if not params.all_finite():
                raise DivergedLoss(epoch, last_good)
            mean_loss = loss_sum / token_count
            stats = EpochStats(epoch=epoch, mean_loss=mean_loss,
                               seconds=time.perf_counter() - t0)
            report.epochs.append(stats)
            if log_fh:
                log_fh.write(f"{stats.epoch}\t{stats.mean_loss:.6f}\t{stats.seconds:.3f}\n")
                log_fh.flush()
            if ckpt_dir:
                path = ckpt_dir / f"epoch_{epoch:04d}.ckpt"
                save_checkpoint(params, cfg, tcfg, v.content_hash(), path)
                last_good = str(path)
            if stop_loss is not None and mean_loss < stop_loss:
                break
    finally:
        if log_fh:
            log_fh.close()
    return report


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------

def save_checkpoint(params: Parameters, cfg: ModelConfig,
                    tcfg: TrainConfig | None, vocab_hash: str, path) -> None:
    """Write a self-describing archive of all named arrays plus configs."""
    manifest = []
    payloads: list[tuple[str, bytes]] = []
    for name, p in params.items():
        buf = io.BytesIO()
        np.save(buf, p.data, allow_pickle=False)
        raw = buf.getvalue()
        manifest.append({
            "name": name,
            "shape": list(p.data.shape),
            "dtype": str(p.data.dtype),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        payloads.append((name, raw))
    meta = {
        "format": "kgdial-checkpoint-v1",
        "model_config": cfg.to_dict(),
        "train_config": tcfg.to_dict() if tcfg is not None else None,
        "vocab_hash": vocab_hash,
        "arrays": manifest,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for name, raw in payloads:
            zf.writestr(f"arrays/{name}.npy", raw)


def load_checkpoint(path, expected_vocab_hash: str | None = None
                    ) -> tuple[Parameters, ModelConfig, TrainConfig | None, str]:
    """Restore (params, model config, train config, vocab hash).

    Raises CorruptCheckpoint on any integrity failure: unreadable archive,
    digest or shape mismatch, or a vocabulary hash differing from
    `expected_vocab_hash`.
    """
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != "kgdial-checkpoint-v1":
                raise CorruptCheckpoint(f"unrecognized checkpoint format in {path}")
            if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
                raise CorruptCheckpoint(
                    "vocabulary hash mismatch: checkpoint was saved against a "
                    "different vocabulary")
            tensors: dict[str, Tensor] = {}
            for entry in meta["arrays"]:
                raw = zf.read(f"arrays/{entry['name']}.npy")
                if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                    raise CorruptCheckpoint(f"array {entry['name']} failed its digest")
                arr = np.load(io.BytesIO(raw), allow_pickle=False)
                if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                    raise CorruptCheckpoint(
                        f"array {entry['name']} has shape {arr.shape} ({arr.dtype}), "
                        f"manifest says {entry['shape']} ({entry['dtype']})")
                tensors[entry["name"]] = Tensor(arr, requires_grad=True)
    except CorruptCheckpoint:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, OSError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint {path}: {exc}") from exc
    cfg = ModelConfig.from_dict(meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    return Parameters(tensors), cfg, tcfg, meta["vocab_hash"]
