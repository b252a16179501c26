"""Decoder-only transformer whose input layer accepts raw embedding
sequences, so token text and visual soft prompts can be interleaved
freely in one context.

The output projection is weight-tied to the token embedding table, and
token-id inputs are defined as the embedding-path forward of their table
rows, so the two input paths agree exactly.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from . import tensorops as T
from . import vocab as V
from .params import ParamStore

_MASK_CACHE: Dict[int, torch.Tensor] = {}


def _causal_mask(L: int) -> torch.Tensor:
    m = _MASK_CACHE.get(L)
    if m is None:
        m = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        _MASK_CACHE[L] = m
    return m


class OverlengthError(ValueError):
    """Context longer than the model's position table; trim first."""


@dataclasses.dataclass
class LMConfig:
    vocab_size: int
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 512
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for field in dataclasses.fields(self):
                f.write(f"{field.name} = {getattr(self, field.name)}\n")

    @classmethod
    def load(cls, path) -> "LMConfig":
        kv = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                if "=" in line:
                    k, v = line.split("=", 1)
                    kv[k.strip()] = v.strip()
        return cls(vocab_size=int(kv["vocab_size"]),
                   embed_dim=int(kv["embed_dim"]),
                   n_layers=int(kv["n_layers"]),
                   n_heads=int(kv["n_heads"]),
                   max_positions=int(kv["max_positions"]),
                   dropout_rate=float(kv["dropout_rate"]))


class SoftPromptBank:
    """Named tunable embedding blocks (task embeddings, tuned prefixes)."""

    def __init__(self, store: ParamStore, embed_dim: int):
        self.store = store
        self.embed_dim = embed_dim
        self._blocks: List[str] = []

    def add_block(self, name: str, length: int, rng: np.random.Generator) -> None:
        init = rng.normal(0.0, 0.02, size=(length, self.embed_dim))
        self.store.add(f"prompt.{name}", init)
        self._blocks.append(name)

    def has(self, name: str) -> bool:
        return f"prompt.{name}" in self.store

    def get(self, name: str) -> torch.Tensor:
        t = self.store[f"prompt.{name}"]
        assert t.shape[1] == self.embed_dim
        return t

    def block_names(self) -> List[str]:
        return list(self._blocks)


class TransformerLM:
    """Pre-norm causal transformer over embedding sequences.

    Parameters are registered into `store` under the "lm." prefix so the
    shared checkpoint format and frozen-set machinery apply uniformly.
    """

    def __init__(self, config: LMConfig, store: ParamStore,
                 rng: np.random.Generator):
        self.config = config
        self.store = store
        self.training = False
        c = config
        E = c.embed_dim

        def w(name, *shape, std=0.02):
            store.add(name, rng.normal(0.0, std, size=shape))

        def zeros(name, *shape):
            store.add(name, np.zeros(shape))

        def ones(name, *shape):
            store.add(name, np.ones(shape))

        w("lm.tok_emb", c.vocab_size, E)
        w("lm.pos_emb", c.max_positions, E)
        proj_std = 0.02 / math.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            p = f"lm.h{i}."
            ones(p + "ln1.g", E); zeros(p + "ln1.b", E)
            w(p + "attn.wq", E, E); zeros(p + "attn.bq", E)
            w(p + "attn.wk", E, E); zeros(p + "attn.bk", E)
            w(p + "attn.wv", E, E); zeros(p + "attn.bv", E)
            w(p + "attn.wo", E, E, std=proj_std); zeros(p + "attn.bo", E)
            ones(p + "ln2.g", E); zeros(p + "ln2.b", E)
            w(p + "mlp.w1", E, 4 * E); zeros(p + "mlp.b1", 4 * E)
            w(p + "mlp.w2", 4 * E, E, std=proj_std); zeros(p + "mlp.b2", E)
        ones("lm.lnf.g", E); zeros("lm.lnf.b", E)
        self._drop_gen = torch.Generator().manual_seed(
            int(rng.integers(0, 2**31 - 1)))

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def param_names(self) -> List[str]:
        return [n for n in self.store.names() if n.startswith("lm.")]

    def _dropout(self, x: torch.Tensor) -> torch.Tensor:
        rate = self.config.dropout_rate
        if not self.training or rate == 0.0:
            return x
        keep = (torch.rand(x.shape, generator=self._drop_gen,
                           dtype=x.dtype) >= rate).to(x.dtype)
        return x * keep / (1.0 - rate)

    def embed_tokens(self, ids) -> torch.Tensor:
        """Token ids -> table rows, (L, E) for a flat id list or (B, L, E)
        for a batch. Positions are added in forward."""
        if isinstance(ids, (list, tuple)):
            ids = np.asarray(ids, dtype=np.int64)
        return T.embedding_gather(self.store["lm.tok_emb"], ids)

    def forward_logits(self, seq: torch.Tensor) -> torch.Tensor:
        """Causal logits over the vocab at every position of an embedding
        sequence; accepts (L, E) or a padded batch (B, L, E)."""
        squeeze = seq.dim() == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        B, L, E = seq.shape
        c = self.config
        if L > c.max_positions:
            raise OverlengthError(
                f"context of {L} embeddings exceeds {c.max_positions} positions")
        s = self.store
        pos = T.slice_rows(s["lm.pos_emb"], 0, L)
        x = self._dropout(seq + pos)
        mask = _causal_mask(L)
        H, D = c.n_heads, E // c.n_heads
        for i in range(c.n_layers):
            p = f"lm.h{i}."
            h = T.layernorm(x, s[p + "ln1.g"], s[p + "ln1.b"])
            q = T.add(T.matmul(h, s[p + "attn.wq"]), s[p + "attn.bq"])
            k = T.add(T.matmul(h, s[p + "attn.wk"]), s[p + "attn.bk"])
            v = T.add(T.matmul(h, s[p + "attn.wv"]), s[p + "attn.bv"])
            q = q.view(B, L, H, D).transpose(1, 2)
            k = k.view(B, L, H, D).transpose(1, 2)
            v = v.view(B, L, H, D).transpose(1, 2)
            att = T.scale(T.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(D))
            att = att.masked_fill(mask, float("-inf"))
            att = torch.softmax(att, dim=-1)
            out = T.matmul(att, v).transpose(1, 2).reshape(B, L, E)
            out = T.add(T.matmul(out, s[p + "attn.wo"]), s[p + "attn.bo"])
            x = x + self._dropout(out)
            h = T.layernorm(x, s[p + "ln2.g"], s[p + "ln2.b"])
            h = T.gelu(T.add(T.matmul(h, s[p + "mlp.w1"]), s[p + "mlp.b1"]))
            h = T.add(T.matmul(h, s[p + "mlp.w2"]), s[p + "mlp.b2"])
            x = x + self._dropout(h)
        x = T.layernorm(x, s["lm.lnf.g"], s["lm.lnf.b"])
        logits = T.matmul(x, s["lm.tok_emb"].t())
        return logits.squeeze(0) if squeeze else logits

    def forward_tokens(self, ids: Sequence[int]) -> torch.Tensor:
        return self.forward_logits(self.embed_tokens(ids))

    def sequence_logprob(self, cxt: torch.Tensor,
                         target_ids: Sequence[int]) -> torch.Tensor:
        """Teacher-forced log p(target | cxt), summed over target tokens."""
        if not len(target_ids):
            raise ValueError("empty target sequence")
        full = T.concat([cxt, self.embed_tokens(list(target_ids)[:-1])]) \
            if len(target_ids) > 1 else cxt
        logits = self.forward_logits(full)
        lp = torch.log_softmax(logits[len(cxt) - 1:], dim=-1)
        idx = torch.as_tensor(list(target_ids), dtype=torch.long)
        return lp[torch.arange(len(idx)), idx].sum()

    def sequence_logprob_batch(self, cxt: torch.Tensor,
                               targets: Sequence[Sequence[int]]) -> List[float]:
        """Logprobs of several candidate continuations of one context,
        computed in a single padded forward."""
        seqs, spans = [], []
        for tgt in targets:
            if not len(tgt):
                raise ValueError("empty target sequence")
            body = T.concat([cxt, self.embed_tokens(list(tgt)[:-1])]) \
                if len(tgt) > 1 else cxt
            seqs.append(body)
            spans.append(len(tgt))
        with torch.no_grad():
            logits = self.forward_logits(T.pad_stack(seqs))
        out = []
        for b, (tgt, n) in enumerate(zip(targets, spans)):
            lp = torch.log_softmax(logits[b, len(cxt) - 1:len(cxt) - 1 + n], dim=-1)
            idx = torch.as_tensor(list(tgt), dtype=torch.long)
            out.append(float(lp[torch.arange(n), idx].sum()))
        return out

    def generate_greedy(self, cxt: torch.Tensor, max_len: int = 8) -> List[int]:
        """Argmax decoding until EOS or max_len; returns ids without EOS."""
        ids: List[int] = []
        with torch.no_grad():
            for _ in range(max_len):
                seq = cxt if not ids else T.concat([cxt, self.embed_tokens(ids)])
                nxt = int(self.forward_logits(seq)[-1].argmax())
                if nxt == V.EOS:
                    break
                ids.append(nxt)
        return ids

    def generate_topk(self, cxt: torch.Tensor, k: int,
                      max_len: int = 8) -> List[Tuple[List[int], float]]:
        """Beam search of width k; returns the k highest-logprob complete
        sequences (EOS- or max_len-terminated), sorted by descending
        logprob with ties broken lexicographically."""
        if k < 1:
            raise ValueError("k must be >= 1")
        beams: List[Tuple[List[int], float]] = [([], 0.0)]
        finished: List[Tuple[List[int], float]] = []
        for step in range(max_len + 1):
            if not beams:
                break
            if step == max_len:
                # length budget exhausted: remaining beams are complete as-is
                finished.extend(beams)
                break
            seqs = [cxt if not ids else T.concat([cxt, self.embed_tokens(ids)])
                    for ids, _ in beams]
            with torch.no_grad():
                logits = self.forward_logits(T.pad_stack(seqs))
            pool: List[Tuple[List[int], float, bool]] = []
            for b, (ids, lp) in enumerate(beams):
                row = torch.log_softmax(logits[b, len(cxt) - 1 + len(ids)], dim=-1)
                for tok in range(len(row)):
                    cand = lp + float(row[tok])
                    if tok == V.EOS:
                        pool.append((ids, cand, True))
                    else:
                        pool.append((ids + [tok], cand, False))
            # standard beam: keep the k best pool entries overall; EOS entries
            # retire to the finished list, the rest stay live (so width 1
            # reduces exactly to greedy decoding)
            pool.sort(key=lambda p: (-p[1], p[0]))
            beams = []
            for ids, lp, done in pool[:k]:
                (finished if done else beams).append((ids, lp))
            finished.sort(key=lambda p: (-p[1], p[0]))
            if len(finished) >= k and beams and beams[0][1] < finished[k - 1][1]:
                break
        finished.sort(key=lambda p: (-p[1], p[0]))
        return finished[:k]


def batch_nll(lm: TransformerLM, contexts: Sequence[torch.Tensor],
              targets: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, float]:
    """Teacher-forced NLL of one target sequence per context, computed in a
    single padded forward. Returns (loss, per-token NLL): the loss is the
    mean over samples of each sample's summed token NLL."""
    if len(contexts) != len(targets) or not contexts:
        raise ValueError("need one non-empty target per context")
    seqs, n_tokens = [], 0
    for cxt, tgt in zip(contexts, targets):
        if not len(tgt):
            raise ValueError("empty target sequence")
        body = T.concat([cxt, lm.embed_tokens(list(tgt)[:-1])]) \
            if len(tgt) > 1 else cxt
        seqs.append(body)
        n_tokens += len(tgt)
    stacked = T.pad_stack(seqs)
    labels = torch.full(stacked.shape[:2], -1, dtype=torch.long)
    for b, (cxt, tgt) in enumerate(zip(contexts, targets)):
        labels[b, len(cxt) - 1:len(cxt) - 1 + len(tgt)] = \
            torch.as_tensor(list(tgt), dtype=torch.long)
    logits = lm.forward_logits(stacked)
    ce_sum = T.cross_entropy_with_logits(logits, labels, ignore_index=-1,
                                         reduction="sum")
    loss = ce_sum / len(contexts)
    return loss, float(ce_sum.detach()) / n_tokens


def set_frozen_mode(lm: TransformerLM, bank: SoftPromptBank,
                    frozen: bool) -> None:
    """Move all transformer/embedding weights in or out of the frozen set.
    Soft prompt blocks and the observation projector stay trainable."""
    if frozen:
        lm.store.freeze(lm.param_names())
    else:
        lm.store.unfreeze(lm.param_names())
