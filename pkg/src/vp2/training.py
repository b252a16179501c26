"""Shared training loop, hyperparameter bundle, and LM text pretraining.

The loop is deliberately generic: callers hand it a sample list and a
batch-loss callable, and it supplies seeded shuffling, gradient
accumulation, per-parameter learning-rate and weight-decay maps, and a
hard abort on non-finite losses.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import env
from . import tensorops as T
from . import vocab as V
from .params import ParamStore, adam_step

log = logging.getLogger(__name__)


class NumericAbortError(RuntimeError):
    """Training hit a non-finite loss; message carries epoch and step."""


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    lm_lr: float = 5e-5
    lm_weight_decay: float = 1e-3
    weight_decay: float = 0.01
    vp_lr: float = 1e-2
    grad_accum_steps: int = 1
    grad_clip: Optional[float] = None
    max_context_embeddings: int = 256
    precision: str = "float32"
    demo_cap: Optional[int] = None  # keep only the first N demos by index


def planner_rate_maps(store: ParamStore, cfg: TrainConfig,
                      ) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Per-parameter learning rates and decays: LM weights get the LM rate
    and decay, visual-prompt parameters (projector and soft-prompt blocks)
    get theirs, and everything else trainable defaults to the prompt rate."""
    lr_map, wd_map = {}, {}
    for name in store.names():
        if name in store.frozen:
            continue
        if name.startswith("lm."):
            lr_map[name] = cfg.lm_lr
            wd_map[name] = cfg.lm_weight_decay
        else:
            lr_map[name] = cfg.vp_lr
            wd_map[name] = cfg.weight_decay
    return lr_map, wd_map


def run_training(cfg: TrainConfig, samples: Sequence, loss_fn: Callable,
                 store: ParamStore,
                 lr_map: Optional[Dict[str, float]] = None,
                 wd_map: Optional[Dict[str, float]] = None,
                 length_key: Optional[Callable] = None) -> List[float]:
    """Epoch loop over `samples` with seeded shuffles. `loss_fn(batch)`
    must return (scalar loss tensor, reported float). Returns the per-epoch
    mean of the reported floats.

    When `length_key` is given, each epoch's shuffled samples are
    stable-sorted by it before batching and the batch order is then
    reshuffled: batches stay seeded-deterministic but hold similar-length
    samples, which cuts the padding waste of batched forwards."""
    if not samples:
        raise ValueError("empty sample list")
    samples = list(samples)
    rng = np.random.default_rng([0x7124, cfg.seed])
    with T.precision(cfg.precision), T.finite_checks(False):
        curve = []
        for epoch in range(cfg.epochs):
            order = [int(i) for i in rng.permutation(len(samples))]
            if length_key is not None:
                order.sort(key=lambda i: length_key(samples[i]))
            batches = [order[lo:lo + cfg.batch_size]
                       for lo in range(0, len(order), cfg.batch_size)]
            if length_key is not None:
                batches = [batches[int(i)]
                           for i in rng.permutation(len(batches))]
            total, count, pending = 0.0, 0, 0
            for bi, idxs in enumerate(batches):
                batch = [samples[i] for i in idxs]
                loss, reported = loss_fn(batch)
                val = float(loss.detach())
                if not np.isfinite(val):
                    raise NumericAbortError(
                        f"non-finite loss at epoch {epoch} step {bi}")
                if cfg.grad_accum_steps > 1:
                    loss = T.scale(loss, 1.0 / cfg.grad_accum_steps)
                T.backward(loss)
                pending += 1
                if pending == cfg.grad_accum_steps:
                    adam_step(store, lr=cfg.vp_lr, weight_decay=cfg.weight_decay,
                              clip=cfg.grad_clip, lr_map=lr_map, wd_map=wd_map)
                    pending = 0
                total += reported * len(batch)
                count += len(batch)
            if pending:
                adam_step(store, lr=cfg.vp_lr, weight_decay=cfg.weight_decay,
                          clip=cfg.grad_clip, lr_map=lr_map, wd_map=wd_map)
            curve.append(total / count)
            log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, curve[-1])
    return curve


# ------------------------------------------------------------ pretraining

def build_pretrain_corpus(seed: int = 0, n_docs: int = 50000) -> List[str]:
    """Procedural text for LM warm-up: mostly goal-to-numbered-step
    documents from expert solutions on in-distribution task combinations
    (scene ids disjoint from every train and eval split), with
    room-description distractor documents mixed in."""
    from .oracle import solve
    rng = np.random.default_rng([0x93E, seed])
    id_pool, _ = env.combo_pools(seed=0)
    docs = []
    base = 16_000_000
    for i in range(n_docs):
        if rng.random() < 0.85:
            t, obj, target = id_pool[int(rng.integers(0, len(id_pool)))]
            task = env.TaskSpec(task_type=t, obj=obj, target=target,
                                scene_id=base + i, split="train")
            parts = [f"task : {task.goal} steps :"]
            for n, a in enumerate(solve(task), start=1):
                parts.append(f"step {n} : {a}")
            docs.append(" ".join(parts))
        else:
            receps = list(rng.choice(env.RECEP_TYPES,
                                     size=int(rng.integers(2, 5)),
                                     replace=False))
            objs = list(rng.choice(env.OBJ_TYPES,
                                   size=int(rng.integers(1, 4)),
                                   replace=False))
            docs.append("you are in a room and you see "
                        + " and ".join(f"a {r}" for r in receps)
                        + " and then you see "
                        + " and ".join(f"a {o}" for o in objs))
    return docs


def _corpus_windows(docs: Sequence[str], voc, window: int = 128) -> np.ndarray:
    stream: List[int] = []
    for d in docs:
        stream.extend(voc.encode(d))
        stream.append(V.EOS)
    n = len(stream) // window
    return np.array(stream[:n * window], dtype=np.int64).reshape(n, window)


def pretrain_lm(lm, voc, docs: Sequence[str], epochs: int = 3,
                batch_size: int = 16, lr: float = 3e-4,
                weight_decay: float = 0.01, seed: int = 0,
                holdout_frac: float = 0.02) -> Dict[str, object]:
    """Next-token pretraining on fixed-length windows of the concatenated
    corpus. Returns the loss curve plus held-out perplexity before/after."""
    windows = _corpus_windows(docs, voc)
    if len(windows) < 10:
        raise ValueError("pretraining corpus is too small")
    rng = np.random.default_rng([0x93F, seed])
    order = rng.permutation(len(windows))
    n_hold = max(1, int(len(windows) * holdout_frac))
    held = windows[order[:n_hold]]
    train = windows[order[n_hold:]]
    store = lm.store

    def window_loss(batch_rows: Sequence[np.ndarray]):
        ids = torch.as_tensor(np.stack(batch_rows))
        logits = lm.forward_logits(lm.embed_tokens(ids))
        loss = T.cross_entropy_with_logits(
            logits[:, :-1].reshape(-1, logits.shape[-1]),
            ids[:, 1:].reshape(-1), reduction="mean")
        return loss, float(loss.detach())

    def heldout_ppl() -> float:
        total, count = 0.0, 0
        with torch.no_grad():
            for lo in range(0, len(held), batch_size):
                rows = held[lo:lo + batch_size]
                _, per_token = window_loss(list(rows))
                total += per_token * len(rows)
                count += len(rows)
        return float(np.exp(total / count))

    ppl_before = heldout_ppl()
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed,
                      lm_lr=lr, lm_weight_decay=weight_decay)
    lr_map = {n: lr for n in store.names() if n not in store.frozen}
    wd_map = {n: weight_decay for n in lr_map}
    curve = run_training(cfg, list(train), window_loss, store,
                         lr_map, wd_map)
    ppl_after = heldout_ppl()
    return {"curve": curve, "heldout_ppl_before": ppl_before,
            "heldout_ppl_after": ppl_after}
