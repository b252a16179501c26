"""Observation encoder: a small convolutional backbone followed by a
feed-forward projector that emits m soft-prompt embeddings per image.

The backbone is pretrained once (contrastive image-caption alignment, or
a supervised non-aligned control) and then frozen; only the projector
trains with the planner. Two coordinate channels are appended to the
input so globally pooled features can still bind contents to grid
positions.
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from . import env
from . import tensorops as T
from . import vocab as V
from .params import ParamStore, adam_step

FEATURE_DIM = 256
_CONV_CHANNELS = [5, 32, 64, FEATURE_DIM]  # input = RGB + 2 coord channels


class VisualBackbone:
    """3 stride-2 conv layers + global average pool to a 256-d feature."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 mode: str = "random"):
        self.store = store
        self.mode = mode
        self.frozen = False
        self._cache: Dict[bytes, torch.Tensor] = {}
        for i in range(3):
            cin, cout = _CONV_CHANNELS[i], _CONV_CHANNELS[i + 1]
            std = math.sqrt(2.0 / (cin * 9))
            store.add(f"vision.backbone.conv{i}.w",
                      rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            store.add(f"vision.backbone.conv{i}.b", np.zeros(cout))

    def param_names(self) -> List[str]:
        return [n for n in self.store.names()
                if n.startswith("vision.backbone.")]

    def freeze(self) -> None:
        self.frozen = True
        self.store.freeze(self.param_names())
        self._cache.clear()

    def _prepare(self, obs_batch: np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(obs_batch), dtype=T.get_dtype())
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1:] != (env.IMG_H, env.IMG_W, 3):
            raise ValueError(
                f"observation batch has shape {tuple(x.shape)}, expected "
                f"(B, {env.IMG_H}, {env.IMG_W}, 3)")
        x = x.permute(0, 3, 1, 2) / 255.0 * 2.0 - 1.0
        b = x.shape[0]
        ys = torch.linspace(-1, 1, env.IMG_H, dtype=x.dtype)
        xs = torch.linspace(-1, 1, env.IMG_W, dtype=x.dtype)
        gy = ys.view(1, 1, -1, 1).expand(b, 1, env.IMG_H, env.IMG_W)
        gx = xs.view(1, 1, 1, -1).expand(b, 1, env.IMG_H, env.IMG_W)
        return torch.cat([x, gy, gx], dim=1)

    def features(self, obs_batch: np.ndarray) -> torch.Tensor:
        """(B, 256) pooled features; differentiable unless frozen."""
        x = self._prepare(obs_batch)
        s = self.store
        grad = torch.enable_grad if not self.frozen else torch.no_grad
        with grad():
            for i in range(3):
                x = torch.nn.functional.conv2d(
                    x, s[f"vision.backbone.conv{i}.w"],
                    s[f"vision.backbone.conv{i}.b"], stride=2, padding=1)
                x = T.gelu(x)
            feats = T.mean(x.flatten(2), dim=-1)
        return feats.detach() if self.frozen else feats

    def cached_features(self, obs: np.ndarray) -> torch.Tensor:
        """Single-observation features, memoized while the backbone is
        frozen (planner training re-encodes the same renders constantly)."""
        if not self.frozen:
            return self.features(obs[None])[0]
        key = obs.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = self.features(obs[None])[0]
            self._cache[key] = hit
        return hit


class PromptProjector:
    """2-hidden-layer MLP mapping a backbone feature to m prompt embeddings."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 m: int = 10, embed_dim: int = 128, hidden: int = 256,
                 prefix: str = "vision.projector"):
        self.store = store
        self.m = m
        self.embed_dim = embed_dim
        self.prefix = prefix
        dims = [FEATURE_DIM, hidden, hidden, m * embed_dim]
        for i in range(3):
            std = math.sqrt(2.0 / dims[i])
            store.add(f"{prefix}.w{i}", rng.normal(0.0, std, size=(dims[i], dims[i + 1])))
            store.add(f"{prefix}.b{i}", np.zeros(dims[i + 1]))

    def param_names(self) -> List[str]:
        return [n for n in self.store.names()
                if n.startswith(self.prefix + ".")]

    def __call__(self, features: torch.Tensor) -> torch.Tensor:
        s, p = self.store, self.prefix
        x = features
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        x = T.gelu(T.add(T.matmul(x, s[p + ".w0"]), s[p + ".b0"]))
        x = T.gelu(T.add(T.matmul(x, s[p + ".w1"]), s[p + ".b1"]))
        x = T.add(T.matmul(x, s[p + ".w2"]), s[p + ".b2"])
        x = x.view(x.shape[0], self.m, self.embed_dim)
        # fix each prompt embedding to unit RMS: the LM's layernorm makes the
        # loss scale-invariant, and unnormalized outputs let Adam inflate the
        # magnitude until the conditioning gradient vanishes
        x = x / torch.sqrt((x * x).mean(dim=-1, keepdim=True) + 1e-6)
        return x[0] if squeeze else x


def encode_observation(backbone: VisualBackbone, projector: PromptProjector,
                       obs: np.ndarray) -> torch.Tensor:
    """f(o) = projector(backbone(o)) as an (m, E) embedding block."""
    return projector(backbone.cached_features(obs))


def _caption_token_ids(vocab, captions: Sequence[str]) -> List[List[int]]:
    return [vocab.encode(c) for c in captions]


def pretrain_aligned(backbone: VisualBackbone, pairs, vocab,
                     epochs: int = 20, batch_size: int = 32,
                     lr: float = 1e-3, seed: int = 0) -> List[float]:
    """Symmetric contrastive alignment between image features and mean
    caption-token embeddings (a desk-scale image-text pretraining analog).
    Marks the backbone "aligned" and freezes it. Returns per-epoch losses."""
    if len(pairs) < 2 or batch_size < 2:
        raise ValueError("contrastive pretraining needs batches of >= 2 pairs")
    rng = np.random.default_rng([0xA116, seed])
    store = backbone.store
    d = 64
    store.add("vision.align.text_emb", rng.normal(0, 0.02, size=(len(vocab), d)))
    store.add("vision.align.img_proj",
              rng.normal(0, math.sqrt(1.0 / FEATURE_DIM),
                         size=(FEATURE_DIM, d)))
    store.add("vision.align.logit_scale", np.array(math.log(1 / 0.07)))
    obs = np.stack([p[0] for p in pairs])
    cap_ids = _caption_token_ids(vocab, [p[1] for p in pairs])
    losses = []
    names = set(backbone.param_names()) | {
        "vision.align.text_emb", "vision.align.img_proj",
        "vision.align.logit_scale"}
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for lo in range(0, len(order) - 1, batch_size):
            idx = order[lo:lo + batch_size]
            if len(idx) < 2:
                continue
            img = T.matmul(backbone.features(obs[idx]),
                           store["vision.align.img_proj"])
            txt_rows = [T.mean(T.embedding_gather(
                store["vision.align.text_emb"], cap_ids[int(i)]), dim=0)
                for i in idx]
            txt = torch.stack(txt_rows)
            img = img / img.norm(dim=-1, keepdim=True)
            txt = txt / txt.norm(dim=-1, keepdim=True)
            scale = torch.exp(store["vision.align.logit_scale"].clamp(max=5.0))
            logits = T.matmul(img, txt.t()) * scale
            labels = torch.arange(len(idx))
            loss = 0.5 * (T.cross_entropy_with_logits(logits, labels)
                          + T.cross_entropy_with_logits(logits.t(), labels))
            T.backward(loss)
            adam_step(store, lr=lr, weight_decay=0.0)
            total += float(loss.detach())
            count += 1
        losses.append(total / max(count, 1))
    backbone.mode = "aligned"
    backbone.freeze()
    return losses


def pretrain_supervised(backbone: VisualBackbone, pairs,
                        epochs: int = 20, batch_size: int = 32,
                        lr: float = 1e-3, seed: int = 0) -> List[float]:
    """Supervised control for the alignment ablation: predict which
    receptacle the agent faces, with no caption signal. Marks the backbone
    "unaligned" and freezes it."""
    rng = np.random.default_rng([0x50B, seed])
    store = backbone.store
    n_classes = len(env.RECEP_TYPES) + 1
    store.add("vision.sup.head",
              rng.normal(0, math.sqrt(1.0 / FEATURE_DIM),
                         size=(FEATURE_DIM, n_classes)))
    store.add("vision.sup.bias", np.zeros(n_classes))
    obs = np.stack([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs], dtype=np.int64)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            logits = T.add(T.matmul(backbone.features(obs[idx]),
                                    store["vision.sup.head"]),
                           store["vision.sup.bias"])
            loss = T.cross_entropy_with_logits(logits, labels[idx])
            T.backward(loss)
            adam_step(store, lr=lr, weight_decay=0.0)
            total += float(loss.detach())
            count += 1
        losses.append(total / max(count, 1))
    backbone.mode = "unaligned"
    backbone.freeze()
    return losses


def faced_recep_class(state: "env.WorldState") -> int:
    """Supervision label for the unaligned control: 0 = facing nothing,
    else 1 + index of the faced receptacle type."""
    if state.agent_at is None:
        return 0
    return 1 + env.RECEP_TYPES.index(state.agent_at)


def pretrain_prompt_caption(backbone: VisualBackbone,
                            projector: PromptProjector, lm, vocab, pairs,
                            epochs: int = 10, batch_size: int = 8,
                            lr: float = 1e-2, seed: int = 0) -> List[float]:
    """Initialize the projector by captioning: minimize the NLL of the
    ground-truth caption given the visual prompt, with the LM held fixed."""
    from .lm import batch_nll  # local import to keep module deps one-way
    rng = np.random.default_rng([0xCA9, seed])
    store = projector.store
    frozen_before = store.frozen
    train_names = set(projector.param_names())
    store.freeze([n for n in store.names()
                  if n not in train_names and n not in frozen_before])
    prompt_ids = vocab.encode(env.CAPTION_PROMPT)
    obs = np.stack([p[0] for p in pairs])
    caps = [vocab.encode(p[1]) + [V.EOS] for p in pairs]
    sep = lambda: lm.embed_tokens([V.SEP])
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            prompts = projector(backbone.features(obs[idx]))
            contexts = [T.concat([lm.embed_tokens(prompt_ids), sep(),
                                  prompts[j]])
                        for j in range(len(idx))]
            targets = [caps[int(i)] for i in idx]
            loss, per_token = batch_nll(lm, contexts, targets)
            T.backward(loss)
            adam_step(store, lr=lr, weight_decay=0.0)
            total += per_token * sum(len(t) for t in targets)
            count += sum(len(t) for t in targets)
        losses.append(total / max(count, 1))
    store.unfreeze([n for n in store.names()
                    if n not in train_names and n not in frozen_before])
    return losses
