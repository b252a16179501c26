"""Policies and their training objectives.

One behavior-cloning code path serves the visual-prompt planner and the
baselines: the text-only planner is literally the same trainer with
observation blocks omitted, and the caption baseline substitutes
predicted-caption token embeddings for the visual prompts. SayCan ranks
candidate actions by LM likelihood times an affordance probability, with
the affordance either read from the simulator or from a trained
classifier.
"""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch

from . import env
from . import tensorops as T
from . import vocab as V
from .context import ContextSpec, assemble_context, trim_context
from .lm import (LMConfig, SoftPromptBank, TransformerLM, batch_nll,
                 set_frozen_mode)
from .oracle import AffordanceExample, Demonstration
from .params import ParamStore, adam_step
from .training import TrainConfig, planner_rate_maps, run_training
from . import vision
from .vision import PromptProjector, VisualBackbone, encode_observation

MAX_ACTION_TOKENS = 8

ObsSpec = Optional[Tuple[str, object]]  # ("img", array) | ("txt", ids) | None


@dataclasses.dataclass
class AuxTaskConfig:
    tasks: Tuple[str, ...] = ()
    alpha: float = 0.1
    task_embedding_len: int = 10

    def __post_init__(self):
        for t in self.tasks:
            if t not in ("inv-dyn", "captions", "goal-pred"):
                raise ValueError(f"unknown auxiliary task {t!r}")
        if self.tasks and self.alpha <= 0:
            raise ValueError("alpha must be positive when auxiliary tasks are on")


@dataclasses.dataclass
class Sample:
    """One teacher-forced training example: a context recipe plus target ids."""
    goal_ids: List[int]
    steps: List[Tuple[ObsSpec, List[int]]]
    final_obs: ObsSpec
    target: List[int]
    task_block: Optional[str] = None


class PlannerPolicy:
    """Uniform action-selection interface over all planner kinds."""

    def __init__(self, kind: str, vocab, store: ParamStore,
                 lm: TransformerLM, bank: SoftPromptBank,
                 backbone: Optional[VisualBackbone] = None,
                 projector: Optional[PromptProjector] = None,
                 caption_model: Optional["PlannerPolicy"] = None,
                 affordance: Optional["AffordanceClassifier"] = None,
                 decode_k: int = 10,
                 max_ctx: int = 256,
                 task_block: Optional[str] = None):
        self.kind = kind
        self.vocab = vocab
        self.store = store
        self.lm = lm
        self.bank = bank
        self.backbone = backbone
        self.projector = projector
        self.caption_model = caption_model
        self.affordance = affordance
        self.decode_k = decode_k
        self.max_ctx = max_ctx
        self.task_block = task_block
        self._caption_cache: Dict[bytes, List[int]] = {}

    # ------------------------------------------------------------ contexts

    def _obs_spec(self, obs: np.ndarray) -> ObsSpec:
        if self.kind == "ignore" or self.kind.startswith("saycan"):
            return None
        if self.kind == "captions":
            return ("txt", self._predicted_caption_ids(obs))
        return ("img", obs)

    def _predicted_caption_ids(self, obs: np.ndarray) -> List[int]:
        key = obs.tobytes()
        hit = self._caption_cache.get(key)
        if hit is None:
            hit = predict_caption_ids(self.caption_model, obs)
            self._caption_cache[key] = hit
        return hit

    def _embed_obs(self, spec: ObsSpec) -> Optional[torch.Tensor]:
        if spec is None:
            return None
        tag, payload = spec
        if tag == "img":
            return encode_observation(self.backbone, self.projector, payload)
        return self.lm.embed_tokens(payload)

    def context_for(self, goal_ids: List[int], obs_list: Sequence[np.ndarray],
                    act_list: Sequence[str]) -> torch.Tensor:
        assert len(obs_list) == len(act_list) + 1
        steps = [(self._embed_obs(self._obs_spec(o)), self.vocab.encode(a))
                 for o, a in zip(obs_list[:-1], act_list)]
        final = self._embed_obs(self._obs_spec(obs_list[-1]))
        spec = ContextSpec(goal_ids=goal_ids, steps=steps, final_obs=final,
                           task_block=self.task_block,
                           max_embeddings=self.max_ctx)
        spec = trim_context(spec, bank=self.bank)
        seq, _ = assemble_context(self.lm, spec, self.bank)
        return seq

    # ------------------------------------------------------------ selection

    def select_action(self, goal: str, obs_list: Sequence[np.ndarray],
                      act_list: Sequence[str],
                      affordable: Optional[Set[str]] = None) -> str:
        if self.kind == "saycan-oracle":
            if affordable is None:
                raise ValueError("oracle-affordance mode needs the affordable set")
            return select_action_saycan(self, goal, obs_list, act_list,
                                        mode="oracle", affordable=affordable)
        if self.kind == "saycan-trained":
            return select_action_saycan(self, goal, obs_list, act_list,
                                        mode="trained")
        cxt = self.context_for(self.vocab.encode(goal), obs_list, act_list)
        ids = self.lm.generate_greedy(cxt, max_len=MAX_ACTION_TOKENS)
        return self.vocab.decode(ids)

    def rank_actions(self, goal: str, act_list: Sequence[str],
                     k: Optional[int] = None) -> List[str]:
        """Top-k candidate action texts by LM likelihood on the text-only
        context (used for SayCan candidates and planner-likelihood
        affordance negatives)."""
        goal_ids = self.vocab.encode(goal)
        steps: List[Tuple[Optional[torch.Tensor], List[int]]] = \
            [(None, self.vocab.encode(a)) for a in act_list]
        spec = ContextSpec(goal_ids=goal_ids, steps=steps, final_obs=None,
                           task_block=self.task_block,
                           max_embeddings=self.max_ctx)
        spec = trim_context(spec, bank=self.bank)
        cxt, _ = assemble_context(self.lm, spec, self.bank)
        beams = self.lm.generate_topk(cxt, k or self.decode_k,
                                      max_len=MAX_ACTION_TOKENS)
        out, seen = [], set()
        for ids, _ in beams:
            text = self.vocab.decode(ids)
            if text not in seen:
                seen.add(text)
                out.append(text)
        return out


# ------------------------------------------------------------- bundles

def build_policy(kind: str, vocab, hyper: TrainConfig,
                 lm_values: Optional[dict] = None,
                 backbone_values: Optional[dict] = None,
                 projector_values: Optional[dict] = None,
                 prompt_size: int = 10,
                 aux: Optional[AuxTaskConfig] = None,
                 frozen_lm: bool = False,
                 caption_model: Optional[PlannerPolicy] = None,
                 affordance: Optional["AffordanceClassifier"] = None,
                 lm_config: Optional[LMConfig] = None) -> PlannerPolicy:
    """Assemble an untrained policy bundle of the requested kind."""
    rng = np.random.default_rng([0xB1D, hyper.seed])
    store = ParamStore()
    cfg = lm_config or LMConfig(vocab_size=len(vocab))
    lm = TransformerLM(cfg, store, rng)
    if lm_values:
        store.load_values({k: v for k, v in lm_values.items()
                           if k.startswith("lm.")})
    bank = SoftPromptBank(store, cfg.embed_dim)
    backbone = projector = None
    uses_vision = kind in ("vp2",)
    if uses_vision or kind == "captions":
        # captions planners embed caption text, but the caption model that
        # produced the text carries the vision stack; vp2 needs it inline.
        pass
    if uses_vision:
        backbone = VisualBackbone(store, rng)
        if backbone_values:
            store.load_values({k: v for k, v in backbone_values.items()
                               if k.startswith("vision.backbone.")})
        backbone.freeze()
        projector = PromptProjector(store, rng, m=prompt_size,
                                    embed_dim=cfg.embed_dim)
        if projector_values:
            store.load_values({k: v for k, v in projector_values.items()
                               if k.startswith("vision.projector.")})
    task_block = None
    if aux and aux.tasks:
        bank.add_block("task_action", aux.task_embedding_len, rng)
        for t in aux.tasks:
            bank.add_block("task_" + t.replace("-", ""),
                           aux.task_embedding_len, rng)
        task_block = "task_action"
    if frozen_lm:
        set_frozen_mode(lm, bank, True)
        if task_block is None:
            bank.add_block("frozen_prefix", 10, rng)
            task_block = "frozen_prefix"
    return PlannerPolicy(kind=kind, vocab=vocab, store=store, lm=lm,
                         bank=bank, backbone=backbone, projector=projector,
                         caption_model=caption_model, affordance=affordance,
                         max_ctx=hyper.max_context_embeddings,
                         task_block=task_block)


# ------------------------------------------------------------- samples

def bc_samples(demos: Sequence[Demonstration], policy: PlannerPolicy) -> List[Sample]:
    """One next-action sample per (demonstration, step), with past actions
    and observations rendered per the policy kind."""
    out = []
    for d in demos:
        goal_ids = policy.vocab.encode(d.goal)
        for t in range(len(d.steps)):
            steps = [(policy._obs_spec(d.steps[i].observation),
                      policy.vocab.encode(d.steps[i].action))
                     for i in range(t)]
            final = policy._obs_spec(d.steps[t].observation)
            target = policy.vocab.encode(d.steps[t].action) + [V.EOS]
            out.append(Sample(goal_ids=goal_ids, steps=steps, final_obs=final,
                              target=target, task_block=policy.task_block))
    return out


def aux_samples(kind: str, demos: Sequence[Demonstration],
                policy: PlannerPolicy) -> List[Sample]:
    """Samples for one auxiliary objective, each tagged with its own task
    embedding block."""
    voc = policy.vocab
    out: List[Sample] = []
    if kind == "inv-dyn":
        block = "task_invdyn"
        for d in demos:
            for t in range(len(d.steps) - 1):
                out.append(Sample(
                    goal_ids=[], final_obs=("img", d.steps[t + 1].observation),
                    steps=[(("img", d.steps[t].observation), [])],
                    target=voc.encode(d.steps[t].action) + [V.EOS],
                    task_block=block))
    elif kind == "captions":
        for d in demos:
            for s in d.steps:
                out.append(Sample(
                    goal_ids=[], steps=[],
                    final_obs=("img", s.observation),
                    target=voc.encode(s.caption) + [V.EOS],
                    task_block="task_captions"))
    elif kind == "goal-pred":
        for d in demos:
            steps = [(("img", s.observation), voc.encode(s.action))
                     for s in d.steps]
            out.append(Sample(goal_ids=[], steps=steps, final_obs=None,
                              target=voc.encode(d.goal) + [V.EOS],
                              task_block="task_goalpred"))
    else:
        raise ValueError(f"unknown auxiliary task {kind!r}")
    return out


def batch_loss(policy: PlannerPolicy, batch: Sequence[Sample]) -> Tuple[torch.Tensor, float]:
    """Eq-style behavior-cloning loss over a batch: mean over samples of
    the summed token NLL of the target under the assembled context."""
    img_specs = []
    for s in batch:
        for spec, _ in s.steps:
            if spec is not None and spec[0] == "img":
                img_specs.append(spec)
        if s.final_obs is not None and s.final_obs[0] == "img":
            img_specs.append(s.final_obs)
    prompts: Dict[int, torch.Tensor] = {}
    if img_specs:
        feats = torch.stack([policy.backbone.cached_features(spec[1])
                             for spec in img_specs])
        blocks = policy.projector(feats)
        prompts = {id(spec): blocks[j] for j, spec in enumerate(img_specs)}
    contexts, targets = [], []
    for s in batch:
        def emb(spec: ObsSpec) -> Optional[torch.Tensor]:
            if spec is None:
                return None
            if spec[0] == "img":
                return prompts[id(spec)]
            return policy.lm.embed_tokens(spec[1])
        cspec = ContextSpec(
            goal_ids=s.goal_ids,
            steps=[(emb(o), a) for o, a in s.steps],
            final_obs=emb(s.final_obs),
            task_block=s.task_block,
            max_embeddings=policy.max_ctx)
        cspec = trim_context(cspec, bank=policy.bank)
        seq, _ = assemble_context(policy.lm, cspec, policy.bank)
        contexts.append(seq)
        targets.append(s.target)
    return batch_nll(policy.lm, contexts, targets)


def aux_loss(kind: str, policy: PlannerPolicy,
             batch: Sequence[Sample]) -> torch.Tensor:
    """Auxiliary objective value on a batch of aux_samples(kind, ...)."""
    loss, _ = batch_loss(policy, batch)
    return loss


# ------------------------------------------------------------- training

def train_policy(policy: PlannerPolicy, demos: Sequence[Demonstration],
                 hyper: TrainConfig,
                 aux: Optional[AuxTaskConfig] = None) -> List[float]:
    """Behavior-clone a policy on demonstrations; returns the per-epoch
    per-token loss curve."""
    if hyper.demo_cap is not None:
        demos = list(demos)[:hyper.demo_cap]
    if not demos:
        raise ValueError("no demonstrations to train on")
    samples = bc_samples(demos, policy)
    aux_streams: List[Tuple[str, List[Sample]]] = []
    skipped = 0
    if aux and aux.tasks:
        for kind in aux.tasks:
            s = aux_samples(kind, demos, policy)
            if kind == "inv-dyn":
                skipped = sum(1 for d in demos if len(d.steps) < 2)
            if not s:
                raise ValueError(f"no samples for auxiliary task {kind!r}")
            aux_streams.append((kind, s))
    if skipped:
        import logging
        logging.getLogger(__name__).info(
            "inv-dyn skipped %d single-step demos", skipped)
    rng = np.random.default_rng([0xAA, hyper.seed])
    cursors = {kind: 0 for kind, _ in aux_streams}
    orders = {kind: rng.permutation(len(s)) for kind, s in aux_streams}

    def loss_fn(batch: Sequence[Sample]) -> Tuple[torch.Tensor, float]:
        loss, per_token = batch_loss(policy, batch)
        for kind, stream in aux_streams:
            take = []
            for _ in range(len(batch)):
                if cursors[kind] >= len(stream):
                    orders[kind] = rng.permutation(len(stream))
                    cursors[kind] = 0
                take.append(stream[int(orders[kind][cursors[kind]])])
                cursors[kind] += 1
            loss = loss + (aux or AuxTaskConfig()).alpha * aux_loss(
                kind, policy, take)
        return loss, per_token

    lr_map, wd_map = planner_rate_maps(policy.store, hyper)
    return run_training(hyper, samples, loss_fn, policy.store, lr_map, wd_map,
                        length_key=_sample_length(policy))


def _sample_length(policy: PlannerPolicy):
    """Approximate context length of a Sample, for length-bucketed batching."""
    m = policy.projector.m if policy.projector else 0

    def seg(spec: ObsSpec) -> int:
        if spec is None:
            return 0
        return m if spec[0] == "img" else len(spec[1])

    def key(s: Sample) -> int:
        return (len(s.goal_ids) + seg(s.final_obs) + len(s.target)
                + sum(seg(o) + len(a) + 2 for o, a in s.steps))

    return key


def train_vp2(demos, vocab, hyper: TrainConfig,
              lm_values=None, backbone_values=None, projector_values=None,
              prompt_size: int = 10, aux: Optional[AuxTaskConfig] = None,
              frozen_lm: bool = False,
              caption_init_pairs=None) -> Tuple[PlannerPolicy, List[float]]:
    policy = build_policy("vp2", vocab, hyper, lm_values=lm_values,
                          backbone_values=backbone_values,
                          projector_values=projector_values,
                          prompt_size=prompt_size, aux=aux,
                          frozen_lm=frozen_lm)
    if caption_init_pairs:
        # captioning warm start for the projector, LM held fixed
        vision.pretrain_prompt_caption(policy.backbone, policy.projector,
                                       policy.lm, vocab, caption_init_pairs,
                                       seed=hyper.seed)
    curve = train_policy(policy, demos, hyper, aux=aux)
    return policy, curve


def train_ignore(demos, vocab, hyper: TrainConfig,
                 lm_values=None, kind: str = "ignore"
                 ) -> Tuple[PlannerPolicy, List[float]]:
    policy = build_policy(kind, vocab, hyper, lm_values=lm_values)
    curve = train_policy(policy, demos, hyper)
    return policy, curve


def train_caption_model(demos, vocab, hyper: TrainConfig,
                        lm_values=None, backbone_values=None
                        ) -> Tuple[PlannerPolicy, List[float]]:
    """Stage one of the caption baseline: an image-captioning model built
    from the LM with a visual prompt, trained on ground-truth captions."""
    policy = build_policy("vp2", vocab, hyper, lm_values=lm_values,
                          backbone_values=backbone_values)
    policy.kind = "caption-model"
    prompt_ids = vocab.encode(env.CAPTION_PROMPT)
    seen: Dict[bytes, bool] = {}
    samples = []
    for d in demos:
        for s in d.steps:
            key = s.observation.tobytes()
            if key in seen:
                continue
            seen[key] = True
            samples.append(Sample(goal_ids=prompt_ids, steps=[],
                                  final_obs=("img", s.observation),
                                  target=vocab.encode(s.caption) + [V.EOS]))
    lr_map, wd_map = planner_rate_maps(policy.store, hyper)
    curve = run_training(hyper, samples,
                         lambda b: batch_loss(policy, b),
                         policy.store, lr_map, wd_map,
                         length_key=_sample_length(policy))
    return policy, curve


def predict_caption_ids(caption_model: PlannerPolicy,
                        obs: np.ndarray, max_len: int = 24) -> List[int]:
    lm, voc = caption_model.lm, caption_model.vocab
    cxt = T.concat([lm.embed_tokens(voc.encode(env.CAPTION_PROMPT)),
                    lm.embed_tokens([V.SEP]),
                    encode_observation(caption_model.backbone,
                                       caption_model.projector, obs)])
    return lm.generate_greedy(cxt, max_len=max_len)


def train_captions_planner(demos, vocab, hyper: TrainConfig,
                           lm_values=None, backbone_values=None
                           ) -> Tuple[PlannerPolicy, List[float]]:
    """Two-stage caption baseline: train a captioning model (epochs=10),
    then a separate planner over its predicted captions (epochs=20)."""
    if hyper.demo_cap is not None:
        demos = list(demos)[:hyper.demo_cap]
    cap_hyper = dataclasses.replace(hyper, epochs=10)
    caption_model, _ = train_caption_model(demos, vocab, cap_hyper,
                                           lm_values=lm_values,
                                           backbone_values=backbone_values)
    plan_hyper = dataclasses.replace(hyper, epochs=20)
    policy = build_policy("captions", vocab, plan_hyper, lm_values=lm_values,
                          caption_model=caption_model)
    curve = train_policy(policy, demos, plan_hyper)
    return policy, curve


# ------------------------------------------------------------- SayCan

def saycan_score(lm: TransformerLM, p_aff: float, logprob: float) -> float:
    """Eq-style ranking score: LM action probability times affordance."""
    return float(np.exp(logprob)) * p_aff


def _text_context(policy: PlannerPolicy, goal: str,
                  act_list: Sequence[str]) -> torch.Tensor:
    spec = ContextSpec(goal_ids=policy.vocab.encode(goal),
                       steps=[(None, policy.vocab.encode(a)) for a in act_list],
                       final_obs=None, task_block=policy.task_block,
                       max_embeddings=policy.max_ctx)
    spec = trim_context(spec, bank=policy.bank)
    seq, _ = assemble_context(policy.lm, spec, policy.bank)
    return seq


def select_action_saycan(policy: PlannerPolicy, goal: str,
                         obs_list: Sequence[np.ndarray],
                         act_list: Sequence[str], mode: str,
                         affordable: Optional[Set[str]] = None) -> str:
    """Oracle mode scores the exact affordable set; trained mode rescored
    the top-k beam candidates with the affordance classifier. Ties break
    lexicographically on token ids; empty candidate sets fall back to done."""
    voc = policy.vocab
    cxt = _text_context(policy, goal, act_list)
    if mode == "oracle":
        cands = sorted(affordable or ())
        p_affs = [1.0] * len(cands)
    else:
        cands = policy.rank_actions(goal, act_list, k=policy.decode_k)
        cands = [c for c in cands if c.strip()]
        if not cands:
            return "done"
        obs = obs_list[-1]
        p_affs = [policy.affordance.p_valid(obs, c) for c in cands]
    if not cands:
        return "done"
    targets = [voc.encode(c) + [V.EOS] for c in cands]
    logprobs = policy.lm.sequence_logprob_batch(cxt, targets)
    scored = sorted(
        zip(cands, targets, logprobs, p_affs),
        key=lambda z: (-saycan_score(policy.lm, z[3], z[2]), z[1]))
    return scored[0][0]


# ------------------------------------------------------------- affordance

class AffordanceClassifier:
    """LM-based binary classifier emitting "valid"/"invalid" over a
    (visual prompt, action) context; the two token probabilities are
    renormalized to sum to one."""

    def __init__(self, vocab, hyper: TrainConfig,
                 lm_values=None, backbone_values=None):
        rng = np.random.default_rng([0xAFC, hyper.seed])
        self.vocab = vocab
        self.store = ParamStore()
        cfg = LMConfig(vocab_size=len(vocab))
        self.lm = TransformerLM(cfg, self.store, rng)
        if lm_values:
            self.store.load_values({k: v for k, v in lm_values.items()
                                    if k.startswith("lm.")})
        self.backbone = VisualBackbone(self.store, rng)
        if backbone_values:
            self.store.load_values({k: v for k, v in backbone_values.items()
                                    if k.startswith("vision.backbone.")})
        self.backbone.freeze()
        self.projector = PromptProjector(self.store, rng, m=10,
                                         embed_dim=cfg.embed_dim)
        self.max_ctx = hyper.max_context_embeddings
        self.valid_id = vocab.encode("valid")[0]
        self.invalid_id = vocab.encode("invalid")[0]
        self._prompt_ids = vocab.encode(env.AFFORDANCE_PROMPT)

    def _contexts(self, pairs: Sequence[Tuple[np.ndarray, str]]) -> List[torch.Tensor]:
        feats = torch.stack([self.backbone.cached_features(o)
                             for o, _ in pairs])
        blocks = self.projector(feats)
        sep = self.lm.embed_tokens([V.SEP])
        out = []
        for j, (_, action) in enumerate(pairs):
            out.append(T.concat([
                self.lm.embed_tokens(self._prompt_ids), sep, blocks[j], sep,
                self.lm.embed_tokens(self.vocab.encode(action))]))
        return out

    def _pair_logits(self, pairs) -> torch.Tensor:
        contexts = self._contexts(pairs)
        stacked = T.pad_stack(contexts)
        logits = self.lm.forward_logits(stacked)
        rows = torch.stack([logits[b, len(c) - 1] for b, c in enumerate(contexts)])
        return rows[:, [self.valid_id, self.invalid_id]]

    def batch_loss(self, batch: Sequence[AffordanceExample]) -> Tuple[torch.Tensor, float]:
        two = self._pair_logits([(e.observation, e.action) for e in batch])
        labels = torch.as_tensor([0 if e.label == "valid" else 1
                                  for e in batch], dtype=torch.long)
        loss = T.cross_entropy_with_logits(two, labels, reduction="mean")
        return loss, float(loss.detach())

    def p_valid(self, obs: np.ndarray, action: str) -> float:
        with torch.no_grad():
            two = self._pair_logits([(obs, action)])
        return float(torch.softmax(two[0], dim=-1)[0])

    def accuracy(self, examples: Sequence[AffordanceExample],
                 batch_size: int = 64) -> float:
        correct = 0
        with torch.no_grad():
            for lo in range(0, len(examples), batch_size):
                chunk = examples[lo:lo + batch_size]
                two = self._pair_logits([(e.observation, e.action)
                                         for e in chunk])
                pred = two.argmax(dim=-1)
                truth = torch.as_tensor([0 if e.label == "valid" else 1
                                         for e in chunk])
                correct += int((pred == truth).sum())
        return correct / len(examples)


def train_affordance(examples: Sequence[AffordanceExample], vocab,
                     hyper: TrainConfig, lm_values=None, backbone_values=None,
                     holdout_frac: float = 0.1
                     ) -> Tuple[AffordanceClassifier, List[float], float]:
    """Train the valid/invalid classifier (paper budget: 2 epochs) and
    report held-out accuracy."""
    clf = AffordanceClassifier(vocab, hyper, lm_values=lm_values,
                               backbone_values=backbone_values)
    rng = np.random.default_rng([0xAF2, hyper.seed])
    order = rng.permutation(len(examples))
    n_hold = max(1, int(len(examples) * holdout_frac))
    held = [examples[int(i)] for i in order[:n_hold]]
    train = [examples[int(i)] for i in order[n_hold:]]
    lr_map, wd_map = planner_rate_maps(clf.store, hyper)
    curve = run_training(hyper, train, clf.batch_loss, clf.store,
                         lr_map, wd_map)
    return clf, curve, clf.accuracy(held)


# ------------------------------------------------------------- persistence

def _vocab_sha(vocab) -> str:
    return hashlib.sha256(
        "\n".join(vocab.id_to_token).encode()).hexdigest()[:16]


def save_policy(policy: PlannerPolicy, path, train_config: Optional[TrainConfig] = None) -> None:
    """Parameter checkpoint plus a key=value manifest describing how to
    rebuild the bundle (kind, decoding settings, vocabulary hash, and the
    training configuration it was produced with)."""
    from .params import save_checkpoint
    save_checkpoint(path, policy.store.values())
    lines = [
        f"kind = {policy.kind}",
        f"decode_k = {policy.decode_k}",
        f"max_action_tokens = {MAX_ACTION_TOKENS}",
        f"max_ctx = {policy.max_ctx}",
        f"prompt_size = {policy.projector.m if policy.projector else 0}",
        f"task_block = {policy.task_block or ''}",
        f"frozen_lm = {int(bool(policy.store.frozen and any(n.startswith('lm.') for n in policy.store.frozen)))}",
        f"vocab_size = {len(policy.vocab)}",
        f"vocab_sha = {_vocab_sha(policy.vocab)}",
        f"aux_blocks = {','.join(sorted(n for n in policy.bank.block_names() if n.startswith('task_')))}",
    ]
    if train_config is not None:
        for f in dataclasses.fields(train_config):
            lines.append(f"train.{f.name} = {getattr(train_config, f.name)}")
    with open(str(path) + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if policy.caption_model is not None:
        save_policy(policy.caption_model, str(path) + ".caption")
    if policy.affordance is not None:
        save_affordance(policy.affordance, str(path) + ".affordance")


def _read_manifest(path) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("["):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def load_policy(path, vocab) -> PlannerPolicy:
    """Rebuild a saved policy. The vocabulary must hash-match the one the
    checkpoint was trained with."""
    from .params import load_checkpoint
    man = _read_manifest(str(path) + ".manifest")
    if man["vocab_sha"] != _vocab_sha(vocab):
        raise ValueError("vocabulary does not match the checkpoint manifest")
    kind = man["kind"]
    hyper = TrainConfig(max_context_embeddings=int(man["max_ctx"]))
    aux_blocks = [b for b in man.get("aux_blocks", "").split(",") if b]
    aux = None
    if any(b != "frozen_prefix" for b in aux_blocks):
        tasks = tuple(sorted(
            {"task_invdyn": "inv-dyn", "task_captions": "captions",
             "task_goalpred": "goal-pred"}[b]
            for b in aux_blocks if b.startswith("task_") and b != "task_action"))
        aux = AuxTaskConfig(tasks=tasks)
    policy = build_policy(kind, vocab, hyper,
                          prompt_size=max(int(man["prompt_size"]), 1),
                          aux=aux, frozen_lm=man.get("frozen_lm") == "1")
    policy.decode_k = int(man["decode_k"])
    policy.store.load_values(load_checkpoint(path))
    caption_path = str(path) + ".caption"
    if kind == "captions":
        policy.caption_model = load_policy(caption_path, vocab)
    affordance_path = str(path) + ".affordance"
    if kind == "saycan-trained":
        policy.affordance = load_affordance(affordance_path, vocab)
    return policy


def save_affordance(clf: AffordanceClassifier, path) -> None:
    from .params import save_checkpoint
    save_checkpoint(path, clf.store.values())
    with open(str(path) + ".manifest", "w", encoding="utf-8") as fh:
        fh.write(f"kind = affordance\nvocab_sha = {_vocab_sha(clf.vocab)}\n"
                 f"max_ctx = {clf.max_ctx}\n")


def load_affordance(path, vocab) -> AffordanceClassifier:
    from .params import load_checkpoint
    man = _read_manifest(str(path) + ".manifest")
    if man["vocab_sha"] != _vocab_sha(vocab):
        raise ValueError("vocabulary does not match the checkpoint manifest")
    clf = AffordanceClassifier(
        vocab, TrainConfig(max_context_embeddings=int(man["max_ctx"])))
    clf.store.load_values(load_checkpoint(path))
    return clf
