"""Assembly and trimming of the interleaved planner context.

A context is goal text, then alternating observation-prompt and action
segments, ending with the current observation. Segments are separated by
SEP embeddings; an optional task-embedding block is prepended when
training with auxiliary objectives. When a budget is exceeded, whole
(observation, action) pairs are dropped oldest-first so the context stays
well formed.
"""

from __future__ import annotations

import dataclasses
from typing import List, Optional, Sequence, Tuple

import torch

from . import tensorops as T
from . import vocab as V
from .lm import SoftPromptBank, TransformerLM

DEFAULT_BUDGET = 256


class ContextBudgetError(ValueError):
    """Assembled context exceeds the embedding budget; trim first."""


@dataclasses.dataclass
class ContextSpec:
    goal_ids: List[int]
    steps: List[Tuple[Optional[torch.Tensor], List[int]]]  # (obs (m,E), action ids)
    final_obs: Optional[torch.Tensor]  # (m,E) for the current step
    task_block: Optional[str] = None  # SoftPromptBank block name
    max_embeddings: int = DEFAULT_BUDGET


def _segment_lengths(spec: ContextSpec,
                     bank: Optional[SoftPromptBank]) -> List[Tuple[str, int]]:
    """(tag, content length) for each non-empty segment, in context order."""
    segs: List[Tuple[str, int]] = []
    if spec.task_block is not None:
        if bank is None:
            raise ValueError("task block requested without a prompt bank")
        segs.append(("task", bank.get(spec.task_block).shape[0]))
    if spec.goal_ids:
        segs.append(("goal", len(spec.goal_ids)))
    for i, (obs, act) in enumerate(spec.steps):
        if obs is not None and obs.shape[0] > 0:
            segs.append((f"obs{i}", obs.shape[0]))
        if act:
            segs.append((f"act{i}", len(act)))
    if spec.final_obs is not None and spec.final_obs.shape[0] > 0:
        segs.append(("obs_final", spec.final_obs.shape[0]))
    return segs


def context_length(spec: ContextSpec,
                   bank: Optional[SoftPromptBank] = None) -> int:
    """Total assembled length including the SEP between every segment pair."""
    segs = _segment_lengths(spec, bank)
    if not segs:
        return 0
    return sum(n for _, n in segs) + len(segs) - 1


def assemble_context(lm: TransformerLM, spec: ContextSpec,
                     bank: Optional[SoftPromptBank] = None,
                     ) -> Tuple[torch.Tensor, List[Tuple[str, int, int]]]:
    """Build the (L, E) embedding sequence plus segment tags
    (tag, start, end) for order verification. Raises if over budget."""
    length = context_length(spec, bank)
    if length > spec.max_embeddings:
        raise ContextBudgetError(
            f"context of {length} embeddings exceeds budget "
            f"{spec.max_embeddings}; call trim_context first")
    sep = lm.embed_tokens([V.SEP])
    parts: List[torch.Tensor] = []
    tags: List[Tuple[str, int, int]] = []
    pos = 0

    def push(tag: str, emb: torch.Tensor) -> None:
        nonlocal pos
        if parts:
            parts.append(sep)
            pos += 1
        parts.append(emb)
        tags.append((tag, pos, pos + emb.shape[0]))
        pos += emb.shape[0]

    if spec.task_block is not None:
        push("task", bank.get(spec.task_block))
    if spec.goal_ids:
        push("goal", lm.embed_tokens(spec.goal_ids))
    for i, (obs, act) in enumerate(spec.steps):
        if obs is not None and obs.shape[0] > 0:
            push(f"obs{i}", obs)
        if act:
            push(f"act{i}", lm.embed_tokens(act))
    if spec.final_obs is not None and spec.final_obs.shape[0] > 0:
        push("obs_final", spec.final_obs)
    if not parts:
        raise ValueError("empty context")
    return T.concat(parts), tags


def trim_context(spec: ContextSpec, budget: Optional[int] = None,
                 bank: Optional[SoftPromptBank] = None) -> ContextSpec:
    """Drop oldest (observation, action) pairs as whole units until the
    assembled context fits the budget. The goal and the latest observation
    are never dropped."""
    budget = spec.max_embeddings if budget is None else budget
    out = dataclasses.replace(spec, steps=list(spec.steps),
                              max_embeddings=budget)
    while context_length(out, bank) > budget and out.steps:
        out.steps = out.steps[1:]
    if context_length(out, bank) > budget:
        raise ContextBudgetError(
            f"minimum viable context of {context_length(out, bank)} "
            f"embeddings exceeds budget {budget}")
    return out
