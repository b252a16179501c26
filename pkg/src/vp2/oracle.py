"""Scripted expert planner and demonstration generator.

The expert searches receptacles in scene order until it finds the task
object, applies the required tool step, places, and signals done. Search
length varies with where generation hid the object, which is what gives
demonstrations their search-then-act structure.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np

from . import env
from .env import TaskSpec, WorldState


class OracleError(RuntimeError):
    """The scripted expert could not complete a task it was given."""


@dataclasses.dataclass
class DemoStep:
    observation: np.ndarray  # uint8 HxWx3, rendered before the action
    action: str
    caption: str
    affordable: List[str]  # sorted


@dataclasses.dataclass
class Demonstration:
    task: TaskSpec
    goal: str
    steps: List[DemoStep]
    success: bool

    @property
    def actions(self) -> List[str]:
        return [s.action for s in self.steps]


def solve(task: TaskSpec) -> List[str]:
    """Expert action sequence for a generated task, ending in "done"."""
    state = env.build_scene(task)
    actions: List[str] = []

    def act(a: str) -> None:
        nonlocal state
        state, _, ok = env.step(state, a, render=False)
        if not ok:
            raise OracleError(f"expert action {a!r} was not executable")
        actions.append(a)

    inspected: Set[str] = set()

    def search_and_take() -> None:
        for r in state.receptacles:
            rt = r.recep_type
            if rt == task.target and task.task_type != "examine-in-light":
                continue  # never pull an already-placed instance back out
            contains = any(o.obj_type == task.obj and o.location == rt
                           for o in state.objects)
            if rt in inspected and not contains:
                continue
            if state.agent_at != rt:
                act(f"go to {rt}")
            here = state.recep(rt)
            if here.openable and not here.open:
                act(f"open {rt}")
            inspected.add(rt)
            if contains:
                act(f"take {task.obj} from {rt}")
                return
        raise OracleError(f"no reachable {task.obj} instance")

    def place() -> None:
        if state.agent_at != task.target:
            act(f"go to {task.target}")
        tgt = state.recep(task.target)
        if tgt.openable and not tgt.open:
            act(f"open {task.target}")
        act(f"put {task.obj} in {task.target}")

    ttype = task.task_type
    if ttype == "pick-two-place":
        for _ in range(2):
            search_and_take()
            place()
    elif ttype == "examine-in-light":
        search_and_take()
        if state.agent_at != "desklamp":
            act("go to desklamp")
        act("use desklamp")
    else:
        search_and_take()
        tool = env.TOOL_RECEP.get(ttype)
        if tool:
            if state.agent_at != tool:
                act(f"go to {tool}")
            verb = {"microwave": "heat", "fridge": "cool", "sink": "clean"}[tool]
            act(f"{verb} {task.obj} with {tool}")
        place()
    act("done")
    if not env.is_success(state, task):
        raise OracleError(f"expert failed task {task.to_json()}")
    if state.steps > env.EPISODE_CAP:
        raise OracleError(f"expert exceeded the episode cap on {task.to_json()}")
    return actions


def generate_demos(tasks: Sequence[TaskSpec], seed: int = 0) -> List[Demonstration]:
    """Replay expert solutions, recording observation, caption, and the
    affordable set before every action. Fully deterministic; `seed` is only
    recorded in manifests."""
    demos = []
    for task in tasks:
        actions = solve(task)
        state, obs, goal = env.reset(task)
        steps = []
        for a in actions:
            steps.append(DemoStep(observation=obs, action=a,
                                  caption=env.caption(state),
                                  affordable=sorted(env.affordable_actions(state))))
            state, obs, ok = env.step(state, a)
            if not ok:
                raise OracleError(f"replay diverged at {a!r}")
        demos.append(Demonstration(task=task, goal=goal, steps=steps,
                                   success=env.is_success(state, task)))
    return demos


# ---------------------------------------------------------------- demo IO

def write_demos(demos: Sequence[Demonstration], path, seed: int = 0) -> None:
    """JSON-lines demo file (observations as base-16 raw RGB) plus a sidecar
    manifest with counts, seed, split tags, and a content hash."""
    with open(path, "w", encoding="utf-8") as f:
        for d in demos:
            rec = {
                "task": json.loads(d.task.to_json()),
                "goal": d.goal,
                "success": d.success,
                "steps": [{
                    "obs": s.observation.astype(np.uint8).tobytes().hex(),
                    "action": s.action,
                    "caption": s.caption,
                    "affordable": s.affordable,
                } for s in d.steps],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
    splits: dict = {}
    for d in demos:
        splits[d.task.split] = splits.get(d.task.split, 0) + 1
    manifest = {"count": len(demos), "seed": seed, "splits": splits,
                "sha256": digest}
    with open(str(path) + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_demos(path) -> List[Demonstration]:
    demos = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            steps = [DemoStep(
                observation=np.frombuffer(
                    bytes.fromhex(s["obs"]), dtype=np.uint8
                ).reshape(env.IMG_H, env.IMG_W, 3).copy(),
                action=s["action"], caption=s["caption"],
                affordable=list(s["affordable"])) for s in rec["steps"]]
            demos.append(Demonstration(task=TaskSpec(**rec["task"]),
                                       goal=rec["goal"], steps=steps,
                                       success=rec["success"]))
    return demos


# ------------------------------------------------------- affordance labels

@dataclasses.dataclass
class AffordanceExample:
    observation: np.ndarray
    action: str
    label: str  # "valid" | "invalid"


def _scene_grammar(demo: Demonstration) -> List[str]:
    """Grammar strings restricted to the entities of a demo's scene; these
    are the plausible-but-possibly-unaffordable actions an LM tends to emit."""
    state = env.build_scene(demo.task)
    receps = [r.recep_type for r in state.receptacles]
    objs = sorted({o.obj_type for o in state.objects})
    out = ["done"]
    for r in receps:
        out += [f"go to {r}", f"open {r}", f"close {r}"]
        if r == "desklamp":
            out.append(f"use {r}")
    for o in objs:
        for r in receps:
            out += [f"take {o} from {r}", f"put {o} in {r}"]
            verb = {"microwave": "heat", "fridge": "cool", "sink": "clean"}.get(r)
            if verb:
                out.append(f"{verb} {o} with {r}")
    return out


def make_affordance_examples(
        demos: Sequence[Demonstration],
        negatives_per_positive: int = 3,
        negative_source: str = "heuristic",
        planner=None,
        seed: int = 0) -> List[AffordanceExample]:
    """Observation-action-affordability triples from demo steps: every
    affordable action is a positive; negatives are sampled grammar-valid but
    unaffordable actions (heuristic) or high-likelihood unaffordable
    predictions of a trained observation-blind planner."""
    if negative_source not in ("heuristic", "planner-likelihood"):
        raise ValueError(f"unknown negative source {negative_source!r}")
    if negative_source == "planner-likelihood" and planner is None:
        raise ValueError("planner-likelihood negatives need a trained planner")
    rng = np.random.default_rng([0xAFF, seed])
    out: List[AffordanceExample] = []
    for demo in demos:
        grammar = _scene_grammar(demo)
        history: List[str] = []
        for s in demo.steps:
            afford = set(s.affordable)
            for a in s.affordable:
                out.append(AffordanceExample(s.observation, a, "valid"))
            n_neg = negatives_per_positive * len(afford)
            if negative_source == "heuristic":
                pool = [a for a in grammar if a not in afford]
                take = min(n_neg, len(pool))
                idx = rng.choice(len(pool), size=take, replace=False)
                negs = [pool[int(i)] for i in idx]
            else:
                ranked = planner.rank_actions(demo.goal, history,
                                              k=max(n_neg * 2, 10))
                negs = [a for a in ranked if a not in afford][:n_neg]
            for a in negs:
                out.append(AffordanceExample(s.observation, a, "invalid"))
            history.append(s.action)
    return out
