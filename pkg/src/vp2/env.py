"""Deterministic gridworld household environment with pixel observations,
text actions, oracle affordances, template captions, and ID/OD task splits.

A scene is a 5x5 room holding 6-9 receptacles (at most one per type, so
text actions need no numeric identifiers). Openable receptacles hide
their contents until opened, which is what makes observations carry
information the goal text does not.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

GRID = 5
EPISODE_CAP = 30
IMG_H, IMG_W = 32, 32

RECEP_TYPES = ["cabinet", "countertop", "desklamp", "drawer", "fridge",
               "garbagecan", "microwave", "sink"]
OPENABLE = {"cabinet", "drawer", "fridge", "microwave"}
HOLDERS = [r for r in RECEP_TYPES if r != "desklamp"]

OBJ_TYPES = ["apple", "book", "bread", "cloth", "cup", "egg",
             "knife", "mug", "pencil", "plate", "soap", "tomato"]

TASK_TYPES = ["pick-place", "heat-place", "cool-place", "clean-place",
              "examine-in-light", "pick-two-place"]
TOOL_RECEP = {"heat-place": "microwave", "cool-place": "fridge",
              "clean-place": "sink", "examine-in-light": "desklamp"}

RECEP_COLORS = {
    "cabinet": (150, 100, 60), "countertop": (200, 180, 140),
    "desklamp": (240, 220, 100), "drawer": (170, 130, 90),
    "fridge": (200, 200, 230), "garbagecan": (70, 100, 70),
    "microwave": (120, 120, 135), "sink": (90, 130, 190),
}
OBJ_COLORS = {
    "apple": (220, 30, 30), "book": (60, 40, 170), "bread": (210, 170, 100),
    "cloth": (235, 235, 235), "cup": (40, 210, 210), "egg": (250, 245, 200),
    "knife": (140, 160, 170), "mug": (140, 50, 170), "pencil": (250, 150, 30),
    "plate": (180, 220, 250), "soap": (90, 230, 90), "tomato": (255, 110, 60),
}
_INTERIOR = (40, 40, 40)
_BACKGROUND = (25, 25, 25)
_AGENT = (255, 255, 255)


class ActionParseError(ValueError):
    """Action text does not match the action grammar."""


@dataclasses.dataclass
class TaskSpec:
    task_type: str
    obj: str
    target: str
    scene_id: int
    split: str

    @property
    def goal(self) -> str:
        t = self.task_type
        if t == "pick-place":
            return f"put a {self.obj} in {self.target}"
        if t == "heat-place":
            return f"heat a {self.obj} and put it in {self.target}"
        if t == "cool-place":
            return f"cool a {self.obj} and put it in {self.target}"
        if t == "clean-place":
            return f"clean a {self.obj} and put it in {self.target}"
        if t == "examine-in-light":
            return f"examine a {self.obj} under the desklamp"
        if t == "pick-two-place":
            return f"put two {self.obj} in {self.target}"
        raise ValueError(f"unknown task type {t!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TaskSpec":
        return cls(**json.loads(line))


@dataclasses.dataclass
class Receptacle:
    recep_type: str
    cell: Tuple[int, int]
    openable: bool
    open: bool


@dataclasses.dataclass
class ObjInstance:
    obj_type: str
    index: int
    location: str  # receptacle type, or "inventory"
    heated: bool = False
    cooled: bool = False
    cleaned: bool = False
    examined: bool = False


@dataclasses.dataclass
class WorldState:
    receptacles: List[Receptacle]  # scene (search) order
    objects: List[ObjInstance]
    agent_at: Optional[str]
    steps: int = 0

    def clone(self) -> "WorldState":
        return WorldState(
            receptacles=[dataclasses.replace(r) for r in self.receptacles],
            objects=[dataclasses.replace(o) for o in self.objects],
            agent_at=self.agent_at, steps=self.steps)

    def recep(self, recep_type: str) -> Optional[Receptacle]:
        for r in self.receptacles:
            if r.recep_type == recep_type:
                return r
        return None

    def contents(self, recep_type: str) -> List[ObjInstance]:
        objs = [o for o in self.objects if o.location == recep_type]
        return sorted(objs, key=lambda o: (o.obj_type, o.index))

    def contents_visible(self, r: Receptacle) -> bool:
        return r.open or not r.openable

    def held(self) -> Optional[ObjInstance]:
        for o in self.objects:
            if o.location == "inventory":
                return o
        return None


def build_scene(task: TaskSpec) -> WorldState:
    """Deterministic scene for a task: required receptacles present, task
    object placed in a non-target holder, a few distractor objects."""
    rng = np.random.default_rng([0x5CE7E, task.scene_id])
    required = {task.target}
    tool = TOOL_RECEP.get(task.task_type)
    if tool:
        required.add(tool)
    extras = [r for r in RECEP_TYPES if r not in required]
    n_receps = int(rng.integers(6, 10))
    n_extra = min(len(extras), max(0, n_receps - len(required)))
    chosen = list(required) + list(
        rng.choice(extras, size=n_extra, replace=False))
    chosen = sorted(chosen)
    order = list(rng.permutation(chosen))
    cells = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) != (2, 2)]
    cell_idx = rng.choice(len(cells), size=len(order), replace=False)
    receps = [Receptacle(recep_type=t, cell=cells[int(i)],
                         openable=t in OPENABLE, open=False)
              for t, i in zip(order, cell_idx)]

    holders = [r.recep_type for r in receps if r.recep_type in HOLDERS]
    place_pool = [h for h in holders if h != task.target] or holders
    n_inst = 2 if task.task_type == "pick-two-place" else 1
    objects = [ObjInstance(obj_type=task.obj, index=i,
                           location=str(rng.choice(place_pool)))
               for i in range(n_inst)]
    distract_types = [o for o in OBJ_TYPES if o != task.obj]
    n_distract = int(rng.integers(2, 5))
    for i, ot in enumerate(rng.choice(distract_types, size=n_distract,
                                      replace=False)):
        objects.append(ObjInstance(obj_type=str(ot), index=0,
                                   location=str(rng.choice(holders))))
    return WorldState(receptacles=receps, objects=objects, agent_at=None)


def reset(task: TaskSpec) -> Tuple[WorldState, np.ndarray, str]:
    state = build_scene(task)
    return state, render_observation(state), task.goal


# ---------------------------------------------------------------- actions

def parse_action(text: str) -> Tuple[str, ...]:
    """Parse an action string into a verb tuple, or raise ActionParseError.
    Object and receptacle words must be known types."""
    words = text.strip().lower().split()
    if words == ["done"]:
        return ("done",)
    if len(words) == 3 and words[0] == "go" and words[1] == "to":
        if words[2] not in RECEP_TYPES:
            raise ActionParseError(f"unknown receptacle {words[2]!r}")
        return ("go", words[2])
    if len(words) == 2 and words[0] in ("open", "close", "use"):
        if words[1] not in RECEP_TYPES:
            raise ActionParseError(f"unknown receptacle {words[1]!r}")
        return (words[0], words[1])
    if len(words) == 4 and words[0] in ("take", "put", "heat", "cool", "clean"):
        verb, obj, prep, recep = words
        expected = {"take": "from", "put": "in", "heat": "with",
                    "cool": "with", "clean": "with"}[verb]
        if prep != expected:
            raise ActionParseError(f"expected {expected!r} in {text!r}")
        if obj not in OBJ_TYPES:
            raise ActionParseError(f"unknown object {obj!r}")
        if recep not in RECEP_TYPES:
            raise ActionParseError(f"unknown receptacle {recep!r}")
        return (verb, obj, recep)
    raise ActionParseError(f"cannot parse action {text!r}")


def all_grammar_actions() -> List[str]:
    """Every string generated by the action grammar over the global types."""
    out = ["done"]
    for r in RECEP_TYPES:
        out += [f"go to {r}", f"open {r}", f"close {r}", f"use {r}"]
    for o in OBJ_TYPES:
        for r in RECEP_TYPES:
            out += [f"take {o} from {r}", f"put {o} in {r}",
                    f"heat {o} with {r}", f"cool {o} with {r}",
                    f"clean {o} with {r}"]
    return out


def affordable_actions(state: WorldState) -> Set[str]:
    """The exact set of currently executable action strings."""
    acts: Set[str] = {"done"}
    for r in state.receptacles:
        if r.recep_type != state.agent_at:
            acts.add(f"go to {r.recep_type}")
    at = state.recep(state.agent_at) if state.agent_at else None
    if at is None:
        return acts
    held = state.held()
    if at.openable:
        acts.add(f"close {at.recep_type}" if at.open else f"open {at.recep_type}")
    if state.contents_visible(at):
        if held is None:
            for o in state.contents(at.recep_type):
                acts.add(f"take {o.obj_type} from {at.recep_type}")
        elif at.recep_type in HOLDERS:
            acts.add(f"put {held.obj_type} in {at.recep_type}")
    if held is not None:
        tool_verbs = {"microwave": "heat", "fridge": "cool", "sink": "clean"}
        verb = tool_verbs.get(at.recep_type)
        if verb:
            acts.add(f"{verb} {held.obj_type} with {at.recep_type}")
    if at.recep_type == "desklamp":
        acts.add("use desklamp")
    return acts


def step(state: WorldState, action: str,
         render: bool = True) -> Tuple[WorldState, Optional[np.ndarray], bool]:
    """Apply one text action. Unaffordable actions are no-ops apart from the
    step counter; unparseable text raises ActionParseError instead."""
    parsed = parse_action(action)
    canonical = " ".join(action.strip().lower().split())
    nxt = state.clone()
    nxt.steps += 1
    if canonical not in affordable_actions(state):
        return nxt, render_observation(nxt) if render else None, False
    verb = parsed[0]
    if verb == "go":
        nxt.agent_at = parsed[1]
    elif verb == "open":
        nxt.recep(parsed[1]).open = True
    elif verb == "close":
        nxt.recep(parsed[1]).open = False
    elif verb == "take":
        _, obj, recep = parsed
        inst = next(o for o in nxt.contents(recep) if o.obj_type == obj)
        inst.location = "inventory"
    elif verb == "put":
        _, obj, recep = parsed
        nxt.held().location = recep
    elif verb == "heat":
        held = nxt.held()
        held.heated, held.cooled = True, False
    elif verb == "cool":
        held = nxt.held()
        held.cooled, held.heated = True, False
    elif verb == "clean":
        nxt.held().cleaned = True
    elif verb == "use":
        held = nxt.held()
        if held is not None:
            held.examined = True
    # "done" has no state effect; the rollout loop interprets it.
    return nxt, render_observation(nxt) if render else None, True


def is_success(state: WorldState, task: TaskSpec) -> bool:
    t = task.task_type
    placed = [o for o in state.objects
              if o.obj_type == task.obj and o.location == task.target]
    if t == "pick-place":
        return len(placed) >= 1
    if t == "heat-place":
        return any(o.heated for o in placed)
    if t == "cool-place":
        return any(o.cooled for o in placed)
    if t == "clean-place":
        return any(o.cleaned for o in placed)
    if t == "examine-in-light":
        return any(o.examined for o in state.objects if o.obj_type == task.obj)
    if t == "pick-two-place":
        return len(placed) >= 2
    raise ValueError(f"unknown task type {t!r}")


# ---------------------------------------------------------------- rendering

def _tint(color: Tuple[int, int, int], o: ObjInstance) -> Tuple[int, int, int]:
    r, g, b = color
    if o.heated:
        r += 60
    if o.cooled:
        b += 60
    if o.cleaned:
        r += 40; g += 40; b += 40
    if o.examined:
        g += 60
    return (min(r, 255), min(g, 255), min(b, 255))


def render_observation(state: WorldState) -> np.ndarray:
    """Deterministic 32x32x3 render: room map with an agent marker and an
    inventory strip. Contents of closed receptacles are not drawn."""
    img = np.zeros((IMG_H, IMG_W, 3), dtype=np.uint8)
    img[:, :] = _BACKGROUND
    slots = [(1, 1), (1, 3), (3, 1), (3, 3)]
    for recep in state.receptacles:
        rr, cc = recep.cell
        y, x = rr * 6, cc * 6
        img[y:y + 6, x:x + 6] = RECEP_COLORS[recep.recep_type]
        if state.contents_visible(recep):
            img[y + 1:y + 5, x + 1:x + 5] = _INTERIOR
            for (dy, dx), o in zip(slots, state.contents(recep.recep_type)):
                img[y + dy:y + dy + 2, x + dx:x + dx + 2] = \
                    _tint(OBJ_COLORS[o.obj_type], o)
    at = state.recep(state.agent_at) if state.agent_at else None
    ar, ac = at.cell if at else (2, 2)
    y, x = ar * 6, ac * 6
    img[y, x:x + 6] = _AGENT
    img[y + 5, x:x + 6] = _AGENT
    img[y:y + 6, x] = _AGENT
    img[y:y + 6, x + 5] = _AGENT
    held = state.held()
    img[30:32, :] = _tint(OBJ_COLORS[held.obj_type], held) if held else (10, 10, 10)
    return img


def observation_to_ppm(obs: np.ndarray, path) -> None:
    """Export an observation as a binary PPM for debugging."""
    with open(path, "wb") as f:
        f.write(f"P6 {obs.shape[1]} {obs.shape[0]} 255\n".encode())
        f.write(obs.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- captions

def _describe(o: ObjInstance) -> str:
    adj = ""
    if o.heated:
        adj += "hot "
    if o.cooled:
        adj += "cold "
    if o.cleaned:
        adj += "clean "
    return f"a {adj}{o.obj_type}"


def caption(state: WorldState) -> str:
    """Template caption of the faced receptacle and its visible contents."""
    at = state.recep(state.agent_at) if state.agent_at else None
    if at is None:
        parts = ["you see the room."]
    else:
        parts = [f"you see a {at.recep_type}."]
        parts.append("it is open." if state.contents_visible(at) else "it is closed.")
        if state.contents_visible(at):
            objs = state.contents(at.recep_type)
            if objs:
                parts.append("in it you see " +
                             ", ".join(_describe(o) for o in objs) + ".")
    held = state.held()
    if held is not None:
        parts.append(f"you are carrying {_describe(held)}.")
    return " ".join(parts)


# ---------------------------------------------------------------- tasks

def _all_combos() -> List[Tuple[str, str, str]]:
    combos = []
    for obj in OBJ_TYPES:
        for t in ("pick-place", "heat-place", "cool-place", "clean-place",
                  "pick-two-place"):
            for target in HOLDERS:
                if target == TOOL_RECEP.get(t):
                    continue
                combos.append((t, obj, target))
        combos.append(("examine-in-light", obj, "desklamp"))
    return combos


_SPLIT_BASE = {"train": 0, "eval-ID": 4_000_000, "eval-OD": 8_000_000}


def combo_pools(seed: int, _advance: Optional[np.random.Generator] = None,
                ) -> Tuple[List[Tuple[str, str, str]], List[Tuple[str, str, str]]]:
    """(in-distribution pool, held-out pool): a seeded permutation of the
    combination space with the first quarter held out for eval-OD."""
    rng = _advance if _advance is not None \
        else np.random.default_rng([0x7A5C, seed])
    combos = _all_combos()
    perm = rng.permutation(len(combos))
    n_od = len(combos) // 4
    od_pool = [combos[int(i)] for i in perm[:n_od]]
    id_pool = [combos[int(i)] for i in perm[n_od:]]
    return id_pool, od_pool


def generate_tasks(seed: int, counts: Dict[str, int]) -> List[TaskSpec]:
    """Deterministic task lists. eval-OD draws from a held-out quarter of
    the (task type, object, target) combination space and from scene ids
    disjoint from the other splits."""
    for split, n in counts.items():
        if split not in _SPLIT_BASE:
            raise ValueError(f"unknown split {split!r}")
        if n < 1:
            raise ValueError("counts must be >= 1")
    rng = np.random.default_rng([0x7A5C, seed])
    id_pool, od_pool = combo_pools(seed, _advance=rng)
    tasks: List[TaskSpec] = []
    for split in ("train", "eval-ID", "eval-OD"):
        if split not in counts:
            continue
        pool = od_pool if split == "eval-OD" else id_pool
        base = _SPLIT_BASE[split] + (seed % 1000) * 4000
        for i in range(counts[split]):
            t, obj, target = pool[int(rng.integers(0, len(pool)))]
            tasks.append(TaskSpec(task_type=t, obj=obj, target=target,
                                  scene_id=base + i, split=split))
    return tasks


def write_tasks(tasks: Sequence[TaskSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(t.to_json() + "\n")


def read_tasks(path) -> List[TaskSpec]:
    with open(path, encoding="utf-8") as f:
        return [TaskSpec.from_json(line) for line in f if line.strip()]


# ---------------------------------------------------------------- vocabulary

CAPTION_PROMPT = "your task is to : caption the following observation"
AFFORDANCE_PROMPT = "your task is to : predict whether the following action is valid"
AFFORDANCE_TOKENS = ("valid", "invalid")


def text_corpus() -> List[str]:
    """Every word the environment, goals, captions, prompts, and the
    pretraining corpus templates can emit. Building the vocabulary from
    this keeps all generated text UNK-free."""
    lines = list(all_grammar_actions())
    for t, obj, target in _all_combos():
        lines.append(TaskSpec(t, obj, target, 0, "train").goal)
    for r in RECEP_TYPES:
        lines.append(f"you see a {r}. it is open. it is closed.")
        lines.append(f"{r}, a {r}.")
    for o in OBJ_TYPES:
        lines.append(f"in it you see a hot cold clean {o}. a {o},")
        lines.append(f"you are carrying a {o}.")
    lines.append("you see the room.")
    lines.append(CAPTION_PROMPT)
    lines.append(AFFORDANCE_PROMPT)
    lines.extend(AFFORDANCE_TOKENS)
    lines.append("task steps step and then room nothing")
    lines.append(" ".join(str(n) for n in range(1, EPISODE_CAP + 1)))
    return lines
