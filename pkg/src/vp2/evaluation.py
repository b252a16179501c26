"""Episode rollouts, split evaluation, and the ablation suite.

Success rates are reported raw and normalized by the scripted expert's
success rate on the same task list, so arms remain comparable if the
expert ever fails a task. The ablation suite trains every reported arm on
identical task splits and emits CSV plus a plain-text summary table.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import env
from .env import TaskSpec
from .oracle import Demonstration, solve

log = logging.getLogger(__name__)


@dataclasses.dataclass
class EpisodeResult:
    task: TaskSpec
    success: bool
    steps: int
    unexecuted: int
    parse_errors: int
    transcript: List[str]


class OraclePolicy:
    """Replays the scripted expert; used for normalization and sanity runs."""

    kind = "oracle"

    def __init__(self):
        self._plan: List[str] = []
        self._i = 0

    def begin_episode(self, task: TaskSpec) -> None:
        self._plan = solve(task)
        self._i = 0

    def select_action(self, goal, obs_list, act_list, affordable=None) -> str:
        if self._i >= len(self._plan):
            return "done"
        a = self._plan[self._i]
        self._i += 1
        return a


class RandomPolicy:
    """Uniform choice over the full action grammar; the floor baseline."""

    kind = "random"

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng([0x4A2, seed])
        self._grammar = env.all_grammar_actions()

    def select_action(self, goal, obs_list, act_list, affordable=None) -> str:
        return self._grammar[int(self._rng.integers(0, len(self._grammar)))]


def run_episode(policy, task: TaskSpec,
                cap: int = env.EPISODE_CAP) -> EpisodeResult:
    """Roll a policy in the environment. Unparseable or unaffordable
    actions consume a step and are appended to the history alongside a
    repeat of the unchanged observation; the episode ends on "done",
    success, or the step cap."""
    if hasattr(policy, "begin_episode"):
        policy.begin_episode(task)
    state, obs, goal = env.reset(task)
    obs_list, act_list = [obs], []
    transcript: List[str] = []
    unexecuted = parse_errors = steps = 0
    success = False
    while steps < cap:
        need_afford = getattr(policy, "kind", "") == "saycan-oracle"
        affordable = env.affordable_actions(state) if need_afford else None
        action = policy.select_action(goal, obs_list, act_list,
                                      affordable=affordable)
        transcript.append(action)
        steps += 1
        try:
            state, new_obs, executed = env.step(state, action)
        except env.ActionParseError:
            parse_errors += 1
            act_list.append(action)
            obs_list.append(obs_list[-1])
            continue
        if not executed:
            unexecuted += 1
        obs = new_obs
        if " ".join(action.lower().split()) == "done":
            success = env.is_success(state, task)
            break
        if env.is_success(state, task):
            success = True
            break
        act_list.append(action)
        obs_list.append(obs)
    return EpisodeResult(task=task, success=success, steps=steps,
                         unexecuted=unexecuted, parse_errors=parse_errors,
                         transcript=transcript)


def _worker_count() -> int:
    raw = os.environ.get("VP2_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


def evaluate_policy(policy, tasks: Sequence[TaskSpec]) -> List[EpisodeResult]:
    workers = _worker_count()
    stateful = hasattr(policy, "begin_episode")
    if workers > 1 and not stateful:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda t: run_episode(policy, t), tasks))
    return [run_episode(policy, t) for t in tasks]


def success_rate(results: Sequence[EpisodeResult]) -> float:
    return sum(r.success for r in results) / len(results)


@dataclasses.dataclass
class SplitReport:
    split: str
    per_seed_raw: Dict[int, float]
    oracle_rate: float

    @property
    def raw(self) -> float:
        return float(np.mean(list(self.per_seed_raw.values())))

    @property
    def normalized(self) -> float:
        return self.raw / self.oracle_rate if self.oracle_rate > 0 else 0.0

    def normalized_seed(self, seed: int) -> float:
        r = self.per_seed_raw[seed]
        return r / self.oracle_rate if self.oracle_rate > 0 else 0.0


def evaluate_split(policies_by_seed: Dict[int, object],
                   tasks: Sequence[TaskSpec], split: str,
                   oracle_rate: Optional[float] = None) -> SplitReport:
    """Mean success over run seeds, normalized by the expert's rate on the
    same tasks."""
    if oracle_rate is None:
        oracle_rate = success_rate(evaluate_policy(OraclePolicy(), tasks))
    per_seed = {seed: success_rate(evaluate_policy(p, tasks))
                for seed, p in policies_by_seed.items()}
    return SplitReport(split=split, per_seed_raw=per_seed,
                       oracle_rate=oracle_rate)


# ------------------------------------------------------------- suite

ARM_NAMES = [
    "vp2", "ignore", "captions", "saycan-oracle", "saycan-trained",
    "vp2-unaligned", "vp2-clipcap", "vp2-frozen",
    "vp2-m1", "vp2-m5", "vp2-m20",
    "vp2-aux-inv-dyn", "vp2-aux-captions", "vp2-aux-goal-pred",
    "vp2-samples-100", "vp2-samples-500", "vp2-samples-1000",
    "vp2-samples-100-scratch", "vp2-samples-500-scratch",
    "vp2-samples-1000-scratch", "vp2-samples-all-scratch",
]

PROMPT_SIZE_ARMS = {"vp2-m1": 1, "vp2-m5": 5, "vp2-m10": 10, "vp2-m20": 20}
SAMPLE_ARM_COUNTS = {"100": 100, "500": 500, "1000": 1000}


@dataclasses.dataclass
class ArmResult:
    arm: str
    reports: Dict[str, SplitReport]  # split -> report
    curves: Dict[int, List[float]]  # seed -> per-epoch loss


def run_ablation_suite(train_arm: Callable[[str, int], object],
                       tasks_by_split: Dict[str, List[TaskSpec]],
                       seeds: Sequence[int] = (0, 1),
                       arms: Optional[Sequence[str]] = None,
                       ) -> List[ArmResult]:
    """Train and evaluate every arm on identical splits. `train_arm(name,
    seed)` returns (policy, loss curve); the suite owns evaluation and
    oracle normalization so every arm shares the exact same task lists."""
    arms = list(arms or ARM_NAMES)
    oracle_rates = {
        split: success_rate(evaluate_policy(OraclePolicy(), tasks))
        for split, tasks in tasks_by_split.items() if split != "train"}
    out = []
    for arm in arms:
        policies, curves = {}, {}
        for seed in seeds:
            log.info("training arm %s seed %d", arm, seed)
            policies[seed], curves[seed] = train_arm(arm, seed)
        reports = {
            split: evaluate_split(policies, tasks, split,
                                  oracle_rate=oracle_rates[split])
            for split, tasks in tasks_by_split.items() if split != "train"}
        out.append(ArmResult(arm=arm, reports=reports, curves=curves))
    return out


# ------------------------------------------------------------- reporting

def results_csv(results: Sequence[ArmResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "split", "seed", "raw_success", "oracle_success",
                "normalized_success"])
    for r in results:
        for split in sorted(r.reports):
            rep = r.reports[split]
            for seed in sorted(rep.per_seed_raw):
                w.writerow([r.arm, split, seed,
                            f"{rep.per_seed_raw[seed]:.6f}",
                            f"{rep.oracle_rate:.6f}",
                            f"{rep.normalized_seed(seed):.6f}"])
    return buf.getvalue()


def _sample_curve_points(results: Sequence[ArmResult], full_count: int,
                         ) -> List[Tuple[int, str, str, float]]:
    points = []
    for r in results:
        name = r.arm
        if name == "vp2":
            count, pretrained = full_count, "yes"
        elif name == "vp2-samples-all-scratch":
            count, pretrained = full_count, "no"
        elif name.startswith("vp2-samples-"):
            tail = name[len("vp2-samples-"):]
            pretrained = "yes"
            if tail.endswith("-scratch"):
                pretrained = "no"
                tail = tail[:-len("-scratch")]
            count = SAMPLE_ARM_COUNTS.get(tail)
            if count is None:
                continue
        else:
            continue
        for split in sorted(r.reports):
            points.append((count, pretrained, split,
                           r.reports[split].normalized))
    return sorted(points)


def curves_csv(results: Sequence[ArmResult], full_count: int) -> str:
    """Sample-efficiency curve: normalized success as a function of the
    number of training demonstrations, with and without LM pretraining."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["demo_count", "pretrained", "split", "normalized_success"])
    for count, pretrained, split, norm in _sample_curve_points(
            results, full_count):
        w.writerow([count, pretrained, split, f"{norm:.6f}"])
    return buf.getvalue()


def loss_curves_csv(results: Sequence[ArmResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "epoch", "loss"])
    for r in results:
        for seed in sorted(r.curves):
            for e, loss in enumerate(r.curves[seed]):
                w.writerow([r.arm, seed, e, f"{loss:.6f}"])
    return buf.getvalue()


def summary_table(results: Sequence[ArmResult]) -> str:
    """Plain-text table: arm, ID-normalized, OD-normalized success (%)."""
    lines = [f"{'arm':<20} {'ID-norm':>8} {'OD-norm':>8}"]
    for r in results:
        cells = []
        for split in ("eval-ID", "eval-OD"):
            rep = r.reports.get(split)
            cells.append(f"{100 * rep.normalized:8.1f}" if rep else f"{'-':>8}")
        lines.append(f"{r.arm:<20} {cells[0]} {cells[1]}")
    return "\n".join(lines) + "\n"


def emit_metrics(results: Sequence[ArmResult], outdir,
                 full_count: int = 400) -> Dict[str, str]:
    """Write results.csv, curves.csv (sample-efficiency), loss_curves.csv,
    and summary.txt; emission is a pure function of the results, so
    re-running is byte-identical."""
    os.makedirs(outdir, exist_ok=True)
    files = {"results.csv": results_csv(results),
             "curves.csv": curves_csv(results, full_count),
             "loss_curves.csv": loss_curves_csv(results),
             "summary.txt": summary_table(results)}
    for name, text in files.items():
        with open(os.path.join(outdir, name), "w", encoding="utf-8") as f:
            f.write(text)
    return files
