"""Command-line entry point wiring data generation, pretraining, training,
evaluation, and the ablation suite.

Artifacts live in a work directory and are content-cached: shared inputs
(task lists, demonstrations, the pretrained LM, the pretrained vision
backbones) are built once and reused by every arm. Config files are flat
"key = value" text with [section] headers; command-line overrides win.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import env, evaluation, oracle, planners, training
from . import vocab as V
from .params import ParamStore, load_checkpoint, save_checkpoint
from .planners import AuxTaskConfig, PlannerPolicy
from .training import NumericAbortError, TrainConfig

log = logging.getLogger(__name__)

# Task generation draws the largest train pool once so that every demo-count
# arm and both eval splits come from a single deterministic stream.
TRAIN_POOL = 1000
TRAIN_DEFAULT = 400
EVAL_COUNT = 60


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Lazy, disk-cached store of the shared experiment artifacts."""

    def __init__(self, root, seed: int = 0, train_config: Optional[TrainConfig] = None,
                 pretrain_docs: int = 50000):
        self.root = str(root)
        self.seed = seed
        self.base_config = train_config or TrainConfig()
        self.pretrain_docs = pretrain_docs
        os.makedirs(self.root, exist_ok=True)
        os.makedirs(os.path.join(self.root, "arms"), exist_ok=True)
        self._vocab = None
        self._tasks = None
        self._demos: Dict[int, List[oracle.Demonstration]] = {}
        self._lm_values = None
        self._backbones: Dict[str, dict] = {}
        self._saycan_lm: Dict[int, dict] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    # ----------------------------------------------------------- inputs

    def vocab(self):
        if self._vocab is None:
            p = self.path("vocab.txt")
            if os.path.exists(p):
                self._vocab = V.Vocab.load(p)
            else:
                self._vocab = V.build_vocab(env.text_corpus())
                self._vocab.save(p)
        return self._vocab

    def tasks(self) -> List[env.TaskSpec]:
        if self._tasks is None:
            p = self.path("tasks.jsonl")
            if os.path.exists(p):
                self._tasks = env.read_tasks(p)
            else:
                self._tasks = env.generate_tasks(self.seed, {
                    "train": TRAIN_POOL, "eval-ID": EVAL_COUNT,
                    "eval-OD": EVAL_COUNT})
                env.write_tasks(self._tasks, p)
        return self._tasks

    def tasks_split(self, split: str) -> List[env.TaskSpec]:
        return [t for t in self.tasks() if t.split == split]

    def caption_pairs(self) -> List[tuple]:
        """Deduplicated (observation, caption) pairs from the shared demos."""
        pairs, seen = [], set()
        for d in self.demos():
            for s in d.steps:
                key = s.observation.tobytes()
                if key not in seen:
                    seen.add(key)
                    pairs.append((s.observation, s.caption))
        return pairs

    def demos(self, n: Optional[int] = None) -> List[oracle.Demonstration]:
        if n is None:
            n = TRAIN_DEFAULT
        if n not in self._demos:
            p = self.path(f"demos-train-{n}.jsonl")
            if not os.path.exists(p):
                tasks = self.tasks_split("train")[:n]
                if len(tasks) < n:
                    raise ValueError(
                        f"train pool has only {len(tasks)} tasks, need {n}")
                oracle.write_demos(oracle.generate_demos(tasks, self.seed),
                                   p, seed=self.seed)
            self._demos[n] = oracle.read_demos(p)
        return self._demos[n]

    # ------------------------------------------------------ pretraining

    def lm_pretrained_values(self) -> dict:
        if self._lm_values is None:
            p = self.path("pretrain-lm.ckpt")
            if not os.path.exists(p):
                from .lm import LMConfig, TransformerLM
                voc = self.vocab()
                rng = np.random.default_rng([0x111, self.seed])
                store = ParamStore()
                lm = TransformerLM(LMConfig(vocab_size=len(voc)), store, rng)
                docs = training.build_pretrain_corpus(self.seed,
                                                      self.pretrain_docs)
                report = training.pretrain_lm(lm, voc, docs, seed=self.seed)
                save_checkpoint(p, store.values())
                with open(p + ".report.json", "w", encoding="utf-8") as f:
                    json.dump(report, f, indent=2, sort_keys=True)
            self._lm_values = load_checkpoint(p)
        return self._lm_values

    def backbone_values(self, mode: str = "aligned") -> dict:
        if mode not in self._backbones:
            p = self.path(f"backbone-{mode}.ckpt")
            if not os.path.exists(p):
                from .vision import (VisualBackbone, faced_recep_class,
                                     pretrain_aligned, pretrain_supervised)
                rng = np.random.default_rng([0x222, self.seed])
                store = ParamStore()
                backbone = VisualBackbone(store, rng)
                demos = self.demos()
                if mode == "aligned":
                    pretrain_aligned(backbone, self.caption_pairs(),
                                     self.vocab(), seed=self.seed)
                elif mode == "unaligned":
                    pairs = []
                    for d in demos:
                        state, obs, _ = env.reset(d.task)
                        for s in d.steps:
                            pairs.append((obs, faced_recep_class(state)))
                            state, obs, _ = env.step(state, s.action)
                    pretrain_supervised(backbone, pairs, seed=self.seed)
                else:
                    raise ValueError(f"unknown backbone mode {mode!r}")
                save_checkpoint(p, store.values())
            self._backbones[mode] = load_checkpoint(p)
        return self._backbones[mode]

    # ------------------------------------------------------------- arms

    def _hyper(self, seed: int, **kw) -> TrainConfig:
        return dataclasses.replace(self.base_config, seed=seed, **kw)

    def _saycan_action_values(self, seed: int) -> dict:
        """The 20-epoch text-only action model both SayCan modes share."""
        if seed not in self._saycan_lm:
            p = self.path(f"arms/saycan-lm-s{seed}.ckpt")
            if not os.path.exists(p):
                policy, curve = planners.train_ignore(
                    self.demos(), self.vocab(), self._hyper(seed, epochs=20),
                    lm_values=self.lm_pretrained_values())
                save_checkpoint(p, policy.store.values())
                self._write_curve(p, {seed: curve})
            self._saycan_lm[seed] = load_checkpoint(p)
        return self._saycan_lm[seed]

    def affordance_classifier(self, seed: int, n_demos: int = 60):
        p = self.path(f"arms/affordance-s{seed}.ckpt")
        voc = self.vocab()
        if not os.path.exists(p):
            examples = oracle.make_affordance_examples(
                self.demos()[:n_demos], seed=seed)
            clf, curve, acc = planners.train_affordance(
                examples, voc, self._hyper(seed, epochs=2),
                lm_values=self.lm_pretrained_values(),
                backbone_values=self.backbone_values())
            planners.save_affordance(clf, p)
            with open(p + ".report.json", "w", encoding="utf-8") as f:
                json.dump({"heldout_accuracy": acc, "curve": curve}, f,
                          indent=2, sort_keys=True)
        return planners.load_affordance(p, voc)

    def _write_curve(self, ckpt_path: str, curves: Dict[int, List[float]]) -> None:
        with open(ckpt_path + ".loss.csv", "w", encoding="utf-8") as f:
            f.write("epoch,split,loss\n")
            for seed in sorted(curves):
                for e, loss in enumerate(curves[seed]):
                    f.write(f"{e},train,{loss:.6f}\n")

    def train_arm(self, arm: str, seed: int,
                  demo_cap: Optional[int] = None
                  ) -> Tuple[PlannerPolicy, List[float]]:
        """Train (or load from cache) one ablation arm."""
        cache_tag = arm if demo_cap is None else f"{arm}-n{demo_cap}"
        ckpt = self.path(f"arms/{cache_tag}-s{seed}.ckpt")
        voc = self.vocab()
        if os.path.exists(ckpt):
            policy = planners.load_policy(ckpt, voc)
            if policy.kind == "saycan-trained":
                policy.affordance = self.affordance_classifier(seed)
            curve = _read_curve(ckpt)
            return policy, curve

        lm_pt = self.lm_pretrained_values()
        hyper = self._hyper(seed, demo_cap=demo_cap)
        demos = self.demos(max(demo_cap or 0, TRAIN_DEFAULT)) \
            if (demo_cap or 0) > TRAIN_DEFAULT else self.demos()
        if arm == "vp2":
            policy, curve = planners.train_vp2(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values())
        elif arm == "ignore":
            policy, curve = planners.train_ignore(demos, voc, hyper,
                                                  lm_values=lm_pt)
        elif arm == "captions":
            policy, curve = planners.train_captions_planner(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values())
        elif arm in ("saycan-oracle", "saycan-trained"):
            values = self._saycan_action_values(seed)
            policy = planners.build_policy(arm, voc, hyper, lm_values=values)
            policy.store.load_values(values)
            if arm == "saycan-trained":
                policy.affordance = self.affordance_classifier(seed)
            curve = _read_curve(self.path(f"arms/saycan-lm-s{seed}.ckpt"))
        elif arm == "vp2-unaligned":
            policy, curve = planners.train_vp2(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values("unaligned"))
        elif arm == "vp2-clipcap":
            policy, curve = planners.train_vp2(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values(),
                caption_init_pairs=self.caption_pairs())
        elif arm == "vp2-frozen":
            policy, curve = planners.train_vp2(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values(), frozen_lm=True)
        elif arm.startswith("vp2-m"):
            m = int(arm[len("vp2-m"):])
            policy, curve = planners.train_vp2(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values(), prompt_size=m)
        elif arm.startswith("vp2-aux-"):
            task = arm[len("vp2-aux-"):]
            aux = AuxTaskConfig(tasks=(task,))
            policy, curve = planners.train_vp2(
                demos, voc, hyper, lm_values=lm_pt,
                backbone_values=self.backbone_values(), aux=aux)
        elif arm.startswith("vp2-samples-"):
            tail = arm[len("vp2-samples-"):]
            scratch = tail.endswith("-scratch")
            if scratch:
                tail = tail[:-len("-scratch")]
            count = TRAIN_DEFAULT if tail == "all" else int(tail)
            hyper = self._hyper(seed, demo_cap=count)
            pool = self.demos(count) if count > TRAIN_DEFAULT else self.demos()
            policy, curve = planners.train_vp2(
                pool, voc, hyper, lm_values=None if scratch else lm_pt,
                backbone_values=self.backbone_values())
        else:
            raise ValueError(f"unknown arm {arm!r}")
        planners.save_policy(policy, ckpt, train_config=hyper)
        self._write_curve(ckpt, {seed: curve})
        return policy, curve


def _read_curve(ckpt_path: str) -> List[float]:
    path = ckpt_path + ".loss.csv"
    if not os.path.exists(path):
        return []
    out = []
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            out.append(float(line.strip().split(",")[2]))
    return out


# ---------------------------------------------------------------- config

_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}


def resolve_train_config(config_file: Optional[str],
                         overrides: Sequence[str]) -> TrainConfig:
    """defaults < [train] section of the config file < --set overrides.
    Resolution is pure: the same inputs always give the same config."""
    raw: Dict[str, str] = {}
    if config_file:
        cp = configparser.ConfigParser()
        with open(config_file, encoding="utf-8") as f:
            cp.read_string(f.read())
        if cp.has_section("train"):
            raw.update(dict(cp.items("train")))
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        key = key.strip()
        if key.startswith("train."):
            key = key[len("train."):]
        raw[key] = val.strip()
    cfg = TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for key, val in raw.items():
        if key not in fields:
            raise UsageError(f"unknown train config key {key!r}")
        current = getattr(cfg, key)
        if key in ("grad_clip", "demo_cap"):
            parsed = None if val.lower() in ("none", "") else (
                int(val) if key == "demo_cap" else float(val))
        elif isinstance(current, bool):
            parsed = _BOOL[val.lower()]
        elif isinstance(current, int):
            parsed = int(val)
        elif isinstance(current, float):
            parsed = float(val)
        else:
            parsed = val
        setattr(cfg, key, parsed)
    return cfg


class UsageError(ValueError):
    pass


def _write_manifest(outdir, name: str, config: TrainConfig,
                    inputs: Dict[str, str]) -> None:
    lines = [f"command = {name}"]
    for f in dataclasses.fields(config):
        lines.append(f"train.{f.name} = {getattr(config, f.name)}")
    for key in sorted(inputs):
        lines.append(f"input.{key} = {inputs[key]}")
    with open(os.path.join(outdir, f"{name}.manifest"), "w",
              encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ------------------------------------------------------------ subcommands

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", default="vp2-work")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vp2")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("gen-tasks", help="generate task splits")
    _add_common(sp)

    sp = sub.add_parser("gen-demos", help="generate expert demonstrations")
    _add_common(sp)
    sp.add_argument("--count", type=int, default=TRAIN_DEFAULT)

    sp = sub.add_parser("pretrain-lm", help="pretrain the LM on synthetic text")
    _add_common(sp)

    sp = sub.add_parser("pretrain-vision", help="pretrain a vision backbone")
    _add_common(sp)
    sp.add_argument("--mode", choices=["aligned", "unaligned"],
                    default="aligned")

    sp = sub.add_parser("train", help="train one planner")
    _add_common(sp)
    sp.add_argument("--planner", required=True,
                    choices=["vp2", "ignore", "captions", "saycan-trained"])
    sp.add_argument("--aux", choices=["inv-dyn", "captions", "goal-pred"],
                    default=None)
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--frozen-lm", action="store_true")
    sp.add_argument("--prompt-size", type=int, default=10)
    sp.add_argument("--samples", type=int, default=None,
                    help="cap training to the first N demos")
    sp.add_argument("--out", default=None, help="checkpoint path")

    sp = sub.add_parser("eval", help="evaluate a trained planner")
    _add_common(sp)
    sp.add_argument("--planner-ckpt", required=True)
    sp.add_argument("--split", choices=["id", "od"], default="id")
    sp.add_argument("--saycan-oracle", action="store_true",
                    help="rescore with simulator affordances")

    sp = sub.add_parser("ablate", help="run the full ablation suite")
    _add_common(sp)
    sp.add_argument("--arms", default=None,
                    help="comma-separated subset of arms")
    sp.add_argument("--seeds", default="0,1")

    sp = sub.add_parser("report", help="re-emit CSVs from stored results")
    _add_common(sp)
    return p


def _cmd_train(args, ws: Workspace, cfg: TrainConfig) -> int:
    arm = args.planner
    if args.frozen_lm and arm != "vp2":
        raise UsageError("--frozen-lm only applies to --planner vp2")
    if args.aux:
        if arm != "vp2":
            raise UsageError("--aux only applies to --planner vp2")
        arm = f"vp2-aux-{args.aux}"
    if args.prompt_size != 10:
        if arm != "vp2":
            raise UsageError("--prompt-size only applies to --planner vp2")
        arm = f"vp2-m{args.prompt_size}"
    if args.frozen_lm:
        arm = "vp2-frozen"
    policy, curve = ws.train_arm(arm, args.seed, demo_cap=args.samples)
    tag = arm if args.samples is None else f"{arm}-n{args.samples}"
    out = args.out or ws.path(f"arms/{tag}-s{args.seed}.ckpt")
    if args.out:
        planners.save_policy(policy, out, train_config=cfg)
    inputs = {"tasks": _sha256(ws.path("tasks.jsonl"))}
    _write_manifest(ws.root, f"train-{tag}-s{args.seed}", cfg, inputs)
    print(f"trained {arm} seed {args.seed}: final loss "
          f"{curve[-1] if curve else float('nan'):.4f} -> {out}")
    return 0


def _cmd_eval(args, ws: Workspace, cfg: TrainConfig) -> int:
    voc = ws.vocab()
    policy = planners.load_policy(args.planner_ckpt, voc)
    if args.saycan_oracle:
        if policy.kind in ("vp2", "captions") or policy.kind.startswith("vp2"):
            raise UsageError(
                "--saycan-oracle needs a text-only action model checkpoint")
        policy.kind = "saycan-oracle"
    elif policy.kind == "saycan-trained" and policy.affordance is None:
        policy.affordance = ws.affordance_classifier(args.seed)
    split = "eval-ID" if args.split == "id" else "eval-OD"
    tasks = ws.tasks_split(split)
    report = evaluation.evaluate_split({args.seed: policy}, tasks, split)
    arm = policy.kind if not args.saycan_oracle else "saycan-oracle"
    result = evaluation.ArmResult(arm=arm, reports={split: report}, curves={})
    text = evaluation.results_csv([result])
    out = ws.path(f"eval-{arm}-{args.split}-s{args.seed}.csv")
    with open(out, "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    print(f"wrote {out}")
    return 0


def _cmd_ablate(args, ws: Workspace, cfg: TrainConfig) -> int:
    arms = args.arms.split(",") if args.arms else list(evaluation.ARM_NAMES)
    seeds = [int(s) for s in args.seeds.split(",")]
    tasks_by_split = {"eval-ID": ws.tasks_split("eval-ID"),
                      "eval-OD": ws.tasks_split("eval-OD")}
    results = evaluation.run_ablation_suite(
        lambda arm, seed: ws.train_arm(arm, seed),
        tasks_by_split, seeds=seeds, arms=arms)
    _store_results(ws, results)
    files = evaluation.emit_metrics(results, ws.root,
                                    full_count=TRAIN_DEFAULT)
    print(files["summary.txt"], end="")
    return 0


def _store_results(ws: Workspace, results: List[evaluation.ArmResult]) -> None:
    payload = []
    for r in results:
        payload.append({
            "arm": r.arm,
            "curves": {str(k): v for k, v in r.curves.items()},
            "reports": {
                split: {"oracle_rate": rep.oracle_rate,
                        "per_seed_raw": {str(k): v for k, v
                                         in rep.per_seed_raw.items()}}
                for split, rep in r.reports.items()},
        })
    with open(ws.path("results.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_results(ws: Workspace) -> List[evaluation.ArmResult]:
    with open(ws.path("results.json"), encoding="utf-8") as f:
        payload = json.load(f)
    out = []
    for rec in payload:
        reports = {
            split: evaluation.SplitReport(
                split=split,
                per_seed_raw={int(k): v for k, v
                              in d["per_seed_raw"].items()},
                oracle_rate=d["oracle_rate"])
            for split, d in rec["reports"].items()}
        curves = {int(k): v for k, v in rec["curves"].items()}
        out.append(evaluation.ArmResult(arm=rec["arm"], reports=reports,
                                        curves=curves))
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("VP2_THREADS", "").strip()
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_train_config(args.config, args.overrides)
        ws = Workspace(args.workdir, seed=args.seed, train_config=cfg)
        if args.cmd == "gen-tasks":
            ws.tasks()
            print(f"wrote {ws.path('tasks.jsonl')}")
            return 0
        if args.cmd == "gen-demos":
            ws.demos(args.count)
            print(f"wrote {ws.path(f'demos-train-{args.count}.jsonl')}")
            return 0
        if args.cmd == "pretrain-lm":
            ws.lm_pretrained_values()
            print(f"wrote {ws.path('pretrain-lm.ckpt')}")
            return 0
        if args.cmd == "pretrain-vision":
            ws.backbone_values(args.mode)
            print(f"wrote {ws.path(f'backbone-{args.mode}.ckpt')}")
            return 0
        if args.cmd == "train":
            return _cmd_train(args, ws, cfg)
        if args.cmd == "eval":
            return _cmd_eval(args, ws, cfg)
        if args.cmd == "ablate":
            return _cmd_ablate(args, ws, cfg)
        if args.cmd == "report":
            results = load_results(ws)
            files = evaluation.emit_metrics(results, ws.root,
                                            full_count=TRAIN_DEFAULT)
            print(files["summary.txt"], end="")
            return 0
        raise UsageError(f"unknown subcommand {args.cmd!r}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except NumericAbortError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
