"""Sequential training + evaluation queue for the full ablation table.

Trains each arm/seed pair through the cached Workspace, then evaluates the
arm on both eval splits and merges it into vp2-work/results.json so partial
results are usable while later arms are still running. Ordered so the
release-gate comparisons complete first.
"""
import json
import sys
import time
import traceback

sys.path.insert(0, "src")

from vp2 import evaluation
from vp2.cli import TRAIN_DEFAULT, Workspace, _store_results, load_results

WORK = "vp2-work"

# (result name, base arm, demo_cap); demo_cap None = full 400-demo set
QUEUE = [
    ("vp2", "vp2", None),
    ("ignore", "ignore", None),
    ("captions", "captions", None),
    ("vp2-unaligned", "vp2-unaligned", None),
    ("vp2-frozen", "vp2-frozen", None),
    ("vp2-m1", "vp2-m1", None),
    ("vp2-samples-100", "vp2-samples-100", None),
    ("vp2-samples-100-scratch", "vp2-samples-100-scratch", None),
    ("vp2-aux-inv-dyn-n100", "vp2-aux-inv-dyn", 100),
    ("vp2-aux-captions-n100", "vp2-aux-captions", 100),
    ("vp2-aux-goal-pred-n100", "vp2-aux-goal-pred", 100),
    ("vp2-n10", "vp2", 10),
    ("saycan-oracle", "saycan-oracle", None),
    ("saycan-trained", "saycan-trained", None),
    ("vp2-clipcap", "vp2-clipcap", None),
    ("vp2-m5", "vp2-m5", None),
    ("vp2-m20", "vp2-m20", None),
    ("vp2-aux-inv-dyn", "vp2-aux-inv-dyn", None),
    ("vp2-aux-captions", "vp2-aux-captions", None),
    ("vp2-aux-goal-pred", "vp2-aux-goal-pred", None),
    ("vp2-samples-500", "vp2-samples-500", None),
    ("vp2-samples-1000", "vp2-samples-1000", None),
    ("vp2-samples-500-scratch", "vp2-samples-500-scratch", None),
    ("vp2-samples-1000-scratch", "vp2-samples-1000-scratch", None),
    ("vp2-samples-all-scratch", "vp2-samples-all-scratch", None),
]
SEEDS = (0, 1)


def merge_result(ws, result):
    try:
        existing = load_results(ws)
    except FileNotFoundError:
        existing = []
    existing = [r for r in existing if r.arm != result.arm]
    existing.append(result)
    _store_results(ws, existing)


def main():
    ws = Workspace(WORK)
    tasks_by_split = {"eval-ID": ws.tasks_split("eval-ID"),
                      "eval-OD": ws.tasks_split("eval-OD")}
    oracle_rates = {
        split: evaluation.success_rate(
            evaluation.evaluate_policy(evaluation.OraclePolicy(), tasks))
        for split, tasks in tasks_by_split.items()}
    print(f"oracle rates: {oracle_rates}", flush=True)

    for name, arm, cap in QUEUE:
        t0 = time.time()
        try:
            policies, curves = {}, {}
            for seed in SEEDS:
                policies[seed], curves[seed] = ws.train_arm(
                    arm, seed, demo_cap=cap)
                print(f"{name} s{seed} trained "
                      f"({time.time() - t0:.0f}s)", flush=True)
            reports = {
                split: evaluation.evaluate_split(
                    policies, tasks, split, oracle_rate=oracle_rates[split])
                for split, tasks in tasks_by_split.items()}
            result = evaluation.ArmResult(arm=name, reports=reports,
                                          curves=curves)
            merge_result(ws, result)
            line = " ".join(
                f"{s}={reports[s].raw:.3f}/{reports[s].normalized:.3f}"
                for s in sorted(reports))
            print(f"DONE {name}: {line} ({time.time() - t0:.0f}s)",
                  flush=True)
        except Exception:
            print(f"FAILED {name}:", flush=True)
            traceback.print_exc()
    # final consolidated CSVs over everything that completed
    results = load_results(ws)
    evaluation.emit_metrics(results, ws.root, full_count=TRAIN_DEFAULT)
    print("all done", flush=True)


if __name__ == "__main__":
    main()
