"""Pilot calibration: small-demo-count arms on the shared workspace."""
import logging, time, sys
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
sys.path.insert(0, "/root/pkg/src")
from vp2 import evaluation
from vp2.cli import Workspace

ws = Workspace("/root/pkg/vp2-work", seed=0)
t0 = time.time()
print("building shared artifacts...", flush=True)
ws.vocab(); ws.tasks()
ws.demos()
print("demos done %.0fs" % (time.time()-t0), flush=True)
ws.lm_pretrained_values()
print("lm pretrain done %.0fs" % (time.time()-t0), flush=True)
ws.backbone_values("aligned")
print("aligned backbone done %.0fs" % (time.time()-t0), flush=True)

id_tasks = ws.tasks_split("eval-ID")[:20]
for arm in ("vp2", "ignore"):
    policy, curve = ws.train_arm(arm, 0, demo_cap=60)
    print("%s n60: loss %.3f -> %.3f (%.0fs)" % (arm, curve[0], curve[-1], time.time()-t0), flush=True)
    results = evaluation.evaluate_policy(policy, id_tasks)
    print("%s n60 ID success: %.2f  unexec=%.1f parse=%.1f" % (
        arm, evaluation.success_rate(results),
        sum(r.unexecuted for r in results)/len(results),
        sum(r.parse_errors for r in results)/len(results)), flush=True)
    # replay on train tasks it saw
    tr = [d.task for d in ws.demos()[:10]]
    res2 = evaluation.evaluate_policy(policy, tr)
    print("%s n60 train-task success: %.2f" % (arm, evaluation.success_rate(res2)), flush=True)
print("pilot done %.0fs" % (time.time()-t0), flush=True)
