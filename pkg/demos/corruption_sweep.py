"""Accuracy of each strategy as more clients train on dilated masks.

Runs a reduced configuration (16x16 images, short schedule) so the whole
sweep finishes in under two minutes, then prints the table and the final QA
weights of every client. The reduced model is undertrained (about 56% clean
accuracy); pass --full for the default desk configuration (about 40 min).

    python demos/corruption_sweep.py [--full]
"""

import sys

from qasplitfed import STRATEGIES, RunConfig, run

if "--full" in sys.argv:
    base = {}
else:
    base = dict(counts=(24, 14, 10, 20, 14), samples=96, image_size=16, down_filters=(4, 8),
                radius=2, global_epochs=4, local_epochs=10)

clients = RunConfig(**base).clients
print(f"{'strategy':>12} " + " ".join(f"k={k:<4}" for k in range(clients + 1)))
final_r = {}
for strategy in STRATEGIES:
    accs = []
    for k in range(clients + 1):
        res = run(RunConfig(**base, strategy=strategy, corrupted=k))
        accs.append(res.report.accuracy)
        if strategy == "qa-splitfed":
            bad = res.log.select("config")[0]["corrupted_clients"]
            final_r[k] = (bad, res.log.select("aggregate", phase=2)[-1]["r"])
    print(f"{strategy:>12} " + " ".join(f"{a:6.3f}" for a in accs))

print("\nQA-SplitFed weights after the last global epoch")
for k, (bad, r) in final_r.items():
    print(f"k={k} corrupted {bad}: r = {[round(v, 3) for v in r]}")
