"""How quality-aware averaging weights respond to client loss bounds.

Five clients with the desk sample counts. Client 3 starts reliable and its
training losses are then made progressively noisier; its bound b = mean + 2 std
rises and its averaging weight r falls toward the floor set by the others.

    python demos/aggregation_weights.py
"""

import numpy as np

from qasplitfed import aggregation as agg

counts = [42, 24, 17, 36, 24]
d = agg.data_scores(counts)
rng = np.random.default_rng(0)
base = [rng.gamma(4.0, 0.03, n) for n in counts]          # clean per-sample losses, mean ~0.12

print("data scores d:", np.round(d.scores, 4))
print(f"{'noise':>6} {'b_3':>7} {'q_3':>7} {'r_3':>7}  r (all clients)")
for noise in (0.0, 0.1, 0.3, 1.0, 3.0):
    losses = [x.copy() for x in base]
    losses[3] = losses[3] + noise * rng.random(counts[3])
    bounds = [agg.loss_bound(x).bound for x in losses]
    w = agg.averaging_weights(bounds, d)
    print(f"{noise:6.1f} {bounds[3]:7.3f} {w.q[3]:7.4f} {w.r[3]:7.4f}  {np.round(w.r, 3)}")

# equal bounds leave the data scores untouched: QA averaging reduces to FedAvg
w = agg.averaging_weights([0.4] * 5, d)
print("equal bounds -> r == d:", np.array_equal(w.r, d.scores))
