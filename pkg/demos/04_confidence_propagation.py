"""
Confidence weights from accumulated class evidence
==================================================

Each belief cell keeps a log-odds value per class. A batch of feature
measurements is first weighed against the cell's history, then folded in.
Measurements that agree with a consistent history get large weights; an
outlier against a long history is nearly silenced.
"""

import numpy as np

from occlang.grid import SceneBounds
from occlang.scp import BeliefGrid, MeasurementBatch, confidence_weights

grid = BeliefGrid(SceneBounds(np.zeros(3), np.ones(3)), (1, 1, 1), 3)

# %%
# A fresh cell has no opinion: every class gets weight 1.
print("fresh:", grid.weigh_batch(MeasurementBatch([0, 0, 0], [0, 1, 2]), update=False))

# %%
# Feed it a noisy stream where class 0 shows up 70% of the time. Log-odds
# saturate at +-10; shares only count positive evidence.
rng = np.random.default_rng(0)
for step in range(1, 31):
    grid.weigh_batch(MeasurementBatch([0] * 5, rng.choice(3, 5, p=[0.7, 0.15, 0.15])))
    if step in (1, 3, 10, 30):
        lo, share = grid.logodds[0], confidence_weights(grid.logodds[0])
        print(f"after {step:2d} batches, log-odds {np.round(lo, 2)}, shares {np.round(share, 3)}")

# %%
# Now a disagreeing measurement barely counts.
w = grid.weigh_batch(MeasurementBatch([0, 0], [0, 1]), update=False)
print(f"weight of an agreeing measurement {w[0]:.3f}, of a disagreeing one {w[1]:.3f}")
