"""Reverse-mode gradients audited against finite differences.

The same battery backs the `spflow gradcheck` CLI subcommand; here we run
two module groups and show a manual spot check of one loss gradient.
"""

import numpy as np

from spflow import Tensor, autodiff as ad
from spflow.losses import chamfer_loss
from spflow.verify import run_checks

run_checks("numeric-core")
run_checks("losses-metrics")

# manual spot check: chamfer gradient for one flow entry
rng = np.random.default_rng(0)
p = rng.uniform(size=(12, 3))
q = rng.uniform(size=(14, 3))
flow = rng.uniform(-0.2, 0.2, size=(12, 3))

t = Tensor(flow.copy(), requires_grad=True)
chamfer_loss(ad.constant(p) + t, q).backward()
analytic = t.grad[4, 1]

h = 1e-5
bumped = flow.copy(); bumped[4, 1] += h
dipped = flow.copy(); dipped[4, 1] -= h
fd = (chamfer_loss(p + bumped, q).item() - chamfer_loss(p + dipped, q).item()) / (2 * h)
print(f"chamfer d/dflow[4,1]: analytic={analytic:.10f} finite-diff={fd:.10f} "
      f"(|diff|={abs(analytic - fd):.2e})")
