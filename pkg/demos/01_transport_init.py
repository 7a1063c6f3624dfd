"""Initial flow from entropic optimal transport.

Encode two clouds into unit descriptors, correlate them, Sinkhorn-normalize
the correlation into a soft transport plan, and read off a first flow guess
as each point's transport barycenter minus itself.
"""

import numpy as np

from spflow import build_model
from spflow.encoder import encode
from spflow.metrics import evaluate
from spflow.synthetic import SyntheticConfig, generate_scene
from spflow.transport import correlation_kernel, initial_flow, marginal_deviation, sinkhorn

scene = generate_scene(SyntheticConfig(parts=2, points_per_part=128, seed=3))
print(f"scene: {len(scene.source)} points, mean |gt flow| = "
      f"{np.linalg.norm(scene.gt_flow, axis=1).mean():.3f} m")

model = build_model(seed=0)
x = encode(scene.source, model.encoder)
y = encode(scene.target, model.encoder)
print(f"descriptors: {x.shape}, rows are unit-norm "
      f"(max deviation {abs(np.linalg.norm(x.data, axis=1) - 1).max():.1e})")

kernel = correlation_kernel(x, y, epsilon=0.03)
for sweeps in (0, 1, 10, 100):
    plan = sinkhorn(kernel, sweeps) if sweeps else kernel
    row_dev, col_dev = marginal_deviation(plan)
    print(f"sinkhorn sweeps={sweeps:3d}: marginal deviation row={row_dev:.2e} col={col_dev:.2e}")

plan = sinkhorn(kernel, 10)
flow0 = initial_flow(plan, scene.source, scene.target)
report = evaluate(flow0.data, scene.gt_flow)
print(f"untrained initial flow: EPE={report.epe:.3f} m (random weights; training tightens this)")

# the transported target always lands inside the target's bounding box
warped = scene.source + flow0.data
assert np.all(warped >= scene.target.min(axis=0) - 1e-9)
assert np.all(warped <= scene.target.max(axis=0) + 1e-9)
print("warped source stays inside the target hull, as the row averaging guarantees")
