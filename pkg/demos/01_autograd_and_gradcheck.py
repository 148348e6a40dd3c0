"""Walk through the tensor library: a tiny regression fit plus gradient checks.

Run:  python demos/01_autograd_and_gradcheck.py
"""

import numpy as np

from fewdet import tensor as T
from fewdet.gradcheck import format_report, gradcheck_all
from fewdet.nn import Linear, sgd_step
from fewdet.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# --- fit y = W x + b on noisy data with the tape -------------------------
true_w = np.array([[2.0, -1.0], [0.5, 3.0]])
true_b = np.array([0.3, -0.7])
xs = rng.standard_normal((256, 2))
ys = xs @ true_w.T + true_b + 0.01 * rng.standard_normal((256, 2))

layer = Linear("fit", 2, 2, rng)
for step in range(300):
    idx = rng.integers(0, 256, size=32)
    with Tape() as tape:
        pred = layer(Tensor(xs[idx]))
        loss = T.smooth_l1(pred, Tensor(ys[idx]))
    tape.backward(loss)
    sgd_step(layer.parameters(), lr=0.1, momentum=0.9, weight_decay=0.0)
    if step % 100 == 0:
        print(f"step {step:3d}  loss {loss.item():.5f}")

print("\nrecovered W:\n", np.round(layer.weight.data, 3))
print("recovered b:", np.round(layer.bias.data, 3))

# --- every differentiable op against central finite differences ----------
print("\nfinite-difference verification (double precision, h = 1e-5):")
print(format_report(gradcheck_all(seed=0)))
