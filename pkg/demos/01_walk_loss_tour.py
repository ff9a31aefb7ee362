"""Tour of the random-walk losses on a hand-built instance.

Builds the similarity graph between a handful of generated points and two
class centers, inspects the transition matrices, walks the landing
probabilities out to several steps, and compares the deviation loss against
its attraction twin.
"""

import numpy as np

from grawd.autograd import Mat, Tape
from grawd.walk import (
    WalkConfig,
    build_similarities,
    grawd_loss,
    grawt_loss,
    landing_probability,
    make_transitions,
)

np.set_printoptions(precision=4, suppress=True)

# Two centers on the vertical axis, four generated points scattered around
# them.  Everything lives in the same 2-D feature space so the geometry is
# easy to read.
centers = np.array([[0.0, 2.0], [0.0, -2.0]])
generated = np.array(
    [
        [0.5, 1.5],   # near the first center
        [-0.4, 1.8],  # near the first center
        [0.3, -1.7],  # near the second center
        [0.0, 0.1],   # between the two
    ]
)

cfg = WalkConfig(steps=3, gamma=0.7)

with Tape():
    x_u = Mat(generated)
    a, b = build_similarities(x_u, Mat(centers), cfg)
    print("similarity to centers (negated squared distances):")
    print(b.value, "\n")

    bundle = make_transitions(a, b)
    print("class -> generation transitions (rows are centers):")
    print(bundle.c2x.value, "\n")
    print("generation -> class transitions (rows are generated points):")
    print(bundle.x2c.value, "\n")

    for t in (0, 1, 3):
        landing = landing_probability(bundle, t)
        print(f"landing probabilities after {t} hops among generations:")
        print(landing.value)
        rows_sum = landing.value.sum(axis=1)
        print(f"  row sums: {rows_sum}\n")

    deviation = grawd_loss(bundle, cfg)
    attraction = grawt_loss(bundle, cfg)

print("deviation loss (landing target: uniform over classes)")
print(f"  deviation term: {deviation.deviation.item():.4f}")
print(f"  visit term:     {deviation.visit.item():.4f}")
print(f"  total:          {deviation.total.item():.4f}\n")

print("attraction variant (landing target: the starting class)")
print(f"  deviation term: {attraction.deviation.item():.4f}")
print(f"  visit term:     {attraction.visit.item():.4f}")
print(f"  total:          {attraction.total.item():.4f}\n")

print("the visit distribution spreads walker mass over the generated points:")
print(deviation.visit_distribution)
