"""Random-walk losses over a similarity graph of generated features and class centers.

A walk starts at a seen-class center, hops through the current minibatch of
generated points for a configurable number of steps, and lands back on a seen
class.  The deviation loss (GRaWD) pushes the landing distribution toward
uniform over seen classes; the attraction variant (GRaWT) pulls it toward the
starting class.  A visit term spreads the class-to-generation transition mass
over all generated points.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from grawd.autograd import (
    DimensionError,
    Mat,
    add,
    cross_entropy_rows,
    matmul,
    mul,
    pairwise_neg_sqdist,
    row_softmax,
    smul,
    sum_cols,
    transpose,
)

__all__ = [
    "WalkConfig",
    "TransitionBundle",
    "WalkLossReport",
    "build_similarities",
    "make_transitions",
    "landing_probability",
    "visit_distribution",
    "walk_loss",
    "grawd_loss",
    "grawt_loss",
    "landing_row_entropy",
]

TARGET_MODES = ("uniform", "identity")


@dataclass(frozen=True)
class WalkConfig:
    """Walk hyperparameters.

    ``steps`` is the walk length T (hops among generated points before landing
    back on a class).  ``gamma`` is the per-step exponential decay.
    ``diag_fill`` replaces the self-similarity diagonal; it must be strongly
    negative so the softmax assigns the self-transition no mass.
    ``target_mode`` selects the landing target: "uniform" is the deviation
    loss, "identity" the attraction variant.
    """

    steps: int = 10
    gamma: float = 0.7
    diag_fill: float = -1e9
    target_mode: str = "uniform"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.diag_fill >= 0.0:
            raise ValueError(
                f"diag_fill must be strongly negative to suppress self-cycles, got {self.diag_fill}"
            )
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")


@dataclass(frozen=True)
class TransitionBundle:
    """Raw similarities plus the three row-stochastic transition matrices."""

    a: Mat  # (N_u, N_u) similarities among generations, diagonal filled
    b: Mat  # (N_u, K) similarities generation -> class center
    c2x: Mat  # (K, N_u) class -> generation transitions
    x2c: Mat  # (N_u, K) generation -> class transitions
    x2x: Mat  # (N_u, N_u) generation -> generation transitions

    @property
    def n_classes(self) -> int:
        return self.x2c.value.shape[1]

    @property
    def n_generated(self) -> int:
        return self.x2x.value.shape[0]


@dataclass(frozen=True)
class WalkLossReport:
    """Loss terms plus the per-step landing matrices for diagnostics.

    ``landing[t]`` holds the (K, K) landing probabilities after t hops as a
    plain array; the loss terms stay differentiable graph nodes.
    ``stochastic_residual`` is the worst row-sum deviation from 1 observed in
    any transition or landing matrix of this evaluation.
    """

    deviation: Mat
    visit: Mat
    total: Mat
    landing: list
    visit_distribution: np.ndarray
    stochastic_residual: float


def build_similarities(x_u: Mat, centers: Mat, cfg: WalkConfig) -> tuple[Mat, Mat]:
    """Negated squared-distance similarity matrices A (within generations) and B (to centers).

    The diagonal of A is a constant fill that takes no gradient.
    """
    n_u = x_u.value.shape[0]
    k = centers.value.shape[0]
    if n_u < 1:
        raise DimensionError("build_similarities: need at least one generated point")
    if k < 2:
        raise DimensionError(f"build_similarities: need at least two class centers, got {k}")
    if x_u.value.shape[1] != centers.value.shape[1]:
        raise DimensionError(
            f"build_similarities: feature dims differ, generations {x_u.value.shape} "
            f"vs centers {centers.value.shape}"
        )
    b = pairwise_neg_sqdist(x_u, centers)
    eye = np.eye(n_u)
    off = pairwise_neg_sqdist(x_u, x_u)
    a = add(mul(off, Mat(1.0 - eye)), Mat(cfg.diag_fill * eye))
    return a, b


def make_transitions(a: Mat, b: Mat) -> TransitionBundle:
    """Row-softmax the similarity matrices into the three transition matrices."""
    if a.value.shape[0] != a.value.shape[1]:
        raise DimensionError(f"make_transitions: A must be square, got {a.value.shape}")
    if b.value.shape[0] != a.value.shape[0]:
        raise DimensionError(
            f"make_transitions: B has {b.value.shape[0]} rows but A is {a.value.shape}"
        )
    return TransitionBundle(
        a=a,
        b=b,
        c2x=row_softmax(transpose(b)),
        x2c=row_softmax(b),
        x2x=row_softmax(a),
    )


def landing_probability(bundle: TransitionBundle, t: int) -> Mat:
    """Probability of landing on class j after a walk of t hops started at class i."""
    if t < 0:
        raise ValueError(f"walk length must be >= 0, got {t}")
    m = bundle.c2x
    for _ in range(t):
        m = matmul(m, bundle.x2x)
    return matmul(m, bundle.x2c)


def visit_distribution(p_c2x: Mat) -> Mat:
    """Overall probability that each generated point is visited from a class.

    The class-to-generation rows are averaged, so the result is a proper
    distribution over the generated points.
    """
    k = p_c2x.value.shape[0]
    return smul(sum_cols(p_c2x), 1.0 / k)


def walk_loss(bundle: TransitionBundle, cfg: WalkConfig) -> WalkLossReport:
    """Deviation (or attraction) term plus visit term for one generated minibatch.

    deviation = sum_{t=0..steps} gamma^t * CE(landing(t), target)
    visit     = CE(visit_distribution, uniform over generations)
    """
    k = bundle.n_classes
    n_u = bundle.n_generated
    if cfg.target_mode == "uniform":
        target = np.full((1, k), 1.0 / k)
    else:
        target = np.eye(k)

    residual = max(
        np.abs(bundle.c2x.value.sum(axis=1) - 1.0).max(),
        np.abs(bundle.x2c.value.sum(axis=1) - 1.0).max(),
        np.abs(bundle.x2x.value.sum(axis=1) - 1.0).max(),
    )

    deviation = None
    landing_values = []
    m = bundle.c2x
    for t in range(cfg.steps + 1):
        if t > 0:
            m = matmul(m, bundle.x2x)
        landing = matmul(m, bundle.x2c)
        landing_values.append(landing.value.copy())
        residual = max(residual, np.abs(landing.value.sum(axis=1) - 1.0).max())
        term = smul(cross_entropy_rows(landing, target), cfg.gamma**t)
        deviation = term if deviation is None else add(deviation, term)

    p_v = visit_distribution(bundle.c2x)
    residual = max(residual, abs(p_v.value.sum() - 1.0))
    visit = cross_entropy_rows(p_v, np.full((1, n_u), 1.0 / n_u))
    total = add(deviation, visit)
    return WalkLossReport(
        deviation=deviation,
        visit=visit,
        total=total,
        landing=landing_values,
        visit_distribution=p_v.value.ravel().copy(),
        stochastic_residual=float(residual),
    )


def grawd_loss(bundle: TransitionBundle, cfg: WalkConfig) -> WalkLossReport:
    """Deviation loss: landing target is uniform over seen classes."""
    return walk_loss(bundle, dataclasses.replace(cfg, target_mode="uniform"))


def grawt_loss(bundle: TransitionBundle, cfg: WalkConfig) -> WalkLossReport:
    """Attraction variant: landing target is the starting class (identity)."""
    return walk_loss(bundle, dataclasses.replace(cfg, target_mode="identity"))


def landing_row_entropy(report: WalkLossReport) -> float:
    """Mean Shannon entropy of the landing rows, averaged over all walk lengths."""
    acc = 0.0
    count = 0
    for landing in report.landing:
        p = np.clip(landing, 1e-30, None)
        acc += float(-(p * np.log(p)).sum(axis=1).mean())
        count += 1
    return acc / count
