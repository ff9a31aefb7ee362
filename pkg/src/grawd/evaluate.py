"""Inductive zero-shot evaluation by nearest-neighbour classification.

For each candidate class a pool of features is generated from its descriptor
(unseen descriptors are read here and nowhere else), everything is mapped into
phi space, and a query is assigned the class of its nearest generated feature.
The generalized seen/unseen trade-off is traced by sweeping a calibration
offset added to unseen-class scores, giving the S-U curve, its area, and the
best harmonic mean along it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from grawd.autograd import Mat, Tape
from grawd.data import Dataset, holdout_seen_rows

__all__ = [
    "EvalConfig",
    "EvalReport",
    "EvaluationError",
    "nn_classify",
    "generate_pools",
    "top1_unseen",
    "seen_unseen_curve",
    "harmonic_mean",
    "evaluate",
    "write_report",
    "write_curve_csv",
]


class EvaluationError(ValueError):
    """Evaluation preconditions violated (empty pools, missing partitions)."""


@dataclass(frozen=True)
class EvalConfig:
    gen_per_class: int = 60
    n_offsets: int = 201
    offsets: tuple[float, ...] | None = None  # explicit sweep overrides n_offsets
    holdout_fraction: float = 0.2
    holdout_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.gen_per_class < 1:
            raise EvaluationError(f"gen_per_class must be >= 1, got {self.gen_per_class}")
        if self.n_offsets < 3:
            raise EvaluationError(f"n_offsets must be >= 3, got {self.n_offsets}")
        if self.offsets is not None:
            arr = np.asarray(self.offsets, dtype=np.float64)
            if arr.ndim != 1 or len(arr) < 2:
                raise EvaluationError("offsets must be a flat list of at least 2 values")
            if not np.all(np.diff(arr) >= 0):
                raise EvaluationError("offsets must be non-decreasing")


@dataclass(frozen=True)
class EvalReport:
    top1_unseen: float
    curve: tuple  # (offset, seen accuracy, unseen accuracy) triples
    auc: float
    s_best: float
    u_best: float
    h_best: float


def harmonic_mean(s: float, u: float) -> float:
    """2su/(s+u); zero when both inputs vanish.  Scale-free, so percentages work too."""
    if s < 0 or u < 0:
        raise EvaluationError(f"harmonic_mean needs non-negative inputs, got {s}, {u}")
    if s + u == 0:
        return 0.0
    return 2.0 * s * u / (s + u)


def nn_classify(pools: dict, queries: np.ndarray):
    """Nearest-generated-feature classification.

    ``pools`` maps class id to an array of generated features.  Returns the
    predicted class per query, the score matrix (negated distance of each
    query to the nearest feature of each class), and the class-id column
    order.  Ties go to the lowest class id.
    """
    class_ids = sorted(pools)
    if not class_ids:
        raise EvaluationError("nn_classify needs at least one class pool")
    queries = np.asarray(queries, dtype=np.float64)
    scores = np.empty((queries.shape[0], len(class_ids)))
    for j, cid in enumerate(class_ids):
        pool = np.asarray(pools[cid], dtype=np.float64)
        if pool.size == 0:
            raise EvaluationError(f"empty pool for candidate class {cid}")
        d2 = ((queries[:, None, :] - pool[None, :, :]) ** 2).sum(axis=2)
        scores[:, j] = -np.sqrt(d2.min(axis=1))
    # argmax returns the first maximum, and columns are in ascending class id,
    # so exact ties resolve to the lowest class id
    winner = np.argmax(scores, axis=1)
    preds = np.array([class_ids[w] for w in winner], dtype=np.int64)
    return preds, scores, class_ids


def _phi_values(model, x: np.ndarray) -> np.ndarray:
    with Tape():
        return model.extract_phi(Mat(x)).value.copy()


def generate_pools(model, dataset: Dataset, class_ids, gen_per_class: int, rng) -> dict:
    """Per-class pools of phi-mapped generations from the class descriptors."""
    pools = {}
    for cid in class_ids:
        s = np.tile(dataset.descriptor_of(cid), (gen_per_class, 1))
        z = rng.standard_normal((gen_per_class, model.noise_dim))
        with Tape():
            pools[cid] = model.extract_phi(model.generate(Mat(s), Mat(z))).value.copy()
    return pools


def top1_unseen(model, dataset: Dataset, cfg: EvalConfig) -> float:
    """Top-1 accuracy of unseen test rows classified among unseen classes only."""
    unseen = sorted(dataset.unseen)
    mask = np.isin(dataset.labels, unseen)
    if not mask.any():
        raise EvaluationError("dataset has no unseen test rows")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE7A1)))
    pools = generate_pools(model, dataset, unseen, cfg.gen_per_class, rng)
    queries = _phi_values(model, dataset.features[mask])
    preds, _, _ = nn_classify(pools, queries)
    return float((preds == dataset.labels[mask]).mean())


def _sweep(scores: np.ndarray, class_ids, unseen_set, labels, offsets):
    """Predictions per calibration offset; returns (S, U) accuracy pairs."""
    unseen_cols = np.array([cid in unseen_set for cid in class_ids])
    is_unseen_row = np.array([lab in unseen_set for lab in labels])
    results = []
    for lam in offsets:
        shifted = scores.copy()
        shifted[:, unseen_cols] += lam
        winner = np.argmax(shifted, axis=1)
        preds = np.array([class_ids[w] for w in winner])
        hit = preds == labels
        s_acc = float(hit[~is_unseen_row].mean())
        u_acc = float(hit[is_unseen_row].mean())
        results.append((float(lam), s_acc, u_acc))
    return results


def seen_unseen_curve(model, dataset: Dataset, cfg: EvalConfig):
    """Trace the seen/unseen accuracy curve and integrate its area.

    Seen test rows are the held-out fraction of seen rows (same split the
    trainer excluded); unseen test rows are all unseen-class rows.  Offsets
    default to a symmetric sweep wide enough to close the curve at (S_max, 0)
    and (0, U_max).
    """
    _, seen_test_idx = holdout_seen_rows(dataset, cfg.holdout_fraction, cfg.holdout_seed)
    if len(seen_test_idx) == 0:
        raise EvaluationError("no held-out seen test rows")
    unseen = sorted(dataset.unseen)
    unseen_mask = np.isin(dataset.labels, unseen)
    if not unseen_mask.any():
        raise EvaluationError("dataset has no unseen test rows")

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE7A2)))
    pools = generate_pools(
        model, dataset, sorted(dataset.class_ids), cfg.gen_per_class, rng
    )

    queries = np.vstack(
        [
            _phi_values(model, dataset.features[seen_test_idx]),
            _phi_values(model, dataset.features[unseen_mask]),
        ]
    )
    labels = np.concatenate([dataset.labels[seen_test_idx], dataset.labels[unseen_mask]])
    _, scores, class_ids = nn_classify(pools, queries)

    if cfg.offsets is not None:
        offsets = np.asarray(cfg.offsets, dtype=np.float64)
    else:
        span = 2.0 * max(float(np.abs(scores).max()), 1e-12)
        offsets = np.linspace(-span, span, cfg.n_offsets)

    curve = _sweep(scores, class_ids, set(unseen), labels, offsets)
    auc = _curve_area(curve)
    h_values = [harmonic_mean(s, u) for _, s, u in curve]
    best = int(np.argmax(h_values))
    return tuple(curve), auc, curve[best][1], curve[best][2], h_values[best]


def _curve_area(curve) -> float:
    """Trapezoid area under the parametric (S, U) path traced by the sweep.

    The sweep is monotone (S non-increasing, U non-decreasing in the offset),
    so integrating along sweep order is exactly the area under the staircase;
    segments with unchanged S, including duplicated offsets, have zero width.
    """
    area = 0.0
    for (_, s0, u0), (_, s1, u1) in zip(curve, curve[1:]):
        area += 0.5 * (u0 + u1) * (s0 - s1)
    return float(area)


def evaluate(model, dataset: Dataset, cfg: EvalConfig) -> EvalReport:
    curve, auc, s_best, u_best, h_best = seen_unseen_curve(model, dataset, cfg)
    return EvalReport(
        top1_unseen=top1_unseen(model, dataset, cfg),
        curve=curve,
        auc=auc,
        s_best=s_best,
        u_best=u_best,
        h_best=h_best,
    )


def write_report(report: EvalReport, path: str) -> None:
    lines = [
        f"top1_unseen\t{report.top1_unseen!r}",
        f"su_auc\t{report.auc!r}",
        f"s_best\t{report.s_best!r}",
        f"u_best\t{report.u_best!r}",
        f"h_best\t{report.h_best!r}",
    ]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_curve_csv(report: EvalReport, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("offset,seen_accuracy,unseen_accuracy\n")
        for offset, s, u in report.curve:
            fh.write(f"{offset!r},{s!r},{u!r}\n")
