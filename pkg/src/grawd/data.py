"""Feature datasets with seen/unseen class splits.

Two sources: a seeded synthetic benchmark (class descriptors drawn from a
Gaussian, feature means a fixed random projection of the descriptors), and a
three-file CSV bundle for user-supplied precomputed features.

The trainer never sees unseen-class information: ``Dataset.training_view()``
strips unseen descriptors and unseen rows structurally, so the inductive
protocol is enforced by the interface rather than by convention.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "TrainingView",
    "SyntheticSpec",
    "BundleError",
    "synthesize",
    "save_bundle",
    "load_bundle",
    "holdout_seen_rows",
    "training_split",
]

FEATURES_FILE = "features.csv"
DESCRIPTORS_FILE = "descriptors.csv"
SPLIT_FILE = "split.csv"


class BundleError(ValueError):
    """A bundle file is malformed or violates a dataset invariant."""


@dataclass(frozen=True)
class TrainingView:
    """The seen-only slice of a dataset that the trainer is allowed to read."""

    features: np.ndarray  # (n_train, d)
    class_ids: tuple[int, ...]  # seen class ids, ascending
    label_index: np.ndarray  # (n_train,) index into class_ids
    descriptors: np.ndarray  # (K_seen, k), aligned with class_ids


@dataclass(frozen=True)
class Dataset:
    """Visual features, integer labels, per-class descriptors, seen/unseen split."""

    name: str
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,), class ids
    descriptors: np.ndarray  # (K, k), row order matches class_ids
    class_ids: tuple[int, ...]  # all class ids, ascending
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        known = set(self.class_ids)
        if set(self.seen) & set(self.unseen):
            overlap = sorted(set(self.seen) & set(self.unseen))
            raise BundleError(
                f"classes {overlap} are tagged both seen and unseen; the split "
                "must satisfy S ∩ U = ∅"
            )
        if set(self.seen) | set(self.unseen) != known:
            raise BundleError("every class needs exactly one split tag")
        if len(self.seen) < 2:
            raise BundleError(f"need at least 2 seen classes, got {len(self.seen)}")
        if len(self.unseen) < 1:
            raise BundleError("need at least 1 unseen class")
        missing = sorted(set(self.labels.tolist()) - known)
        if missing:
            raise BundleError(f"labels reference classes without descriptors: {missing}")
        if self.descriptors.shape[0] != len(self.class_ids):
            raise BundleError(
                f"{self.descriptors.shape[0]} descriptor rows for {len(self.class_ids)} classes"
            )
        for cid in self.seen:
            if not np.any(self.labels == cid):
                raise BundleError(f"seen class {cid} has no feature rows")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def descriptor_of(self, class_id: int) -> np.ndarray:
        return self.descriptors[self.class_ids.index(class_id)]

    def rows_of(self, class_id: int) -> np.ndarray:
        return self.features[self.labels == class_id]

    def training_view(self) -> TrainingView:
        """Seen rows and seen descriptors only; unseen information is unreachable."""
        seen = tuple(sorted(self.seen))
        mask = np.isin(self.labels, seen)
        id_to_index = {cid: i for i, cid in enumerate(seen)}
        label_index = np.array([id_to_index[c] for c in self.labels[mask]], dtype=np.int64)
        desc = np.vstack([self.descriptor_of(cid) for cid in seen])
        return TrainingView(
            features=self.features[mask].copy(),
            class_ids=seen,
            label_index=label_index,
            descriptors=desc,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a separable synthetic benchmark standing in for real CNN features."""

    k_seen: int = 10
    k_unseen: int = 5
    feature_dim: int = 16
    descriptor_dim: int = 8
    samples_per_class: int = 100
    noise_scale: float = 0.25
    seed: int = 0
    projection: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.k_seen < 2:
            raise ValueError(f"k_seen must be >= 2, got {self.k_seen}")
        if self.k_unseen < 1:
            raise ValueError(f"k_unseen must be >= 1, got {self.k_unseen}")
        if self.feature_dim < 2 or self.descriptor_dim < 2:
            raise ValueError("feature_dim and descriptor_dim must be >= 2")
        if self.noise_scale <= 0:
            raise ValueError(f"noise_scale must be > 0, got {self.noise_scale}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


def synthesize(spec: SyntheticSpec) -> Dataset:
    """Build the synthetic dataset; a pure function of the spec."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    k_total = spec.k_seen + spec.k_unseen
    descriptors = rng.standard_normal((k_total, spec.descriptor_dim))
    if spec.projection is not None:
        projection = np.asarray(spec.projection, dtype=np.float64)
        if projection.shape != (spec.descriptor_dim, spec.feature_dim):
            raise ValueError(
                f"projection must be ({spec.descriptor_dim}, {spec.feature_dim}), "
                f"got {projection.shape}"
            )
    else:
        projection = rng.standard_normal((spec.descriptor_dim, spec.feature_dim))
        projection /= np.sqrt(spec.descriptor_dim)
    means = descriptors @ projection

    n = k_total * spec.samples_per_class
    features = np.repeat(means, spec.samples_per_class, axis=0)
    features = features + spec.noise_scale * rng.standard_normal((n, spec.feature_dim))
    labels = np.repeat(np.arange(k_total), spec.samples_per_class)

    return Dataset(
        name=f"synthetic-s{spec.k_seen}u{spec.k_unseen}-d{spec.feature_dim}-seed{spec.seed}",
        features=features,
        labels=labels,
        descriptors=descriptors,
        class_ids=tuple(range(k_total)),
        seen=tuple(range(spec.k_seen)),
        unseen=tuple(range(spec.k_seen, k_total)),
    )


def holdout_seen_rows(dataset: Dataset, fraction: float = 0.2, seed: int = 0):
    """Split seen rows into train/test index arrays, per class, seeded.

    The trainer and the evaluation harness both derive the split from the same
    (fraction, seed) pair so the held-out rows are never trained on.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    train_idx, test_idx = [], []
    for cid in sorted(dataset.seen):
        idx = np.flatnonzero(dataset.labels == cid)
        perm = rng.permutation(len(idx))
        n_test = max(1, int(round(fraction * len(idx)))) if len(idx) > 1 else 0
        test_idx.append(idx[perm[:n_test]])
        train_idx.append(idx[perm[n_test:]])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def training_split(dataset: Dataset, fraction: float = 0.2, seed: int = 0):
    """Training view restricted to the non-held-out seen rows, plus the held-out row indices.

    The trainer consumes the view; the evaluation harness scores the held-out
    rows.  Both sides must pass the same (fraction, seed) pair.
    """
    train_idx, test_idx = holdout_seen_rows(dataset, fraction, seed)
    seen = tuple(sorted(dataset.seen))
    id_to_index = {cid: i for i, cid in enumerate(seen)}
    labels = dataset.labels[train_idx]
    view = TrainingView(
        features=dataset.features[train_idx].copy(),
        class_ids=seen,
        label_index=np.array([id_to_index[c] for c in labels], dtype=np.int64),
        descriptors=np.vstack([dataset.descriptor_of(cid) for cid in seen]),
    )
    return view, test_idx


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_bundle(dataset: Dataset, directory: str) -> None:
    """Write the three-CSV bundle with 17 significant digits (exact round trip)."""
    os.makedirs(directory, exist_ok=True)
    d = dataset.feature_dim
    k = dataset.descriptor_dim

    try:
        with open(os.path.join(directory, FEATURES_FILE), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "class_id"] + [f"x{i}" for i in range(d)])
            for i, (label, row) in enumerate(zip(dataset.labels, dataset.features)):
                writer.writerow([i, int(label)] + [_fmt(v) for v in row])
        with open(os.path.join(directory, DESCRIPTORS_FILE), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id"] + [f"s{i}" for i in range(k)])
            for cid, row in zip(dataset.class_ids, dataset.descriptors):
                writer.writerow([int(cid)] + [_fmt(v) for v in row])
        with open(os.path.join(directory, SPLIT_FILE), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "split"])
            for cid in dataset.class_ids:
                writer.writerow([int(cid), "seen" if cid in dataset.seen else "unseen"])
    except OSError as exc:
        raise OSError(f"cannot write bundle under {directory}: {exc}") from exc


def _read_rows(path: str) -> list[list[str]]:
    if not os.path.exists(path):
        raise BundleError(f"missing bundle file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _parse_float(cell: str, path: str, line: int, col: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise BundleError(
            f"{path}:{line}: column {col}: non-numeric cell {cell!r}"
        ) from None


def _parse_int(cell: str, path: str, line: int, col: int) -> int:
    try:
        return int(cell)
    except ValueError:
        raise BundleError(f"{path}:{line}: column {col}: non-integer cell {cell!r}") from None


def load_bundle(directory: str, name: str | None = None) -> Dataset:
    """Load and fully validate a three-CSV bundle.

    The first violated invariant is reported with its file, line, and column.
    """
    feat_path = os.path.join(directory, FEATURES_FILE)
    desc_path = os.path.join(directory, DESCRIPTORS_FILE)
    split_path = os.path.join(directory, SPLIT_FILE)

    desc_rows = _read_rows(desc_path)
    if not desc_rows:
        raise BundleError(f"{desc_path}: empty file")
    header = desc_rows[0]
    if len(header) < 2 or header[0] != "class_id" or header[1:] != [f"s{i}" for i in range(len(header) - 1)]:
        raise BundleError(f"{desc_path}:1: bad header {header!r}, expected class_id,s0,...")
    k = len(header) - 1
    class_ids: list[int] = []
    descriptors = []
    for line_no, row in enumerate(desc_rows[1:], start=2):
        if len(row) != k + 1:
            raise BundleError(
                f"{desc_path}:{line_no}: expected {k + 1} cells, got {len(row)} (ragged row)"
            )
        cid = _parse_int(row[0], desc_path, line_no, 1)
        if cid in class_ids:
            raise BundleError(f"{desc_path}:{line_no}: duplicate class_id {cid}")
        class_ids.append(cid)
        descriptors.append(
            [_parse_float(c, desc_path, line_no, j + 2) for j, c in enumerate(row[1:])]
        )
    if not class_ids:
        raise BundleError(f"{desc_path}: no descriptor rows")

    split_rows = _read_rows(split_path)
    if not split_rows or split_rows[0] != ["class_id", "split"]:
        raise BundleError(f"{split_path}:1: bad header, expected class_id,split")
    seen, unseen = [], []
    tagged = {}
    for line_no, row in enumerate(split_rows[1:], start=2):
        if len(row) != 2:
            raise BundleError(f"{split_path}:{line_no}: expected 2 cells, got {len(row)}")
        cid = _parse_int(row[0], split_path, line_no, 1)
        tag = row[1].strip()
        if tag not in ("seen", "unseen"):
            raise BundleError(
                f"{split_path}:{line_no}: column 2: split must be 'seen' or 'unseen', got {tag!r}"
            )
        if cid in tagged:
            if tagged[cid] != tag:
                raise BundleError(
                    f"{split_path}:{line_no}: class {cid} tagged both seen and unseen; "
                    "the split must satisfy S ∩ U = ∅"
                )
            raise BundleError(f"{split_path}:{line_no}: duplicate class_id {cid}")
        tagged[cid] = tag
        (seen if tag == "seen" else unseen).append(cid)
    if set(tagged) != set(class_ids):
        extra = sorted(set(tagged) - set(class_ids))
        missing = sorted(set(class_ids) - set(tagged))
        raise BundleError(
            f"{split_path}: split classes do not match descriptors "
            f"(missing {missing}, unknown {extra})"
        )

    feat_rows = _read_rows(feat_path)
    if not feat_rows:
        raise BundleError(f"{feat_path}: empty file")
    header = feat_rows[0]
    if (
        len(header) < 3
        or header[:2] != ["id", "class_id"]
        or header[2:] != [f"x{i}" for i in range(len(header) - 2)]
    ):
        raise BundleError(f"{feat_path}:1: bad header {header!r}, expected id,class_id,x0,...")
    d = len(header) - 2
    features = []
    labels = []
    for line_no, row in enumerate(feat_rows[1:], start=2):
        if len(row) != d + 2:
            raise BundleError(
                f"{feat_path}:{line_no}: expected {d + 2} cells, got {len(row)} (ragged row)"
            )
        _parse_int(row[0], feat_path, line_no, 1)
        label = _parse_int(row[1], feat_path, line_no, 2)
        if label not in tagged:
            raise BundleError(
                f"{feat_path}:{line_no}: column 2: label {label} has no descriptor"
            )
        labels.append(label)
        features.append([_parse_float(c, feat_path, line_no, j + 3) for j, c in enumerate(row[2:])])
    if not labels:
        raise BundleError(f"{feat_path}: no feature rows")

    order = np.argsort(np.array(class_ids, dtype=np.int64), kind="stable")
    class_ids_sorted = [class_ids[i] for i in order]
    descriptors_sorted = np.array(descriptors, dtype=np.float64)[order]

    return Dataset(
        name=name or os.path.basename(os.path.normpath(directory)),
        features=np.array(features, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        descriptors=descriptors_sorted,
        class_ids=tuple(class_ids_sorted),
        seen=tuple(sorted(seen)),
        unseen=tuple(sorted(unseen)),
    )
