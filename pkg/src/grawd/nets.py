"""Conditional feature generator, two-headed critic, and class-center extraction.

The generator maps a concatenated [noise ; semantic descriptor] row to a
visual-feature row.  The discriminator trunk produces the representation used
everywhere downstream: its last-layer activations, rescaled to a fixed norm,
are the feature space in which similarities, class centers, and all evaluation
distances live.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from grawd.autograd import (
    DegenerateInputError,
    DimensionError,
    Mat,
    Parameter,
    add,
    concat_cols,
    leaky_relu,
    matmul,
    scaled_l2_normalize,
)

__all__ = ["Dense", "GeneratorNet", "DiscriminatorNet", "FeatureGan", "EpisodicMemory"]

CHECKPOINT_VERSION = 1


class Dense:
    """Affine layer with centered-uniform 1/sqrt(fan_in) initialisation."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = 1.0 / np.sqrt(n_in)
        self.w = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), name=f"{name}.w")
        self.b = Parameter(np.zeros((1, n_out)), name=f"{name}.b")

    def __call__(self, x: Mat) -> Mat:
        return add(matmul(x, self.w), self.b)

    @property
    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class GeneratorNet:
    """Maps [z ; s] rows to feature rows through leaky-rectified hidden layers."""

    def __init__(
        self,
        descriptor_dim: int,
        noise_dim: int,
        feature_dim: int,
        hidden: tuple[int, ...] = (256, 256),
        slope: float = 0.2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.descriptor_dim = descriptor_dim
        self.noise_dim = noise_dim
        self.feature_dim = feature_dim
        self.hidden = tuple(hidden)
        self.slope = slope
        widths = [noise_dim + descriptor_dim, *hidden, feature_dim]
        self.layers = [
            Dense(widths[i], widths[i + 1], rng, name=f"g{i}") for i in range(len(widths) - 1)
        ]

    def __call__(self, s: Mat, z: Mat) -> Mat:
        if s.cols != self.descriptor_dim:
            raise DimensionError(
                f"generator: descriptor width {s.cols}, expected {self.descriptor_dim}"
            )
        if z.cols != self.noise_dim:
            raise DimensionError(f"generator: noise width {z.cols}, expected {self.noise_dim}")
        if s.rows != z.rows:
            raise DimensionError(f"generator: {s.rows} descriptors vs {z.rows} noise rows")
        x = concat_cols(z, s)
        for layer in self.layers[:-1]:
            x = leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    @property
    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters]


class DiscriminatorNet:
    """Shared trunk with an unbounded critic head and a seen-class logit head."""

    def __init__(
        self,
        feature_dim: int,
        n_classes: int,
        hidden: tuple[int, ...] = (256,),
        slope: float = 0.2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.hidden = tuple(hidden)
        self.slope = slope
        widths = [feature_dim, *hidden]
        self.trunk_layers = [
            Dense(widths[i], widths[i + 1], rng, name=f"d{i}") for i in range(len(widths) - 1)
        ]
        self.trunk_width = widths[-1]
        self.real_head = Dense(self.trunk_width, 1, rng, name="d_real")
        self.class_head = Dense(self.trunk_width, n_classes, rng, name="d_class")

    def trunk(self, x: Mat) -> Mat:
        if x.cols != self.feature_dim:
            raise DimensionError(f"discriminator: input width {x.cols}, expected {self.feature_dim}")
        for layer in self.trunk_layers:
            x = leaky_relu(layer(x), self.slope)
        return x

    def real_score(self, x: Mat) -> Mat:
        return self.real_head(self.trunk(x))

    def class_logits(self, x: Mat) -> Mat:
        return self.class_head(self.trunk(x))

    def __call__(self, x: Mat) -> tuple[Mat, Mat, Mat]:
        t = self.trunk(x)
        return self.real_head(t), self.class_head(t), t

    @property
    def parameters(self) -> list[Parameter]:
        params = [p for layer in self.trunk_layers for p in layer.parameters]
        return params + self.real_head.parameters + self.class_head.parameters


class FeatureGan:
    """Generator plus discriminator plus the shared feature extractor phi.

    phi(x) is the discriminator trunk output rescaled so every row has norm
    ``beta`` (default 3).  Class centers are phi of zero-noise generations from
    the per-class descriptors and move with both networks.
    """

    def __init__(
        self,
        descriptor_dim: int,
        feature_dim: int,
        n_classes: int,
        noise_dim: int = 128,
        g_hidden: tuple[int, ...] = (256, 256),
        d_hidden: tuple[int, ...] = (256,),
        beta: float = 3.0,
        slope: float = 0.2,
        seed: int = 0,
    ):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.descriptor_dim = descriptor_dim
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.noise_dim = noise_dim
        self.beta = beta
        self.seed = seed
        self.generator = GeneratorNet(
            descriptor_dim, noise_dim, feature_dim, hidden=g_hidden, slope=slope, rng=rng
        )
        self.discriminator = DiscriminatorNet(
            feature_dim, n_classes, hidden=d_hidden, slope=slope, rng=rng
        )

    def generate(self, s: Mat, z: Mat) -> Mat:
        return self.generator(s, z)

    def discriminate(self, x: Mat) -> tuple[Mat, Mat, Mat]:
        return self.discriminator(x)

    def real_score(self, x: Mat) -> Mat:
        return self.discriminator.real_score(x)

    def class_logits(self, x: Mat) -> Mat:
        return self.discriminator.class_logits(x)

    def extract_phi(self, x: Mat) -> Mat:
        t = self.discriminator.trunk(x)
        try:
            return scaled_l2_normalize(t, self.beta)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"extract_phi: {exc}") from exc

    def class_centers(self, descriptors: np.ndarray) -> Mat:
        """One center row per descriptor row: phi of the zero-noise generation."""
        d = np.asarray(descriptors, dtype=np.float64)
        s = Mat(d)
        z = Mat(np.zeros((d.shape[0], self.noise_dim)))
        return self.extract_phi(self.generate(s, z))

    @property
    def g_parameters(self) -> list[Parameter]:
        return self.generator.parameters

    @property
    def d_parameters(self) -> list[Parameter]:
        return self.discriminator.parameters

    @property
    def parameters(self) -> list[Parameter]:
        return self.g_parameters + self.d_parameters

    # --- checkpointing ---

    def _meta(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "descriptor_dim": self.descriptor_dim,
            "feature_dim": self.feature_dim,
            "n_classes": self.n_classes,
            "noise_dim": self.noise_dim,
            "g_hidden": list(self.generator.hidden),
            "d_hidden": list(self.discriminator.hidden),
            "beta": self.beta,
            "slope": self.generator.slope,
            "seed": self.seed,
        }

    def save(self, path: str) -> None:
        """Atomic checkpoint write; the round trip is bit-exact."""
        arrays = {p.name: p.value for p in self.parameters}
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, __meta__=json.dumps(self._meta(), sort_keys=True), **arrays)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "FeatureGan":
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path) as archive:
            meta = json.loads(str(archive["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(
                    f"checkpoint version {meta.get('version')} unsupported "
                    f"(expected {CHECKPOINT_VERSION})"
                )
            model = cls(
                descriptor_dim=meta["descriptor_dim"],
                feature_dim=meta["feature_dim"],
                n_classes=meta["n_classes"],
                noise_dim=meta["noise_dim"],
                g_hidden=tuple(meta["g_hidden"]),
                d_hidden=tuple(meta["d_hidden"]),
                beta=meta["beta"],
                slope=meta["slope"],
                seed=meta["seed"],
            )
            for p in model.parameters:
                stored = archive[p.name]
                if stored.shape != p.value.shape:
                    raise ValueError(
                        f"checkpoint array {p.name} has shape {stored.shape}, expected {p.value.shape}"
                    )
                p.value[...] = stored
        return model


class EpisodicMemory:
    """A frozen sample of m real feature rows per class; centers are phi-means.

    The sample is drawn once at construction; the phi features are recomputed
    on every ``centers`` call so the centers track the moving discriminator.
    """

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        class_ids: list[int],
        m: int = 10,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.m = m
        self.class_ids = list(class_ids)
        rows = []
        for cid in self.class_ids:
            idx = np.flatnonzero(labels == cid)
            if len(idx) < m:
                raise ValueError(
                    f"episodic memory: class {cid} has {len(idx)} samples, needs m={m}"
                )
            pick = rng.choice(idx, size=m, replace=False)
            rows.append(features[np.sort(pick)])
        self.samples = np.vstack(rows)  # (K*m, d), frozen
        k = len(self.class_ids)
        selector = np.zeros((k, k * m))
        for i in range(k):
            selector[i, i * m : (i + 1) * m] = 1.0 / m
        self._selector = selector

    def centers(self, model: FeatureGan) -> Mat:
        phi = model.extract_phi(Mat(self.samples))
        return matmul(Mat(self._selector), phi)
