"""Adversarial training loop: critic with gradient penalty, conditional generator,
and a pluggable deviation signal on hallucinated generations.

Per round the discriminator takes ``n_critic`` updates, then the generator
takes one.  The generator objective combines the walk loss on hallucinated
generations (weighted by ``deviation_weight``), the critic scores of unseen-
and seen-conditioned generations, and the class log-likelihood of the
seen-conditioned ones.  The discriminator objective is the usual Wasserstein
triple with a Lipschitz gradient penalty plus half-weighted classification
terms on real and seen-fake rows.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from grawd.autograd import (
    DimensionError,
    Mat,
    NonFiniteError,
    Parameter,
    Tape,
    cross_entropy_rows,
    mean_all,
    mul,
    row_softmax,
    smul,
    sqrt,
    sum_all,
    sum_rows,
)
from grawd.data import Dataset, TrainingView, training_split
from grawd.nets import EpisodicMemory, FeatureGan
from grawd.walk import (
    WalkConfig,
    WalkLossReport,
    build_similarities,
    grawd_loss,
    grawt_loss,
    landing_row_entropy,
    make_transitions,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EpochRecord",
    "HallucinationSampler",
    "Adam",
    "ConfigurationError",
    "TrainingAborted",
    "gradient_penalty",
    "extra_class_loss",
    "discriminator_loss",
    "generator_loss",
    "discriminator_step",
    "generator_step",
    "sample_gen_draws",
    "GenDraws",
    "train",
    "LOG_COLUMNS",
]

DEVIATION_MODES = ("grawd", "grawt", "extra_class", "none")
CENTER_MODES = ("z_zero", "episodic")

# per-epoch log column order (one delimited line per epoch)
LOG_COLUMNS = (
    "epoch",
    "loss_d",
    "loss_g",
    "deviation",
    "visit",
    "walk_total",
    "landing_entropy",
    "stoch_residual",
)


class ConfigurationError(ValueError):
    """Invalid training configuration."""


class TrainingAborted(RuntimeError):
    """A step produced a non-finite loss; carries the failing context."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    n_critic: int = 5
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.9)
    deviation_mode: str = "grawd"
    deviation_weight: float = 1.0  # lambda on the deviation term
    n_u: int | None = None  # hallucinated generations per step; defaults to batch_size
    walk: WalkConfig = field(default_factory=WalkConfig)
    center_mode: str = "z_zero"
    memory_size: int = 10  # m, episodic samples per class
    gp_weight: float = 1.0
    cls_weight: float = 0.5
    noise_dim: int = 128
    g_hidden: tuple[int, ...] = (256, 256)
    d_hidden: tuple[int, ...] = (256,)
    beta: float = 3.0
    slope: float = 0.2
    holdout_fraction: float = 0.2
    holdout_seed: int = 0
    ema_decay: float = 0.0  # >0 evaluates/checkpoints an exponential average of the weights
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.n_critic < 1:
            raise ConfigurationError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.deviation_weight < 0:
            raise ConfigurationError(
                f"deviation_weight must be >= 0, got {self.deviation_weight}"
            )
        if self.resolved_n_u < 2:
            raise ConfigurationError(
                f"n_u must be >= 2 (a walk needs at least two points), got {self.resolved_n_u}"
            )
        if self.deviation_mode not in DEVIATION_MODES:
            raise ConfigurationError(
                f"deviation_mode must be one of {DEVIATION_MODES}, got {self.deviation_mode!r}"
            )
        if self.center_mode not in CENTER_MODES:
            raise ConfigurationError(
                f"center_mode must be one of {CENTER_MODES}, got {self.center_mode!r}"
            )
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigurationError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    @property
    def resolved_n_u(self) -> int:
        return self.batch_size if self.n_u is None else self.n_u


@dataclass
class EpochRecord:
    epoch: int
    loss_d: float
    loss_g: float
    deviation: float
    visit: float
    walk_total: float
    landing_entropy: float
    stoch_residual: float

    def as_csv_row(self) -> str:
        values = [
            str(self.epoch),
            repr(self.loss_d),
            repr(self.loss_g),
            repr(self.deviation),
            repr(self.visit),
            repr(self.walk_total),
            repr(self.landing_entropy),
            repr(self.stoch_residual),
        ]
        return ",".join(values)


@dataclass
class TrainResult:
    model: FeatureGan
    records: list
    checkpoint_path: str | None = None
    log_path: str | None = None


class HallucinationSampler:
    """Convex combinations of two distinct seen descriptors, alpha ~ U[0.2, 0.8]."""

    def __init__(
        self,
        descriptors: np.ndarray,
        rng: np.random.Generator,
        low: float = 0.2,
        high: float = 0.8,
    ):
        descriptors = np.asarray(descriptors, dtype=np.float64)
        if descriptors.shape[0] < 2:
            raise ConfigurationError(
                f"hallucination needs at least 2 seen classes, got {descriptors.shape[0]}"
            )
        self.descriptors = descriptors
        self.rng = rng
        self.low = low
        self.high = high

    def sample_batch(self, n: int) -> np.ndarray:
        k = self.descriptors.shape[0]
        a = self.rng.integers(0, k, size=n)
        b = (a + self.rng.integers(1, k, size=n)) % k  # distinct from a by construction
        alpha = self.rng.uniform(self.low, self.high, size=(n, 1))
        return alpha * self.descriptors[a] + (1.0 - alpha) * self.descriptors[b]

    def sample(self) -> np.ndarray:
        return self.sample_batch(1)[0]


class Adam:
    """Adaptive-moment optimizer with the decay pair customary for penalty critics."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.5, 0.9),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            m_hat = self.m[i] / (1.0 - self.b1**self.t)
            v_hat = self.v[i] / (1.0 - self.b2**self.t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def _one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(indices), k))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _mean_class_xent(logits: Mat, onehot: np.ndarray) -> Mat:
    """Mean softmax cross-entropy of the class head against one-hot targets."""
    return smul(cross_entropy_rows(row_softmax(logits), onehot), 1.0 / onehot.shape[0])


def gradient_penalty(score_fn, x_real: np.ndarray, x_fake: np.ndarray, rng) -> Mat:
    """Mean over rows of (||grad of the critic at the interpolate|| - 1)^2.

    One interpolation coefficient per row, uniform on [0, 1].  The inner
    gradient is taken with ``create_graph=True`` so the penalty itself is
    differentiable with respect to the critic parameters (double backward).
    """
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape != x_fake.shape:
        raise DimensionError(
            f"gradient_penalty: shapes differ, real {x_real.shape} vs fake {x_fake.shape}"
        )
    tape = Tape.current()
    eps = rng.uniform(size=(x_real.shape[0], 1))
    x_tilde = Mat(eps * x_real + (1.0 - eps) * x_fake, watch=True)
    scores = score_fn(x_tilde)
    (grad,) = tape.gradient(sum_all(scores), [x_tilde], create_graph=True)
    # tiny floor keeps the norm differentiable at an exactly-zero gradient;
    # it perturbs the penalty by O(1e-12) at most
    norms = sqrt(sum_rows(mul(grad, grad)) + 1e-24)
    return mean_all(mul(norms - 1.0, norms - 1.0))


def extra_class_loss(fake_u: Mat, model: FeatureGan, n_seen: int) -> Mat:
    """Mean cross-entropy of hallucinated generations against the extra class slot."""
    logits = model.class_logits(fake_u)
    if logits.cols != n_seen + 1:
        raise ConfigurationError(
            f"extra_class mode needs a class head of width {n_seen + 1}, got {logits.cols}"
        )
    target = np.zeros((fake_u.rows, n_seen + 1))
    target[:, n_seen] = 1.0
    return smul(cross_entropy_rows(row_softmax(logits), target), 1.0 / fake_u.rows)


@dataclass
class DStepReport:
    total: float
    w_fake_u: float
    w_fake_s: float
    w_real: float
    penalty: float
    cls_real: float
    cls_fake: float


@dataclass
class GenStepReport:
    total: float
    deviation_term: float
    adv_unseen: float
    adv_seen: float
    cls_seen: float
    walk: WalkLossReport


@dataclass
class GenDraws:
    """Frozen random draws for one generator objective evaluation."""

    s_u: np.ndarray
    z_u: np.ndarray
    class_pick: np.ndarray
    z_s: np.ndarray


def sample_gen_draws(cfg: TrainConfig, view: TrainingView, rng, sampler) -> GenDraws:
    n_u = cfg.resolved_n_u
    return GenDraws(
        s_u=sampler.sample_batch(n_u),
        z_u=rng.standard_normal((n_u, cfg.noise_dim)),
        class_pick=rng.integers(0, len(view.class_ids), size=cfg.batch_size),
        z_s=rng.standard_normal((cfg.batch_size, cfg.noise_dim)),
    )


def discriminator_loss(
    model: FeatureGan,
    x_real: np.ndarray,
    y_index: np.ndarray,
    cfg: TrainConfig,
    fake_u: np.ndarray,
    fake_s: np.ndarray,
    gp_rng,
):
    """Assemble the critic objective on an active tape; returns (loss, report nodes)."""
    w_fake_u = mean_all(model.real_score(Mat(fake_u)))
    w_fake_s = mean_all(model.real_score(Mat(fake_s)))
    w_real = mean_all(model.real_score(Mat(x_real)))
    penalty = gradient_penalty(model.real_score, x_real, fake_s, gp_rng)
    onehot = _one_hot(y_index, model.n_classes)
    cls_real = _mean_class_xent(model.class_logits(Mat(x_real)), onehot)
    cls_fake = _mean_class_xent(model.class_logits(Mat(fake_s)), onehot)
    loss = (
        w_fake_u
        + w_fake_s
        - w_real
        + smul(penalty, cfg.gp_weight)
        + smul(cls_real, cfg.cls_weight)
        + smul(cls_fake, cfg.cls_weight)
    )
    terms = dict(
        w_fake_u=w_fake_u, w_fake_s=w_fake_s, w_real=w_real,
        penalty=penalty, cls_real=cls_real, cls_fake=cls_fake,
    )
    return loss, terms


def generator_loss(
    model: FeatureGan,
    view: TrainingView,
    cfg: TrainConfig,
    draws: GenDraws,
    centers_fn,
):
    """Assemble the generator objective on an active tape.

    The walk report is computed in every mode for logging; it enters the loss
    only under grawd/grawt.  extra_class swaps in the fake-class penalty, and
    none drops the term entirely.
    """
    k = len(view.class_ids)
    gen_u = model.generate(Mat(draws.s_u), Mat(draws.z_u))
    x_u = model.extract_phi(gen_u)
    centers = centers_fn()
    a, b = build_similarities(x_u, centers, cfg.walk)
    bundle = make_transitions(a, b)
    if cfg.deviation_mode == "grawt":
        walk_report = grawt_loss(bundle, cfg.walk)
    else:
        walk_report = grawd_loss(bundle, cfg.walk)

    if cfg.deviation_mode in ("grawd", "grawt"):
        deviation_term = smul(walk_report.total, cfg.deviation_weight)
    elif cfg.deviation_mode == "extra_class":
        deviation_term = smul(extra_class_loss(gen_u, model, k), cfg.deviation_weight)
    else:
        deviation_term = Mat(np.zeros((1, 1)))

    adv_unseen = smul(mean_all(model.real_score(gen_u)), -1.0)
    fake_s = model.generate(Mat(view.descriptors[draws.class_pick]), Mat(draws.z_s))
    adv_seen = smul(mean_all(model.real_score(fake_s)), -1.0)
    onehot = _one_hot(draws.class_pick, model.n_classes)
    cls_seen = _mean_class_xent(model.class_logits(fake_s), onehot)

    loss = deviation_term + adv_unseen + adv_seen + cls_seen
    terms = dict(
        deviation_term=deviation_term, adv_unseen=adv_unseen,
        adv_seen=adv_seen, cls_seen=cls_seen,
    )
    return loss, terms, walk_report


def discriminator_step(
    model: FeatureGan,
    x_real: np.ndarray,
    y_index: np.ndarray,
    view: TrainingView,
    cfg: TrainConfig,
    rng,
    sampler: HallucinationSampler,
    opt_d: Adam,
) -> DStepReport:
    """One critic update on a real batch; only discriminator parameters move."""
    for p in model.parameters:
        p.zero_grad()
    try:
        # fakes are sampled detached: the generator is a fixed sampler here
        with Tape():
            s_u = sampler.sample_batch(cfg.resolved_n_u)
            z_u = rng.standard_normal((cfg.resolved_n_u, cfg.noise_dim))
            fake_u = model.generate(Mat(s_u), Mat(z_u)).value.copy()
            s_k = view.descriptors[y_index]
            z_s = rng.standard_normal((x_real.shape[0], cfg.noise_dim))
            fake_s = model.generate(Mat(s_k), Mat(z_s)).value.copy()

        with Tape() as tape:
            loss, terms = discriminator_loss(model, x_real, y_index, cfg, fake_u, fake_s, rng)
            tape.backward(loss)
    except NonFiniteError as exc:
        raise TrainingAborted(f"discriminator step produced a non-finite value: {exc}") from exc
    opt_d.step()
    return DStepReport(
        total=loss.item(),
        w_fake_u=terms["w_fake_u"].item(),
        w_fake_s=terms["w_fake_s"].item(),
        w_real=terms["w_real"].item(),
        penalty=terms["penalty"].item(),
        cls_real=terms["cls_real"].item(),
        cls_fake=terms["cls_fake"].item(),
    )


def generator_step(
    model: FeatureGan,
    view: TrainingView,
    cfg: TrainConfig,
    rng,
    sampler: HallucinationSampler,
    centers_fn,
    opt_g: Adam,
) -> GenStepReport:
    """One generator update; only generator parameters move."""
    for p in model.parameters:
        p.zero_grad()
    try:
        with Tape() as tape:
            draws = sample_gen_draws(cfg, view, rng, sampler)
            loss, terms, walk_report = generator_loss(model, view, cfg, draws, centers_fn)
            tape.backward(loss)
    except NonFiniteError as exc:
        raise TrainingAborted(f"generator step produced a non-finite value: {exc}") from exc
    opt_g.step()
    return GenStepReport(
        total=loss.item(),
        deviation_term=terms["deviation_term"].item(),
        adv_unseen=terms["adv_unseen"].item(),
        adv_seen=terms["adv_seen"].item(),
        cls_seen=terms["cls_seen"].item(),
        walk=walk_report,
    )


def _write_log(path: str, records: list) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for record in records:
                fh.write(record.as_csv_row() + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def train(dataset: Dataset, cfg: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """Run the full adversarial loop; deterministic given cfg.seed.

    Writes ``checkpoint.npz`` and ``train_log.csv`` under ``out_dir`` when
    given (both atomically).  With ``epochs=0`` the initialized model is
    checkpointed and the log holds only its header.
    """
    view, _ = training_split(dataset, cfg.holdout_fraction, cfg.holdout_seed)
    k = len(view.class_ids)
    n_logits = k + 1 if cfg.deviation_mode == "extra_class" else k

    model = FeatureGan(
        descriptor_dim=view.descriptors.shape[1],
        feature_dim=view.features.shape[1],
        n_classes=n_logits,
        noise_dim=cfg.noise_dim,
        g_hidden=cfg.g_hidden,
        d_hidden=cfg.d_hidden,
        beta=cfg.beta,
        slope=cfg.slope,
        seed=cfg.seed,
    )
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7A1)))
    sampler = HallucinationSampler(view.descriptors, rng)
    opt_g = Adam(model.g_parameters, lr=cfg.lr, betas=cfg.adam_betas)
    opt_d = Adam(model.d_parameters, lr=cfg.lr, betas=cfg.adam_betas)

    if cfg.center_mode == "episodic":
        memory = EpisodicMemory(
            view.features,
            view.label_index,
            list(range(k)),
            m=cfg.memory_size,
            rng=rng,
        )
        centers_fn = lambda: memory.centers(model)
    else:
        centers_fn = lambda: model.class_centers(view.descriptors)

    n_rows = view.features.shape[0]
    if n_rows < cfg.batch_size:
        raise ConfigurationError(
            f"training needs at least batch_size={cfg.batch_size} seen rows, got {n_rows}"
        )

    shadow = (
        {p.name: p.value.copy() for p in model.parameters} if cfg.ema_decay > 0 else None
    )

    def ema_update():
        if shadow is not None:
            for p in model.parameters:
                shadow[p.name] *= cfg.ema_decay
                shadow[p.name] += (1.0 - cfg.ema_decay) * p.value

    records: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_rows)
        n_batches = n_rows // cfg.batch_size
        batches = [
            order[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(n_batches)
        ]
        rounds = max(1, n_batches // cfg.n_critic)

        d_losses: list[float] = []
        g_reports: list[GenStepReport] = []
        cursor = 0
        for _ in range(rounds):
            for _ in range(cfg.n_critic):
                idx = batches[cursor % n_batches]
                cursor += 1
                try:
                    d_report = discriminator_step(
                        model,
                        view.features[idx],
                        view.label_index[idx],
                        view,
                        cfg,
                        rng,
                        sampler,
                        opt_d,
                    )
                except TrainingAborted as exc:
                    raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
                d_losses.append(d_report.total)
                ema_update()
            try:
                g_report = generator_step(model, view, cfg, rng, sampler, centers_fn, opt_g)
            except TrainingAborted as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
            g_reports.append(g_report)
            ema_update()

        records.append(
            EpochRecord(
                epoch=epoch,
                loss_d=float(np.mean(d_losses)),
                loss_g=float(np.mean([g.total for g in g_reports])),
                deviation=float(np.mean([g.walk.deviation.item() for g in g_reports])),
                visit=float(np.mean([g.walk.visit.item() for g in g_reports])),
                walk_total=float(np.mean([g.walk.total.item() for g in g_reports])),
                landing_entropy=float(
                    np.mean([landing_row_entropy(g.walk) for g in g_reports])
                ),
                stoch_residual=float(max(g.walk.stochastic_residual for g in g_reports)),
            )
        )

    if shadow is not None:
        for p in model.parameters:
            p.value[...] = shadow[p.name]

    checkpoint_path = log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.npz")
        log_path = os.path.join(out_dir, "train_log.csv")
        model.save(checkpoint_path)
        _write_log(log_path, records)
    return TrainResult(model=model, records=records, checkpoint_path=checkpoint_path, log_path=log_path)
