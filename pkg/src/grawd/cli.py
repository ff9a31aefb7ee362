"""Command-line front end: synthesize bundles, train, evaluate, ablate, gradcheck.

Configuration is plain ``key=value`` lines (``#`` comments) with every key
mirrored as a ``--key value`` flag that overrides the file.  Unknown keys are
fatal.  Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric abort, 5 gradcheck
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from grawd import autograd as ag
from grawd.autograd import Mat, Tape
from grawd.data import (
    BundleError,
    SyntheticSpec,
    load_bundle,
    save_bundle,
    synthesize,
    training_split,
)
from grawd.evaluate import (
    EvalConfig,
    EvaluationError,
    evaluate,
    write_curve_csv,
    write_report,
)
from grawd.nets import FeatureGan
from grawd.train import (
    ConfigurationError,
    HallucinationSampler,
    TrainConfig,
    TrainingAborted,
    discriminator_loss,
    generator_loss,
    gradient_penalty,
    sample_gen_draws,
    train,
)
from grawd.walk import WalkConfig, build_similarities, make_transitions, walk_loss

__all__ = ["main", "entry"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

ABLATION_ARMS = (
    ("grawt_T0", "grawt", 0),
    ("grawt_T3", "grawt", 3),
    ("extra_class", "extra_class", 3),
    ("grawd_T1", "grawd", 1),
    ("grawd_T3", "grawd", 3),
    ("grawd_T5", "grawd", 5),
    ("grawd_T10", "grawd", 10),
)


class UsageError(ValueError):
    pass


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(text).split(",") if part != "")
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# key -> (caster, default); defaults of None mean required
SYNTH_KEYS = {
    "out": (str, None),
    "k_seen": (int, 10),
    "k_unseen": (int, 5),
    "feature_dim": (int, 16),
    "descriptor_dim": (int, 8),
    "samples_per_class": (int, 100),
    "noise_scale": (float, 0.25),
    "seed": (int, 0),
}

TRAIN_KEYS = {
    "data": (str, None),
    "out": (str, None),
    "epochs": (int, 50),
    "batch_size": (int, 32),
    "n_critic": (int, 5),
    "lr": (float, 1e-4),
    "lambda": (float, 1.0),
    "n_u": (int, 0),  # 0 means: use batch_size
    "walk_T": (int, 10),
    "gamma": (float, 0.7),
    "diag_fill": (float, -1e9),
    "deviation": (str, "grawd"),
    "center_mode": (str, "z_zero"),
    "memory_size": (int, 10),
    "gp_weight": (float, 1.0),
    "cls_weight": (float, 0.5),
    "noise_dim": (int, 128),
    "g_hidden": (_int_tuple, (256, 256)),
    "d_hidden": (_int_tuple, (256,)),
    "beta": (float, 3.0),
    "slope": (float, 0.2),
    "holdout_fraction": (float, 0.2),
    "holdout_seed": (int, 0),
    "ema_decay": (float, 0.0),
    "seed": (int, 0),
}

EVAL_KEYS = {
    "data": (str, None),
    "checkpoint": (str, None),
    "out": (str, None),
    "gen_per_class": (int, 60),
    "n_offsets": (int, 201),
    "holdout_fraction": (float, 0.2),
    "holdout_seed": (int, 0),
    "seed": (int, 0),
}

ABLATE_KEYS = dict(TRAIN_KEYS)
ABLATE_KEYS.pop("deviation")
ABLATE_KEYS.pop("walk_T")
ABLATE_KEYS.update(
    {
        "seeds": (int, 5),
        "gen_per_class": (int, 60),
        "n_offsets": (int, 201),
    }
)

GRADCHECK_KEYS = {
    "seed": (int, 0),
}


def _parse_config_file(path: str, keys: dict) -> dict:
    if not os.path.exists(path):
        raise OSError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in keys:
                raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def _resolve(keys: dict, args: argparse.Namespace) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(_parse_config_file(args.config, keys))
    for key in keys:
        flag_value = getattr(args, key.replace("-", "_"), None)
        if flag_value is not None:
            values[key] = flag_value
    resolved = {}
    for key, (caster, default) in keys.items():
        if key in values:
            raw = values[key]
            try:
                resolved[key] = raw if not isinstance(raw, str) else caster(raw)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key!r}: {exc}") from None
        else:
            if default is None:
                raise UsageError(f"missing required option --{key}")
            resolved[key] = default
    return resolved


def _add_command(subparsers, name: str, keys: dict, help_text: str):
    sub = subparsers.add_parser(name, help=help_text)
    sub.add_argument("--config", help="key=value config file", default=None)
    for key, (caster, default) in keys.items():
        shown = default if default is not None else "(required)"
        sub.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            default=None,
            metavar="V",
            help=f"default: {shown}",
        )
    return sub


def _train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        n_critic=values["n_critic"],
        lr=values["lr"],
        deviation_mode=values["deviation"],
        deviation_weight=values["lambda"],
        n_u=values["n_u"] if values["n_u"] > 0 else None,
        walk=WalkConfig(
            steps=values["walk_T"], gamma=values["gamma"], diag_fill=values["diag_fill"]
        ),
        center_mode=values["center_mode"],
        memory_size=values["memory_size"],
        gp_weight=values["gp_weight"],
        cls_weight=values["cls_weight"],
        noise_dim=values["noise_dim"],
        g_hidden=values["g_hidden"],
        d_hidden=values["d_hidden"],
        beta=values["beta"],
        slope=values["slope"],
        holdout_fraction=values["holdout_fraction"],
        holdout_seed=values["holdout_seed"],
        ema_decay=values["ema_decay"],
        seed=values["seed"],
    )


def cmd_synth(values: dict) -> int:
    spec = SyntheticSpec(
        k_seen=values["k_seen"],
        k_unseen=values["k_unseen"],
        feature_dim=values["feature_dim"],
        descriptor_dim=values["descriptor_dim"],
        samples_per_class=values["samples_per_class"],
        noise_scale=values["noise_scale"],
        seed=values["seed"],
    )
    dataset = synthesize(spec)
    save_bundle(dataset, values["out"])
    print(f"bundle written to {values['out']}")
    print(
        f"classes: {len(dataset.seen)} seen + {len(dataset.unseen)} unseen, "
        f"rows: {len(dataset.labels)}, feature dim: {dataset.feature_dim}, "
        f"descriptor dim: {dataset.descriptor_dim}"
    )
    return EXIT_OK


def cmd_train(values: dict) -> int:
    dataset = load_bundle(values["data"])
    cfg = _train_config(values)
    result = train(dataset, cfg, out_dir=values["out"])
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    if result.records:
        last = result.records[-1]
        print(
            f"final epoch {last.epoch}: loss_d={last.loss_d:.6f} loss_g={last.loss_g:.6f} "
            f"deviation={last.deviation:.6f} visit={last.visit:.6f}"
        )
    else:
        print("no epochs run; checkpoint holds the initialized model")
    return EXIT_OK


def cmd_eval(values: dict) -> int:
    dataset = load_bundle(values["data"])
    model = FeatureGan.load(values["checkpoint"])
    if model.descriptor_dim != dataset.descriptor_dim or model.feature_dim != dataset.feature_dim:
        raise UsageError(
            "checkpoint/bundle dimensions differ: model (descriptor, feature) = "
            f"({model.descriptor_dim}, {model.feature_dim}), bundle = "
            f"({dataset.descriptor_dim}, {dataset.feature_dim})"
        )
    cfg = EvalConfig(
        gen_per_class=values["gen_per_class"],
        n_offsets=values["n_offsets"],
        holdout_fraction=values["holdout_fraction"],
        holdout_seed=values["holdout_seed"],
        seed=values["seed"],
    )
    report = evaluate(model, dataset, cfg)
    os.makedirs(values["out"], exist_ok=True)
    write_report(report, os.path.join(values["out"], "eval_report.txt"))
    write_curve_csv(report, os.path.join(values["out"], "curve.csv"))
    print(f"top1_unseen: {report.top1_unseen:.6f}")
    print(f"su_auc: {report.auc:.6f}")
    print(f"best point: S={report.s_best:.6f} U={report.u_best:.6f} H={report.h_best:.6f}")
    return EXIT_OK


def cmd_ablate(values: dict) -> int:
    dataset = load_bundle(values["data"])
    eval_cfg = EvalConfig(
        gen_per_class=values["gen_per_class"],
        n_offsets=values["n_offsets"],
        holdout_fraction=values["holdout_fraction"],
        holdout_seed=values["holdout_seed"],
        seed=values["seed"],
    )
    rows = []
    means = []
    failures = []
    for arm_name, mode, steps in ABLATION_ARMS:
        arm_rows = []
        for seed in range(values["seeds"]):
            arm_values = dict(values)
            arm_values["deviation"] = mode
            arm_values["walk_T"] = steps
            arm_values["seed"] = seed
            cfg = _train_config(arm_values)
            try:
                result = train(dataset, cfg)
                report = evaluate(result.model, dataset, eval_cfg)
            except (TrainingAborted, ag.NonFiniteError) as exc:
                failures.append((arm_name, seed, str(exc)))
                print(f"arm {arm_name} seed {seed} failed: {exc}", file=sys.stderr)
                continue
            arm_rows.append((seed, report.top1_unseen, report.auc))
        rows.extend((arm_name, s, t, a) for s, t, a in arm_rows)
        if arm_rows:
            means.append(
                (
                    arm_name,
                    float(np.mean([t for _, t, _ in arm_rows])),
                    float(np.mean([a for _, _, a in arm_rows])),
                )
            )
    os.makedirs(values["out"], exist_ok=True)
    table_path = os.path.join(values["out"], "ablation.csv")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("arm,seed,top1_unseen,su_auc\n")
        for arm_name, seed, top1, auc in rows:
            fh.write(f"{arm_name},{seed},{top1!r},{auc!r}\n")
        fh.write("arm,mean,top1_unseen,su_auc\n")
        for arm_name, top1, auc in means:
            fh.write(f"{arm_name},mean,{top1!r},{auc!r}\n")
    print(f"ablation table: {table_path}")
    for arm_name, top1, auc in means:
        print(f"{arm_name}: mean top1={top1:.6f} mean su_auc={auc:.6f}")
    if not means:
        print("every ablation arm failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _gradcheck_suite(seed: int):
    """Finite-difference audit of every differentiable surface; yields (name, err, tol)."""
    rng = np.random.default_rng(seed)

    x0 = rng.standard_normal((3, 4))
    other = rng.standard_normal((4, 2))
    anchors = rng.standard_normal((2, 4))
    yield (
        "matmul",
        ag.finite_diff_check(lambda x: ag.sum_all(ag.matmul(x, Mat(other))), x0),
        1e-6,
    )
    yield (
        "row_softmax",
        ag.finite_diff_check(lambda x: ag.sum_all(ag.square(ag.row_softmax(x))), x0),
        1e-6,
    )
    yield (
        "pairwise_neg_sqdist",
        ag.finite_diff_check(
            lambda x: ag.sum_all(ag.square(ag.pairwise_neg_sqdist(x, Mat(anchors)))), x0
        ),
        1e-6,
    )
    yield (
        "scaled_l2_normalize",
        ag.finite_diff_check(lambda x: ag.sum_all(ag.scaled_l2_normalize(x, 3.0)), x0),
        1e-6,
    )
    yield (
        "cross_entropy_rows",
        ag.finite_diff_check(
            lambda x: ag.cross_entropy_rows(ag.row_softmax(x), np.full((1, 4), 0.25)), x0
        ),
        1e-6,
    )

    cfg = WalkConfig(steps=3, gamma=0.7)
    x_u0 = rng.standard_normal((4, 3))
    c0 = rng.standard_normal((3, 3))

    def walk_wrt_x(x):
        a, b = build_similarities(x, Mat(c0), cfg)
        return walk_loss(make_transitions(a, b), cfg).total

    def walk_wrt_c(c):
        a, b = build_similarities(Mat(x_u0), c, cfg)
        return walk_loss(make_transitions(a, b), cfg).total

    yield ("walk_loss_wrt_generations", ag.finite_diff_check(walk_wrt_x, x_u0), 1e-5)
    yield ("walk_loss_wrt_centers", ag.finite_diff_check(walk_wrt_c, c0), 1e-5)

    spec = SyntheticSpec(
        k_seen=3, k_unseen=2, feature_dim=5, descriptor_dim=3, samples_per_class=12, seed=seed
    )
    dataset = synthesize(spec)
    tcfg = TrainConfig(
        epochs=1,
        batch_size=4,
        n_u=3,
        noise_dim=4,
        g_hidden=(8,),
        d_hidden=(8,),
        walk=WalkConfig(steps=1),
        seed=seed,
    )
    view, _ = training_split(dataset, tcfg.holdout_fraction, tcfg.holdout_seed)
    model = FeatureGan(
        descriptor_dim=view.descriptors.shape[1],
        feature_dim=view.features.shape[1],
        n_classes=len(view.class_ids),
        noise_dim=tcfg.noise_dim,
        g_hidden=tcfg.g_hidden,
        d_hidden=tcfg.d_hidden,
        seed=seed,
    )
    sampler = HallucinationSampler(view.descriptors, rng)
    draws = sample_gen_draws(tcfg, view, rng, sampler)
    centers_fn = lambda: model.class_centers(view.descriptors)

    def gen_objective():
        loss, _, _ = generator_loss(model, view, tcfg, draws, centers_fn)
        return loss

    yield (
        "generator_objective_wrt_theta_g",
        ag.finite_diff_check_param(gen_objective, model.generator.layers[0].w),
        1e-4,
    )

    idx = np.arange(tcfg.batch_size)
    x_real = view.features[idx]
    y_index = view.label_index[idx]
    with Tape():
        fake_u = model.generate(Mat(draws.s_u), Mat(draws.z_u)).value.copy()
        fake_s = model.generate(
            Mat(view.descriptors[y_index]), Mat(draws.z_s[: tcfg.batch_size])
        ).value.copy()

    def disc_objective():
        loss, _ = discriminator_loss(
            model, x_real, y_index, tcfg, fake_u, fake_s, np.random.default_rng(seed + 1)
        )
        return loss

    yield (
        "discriminator_objective_wrt_theta_d",
        ag.finite_diff_check_param(disc_objective, model.discriminator.trunk_layers[0].w),
        1e-4,
    )

    def penalty_only():
        return gradient_penalty(model.real_score, x_real, fake_s, np.random.default_rng(seed + 2))

    yield (
        "gradient_penalty_double_backward",
        ag.finite_diff_check_param(penalty_only, model.discriminator.real_head.w),
        1e-4,
    )


def cmd_gradcheck(values: dict) -> int:
    failed = False
    for name, err, tol in _gradcheck_suite(values["seed"]):
        status = "PASS" if err < tol else "FAIL"
        failed = failed or status == "FAIL"
        print(f"{name}: max_rel_err={err:.3e} threshold={tol:.0e} {status}")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "synth": (SYNTH_KEYS, cmd_synth, "write a synthetic feature bundle"),
    "train": (TRAIN_KEYS, cmd_train, "train on a feature bundle"),
    "eval": (EVAL_KEYS, cmd_eval, "evaluate a checkpoint on a bundle"),
    "ablate": (ABLATE_KEYS, cmd_ablate, "run the deviation/walk-length ablation table"),
    "gradcheck": (GRADCHECK_KEYS, cmd_gradcheck, "finite-difference audit of all gradients"),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="grawd",
        description="random-walk deviation losses for generative zero-shot learning",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (keys, _, help_text) in COMMANDS.items():
        _add_command(subparsers, name, keys, help_text)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0

    keys, handler, _ = COMMANDS[args.command]
    try:
        values = _resolve(keys, args)
        return handler(values)
    except TrainingAborted as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ag.NonFiniteError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BundleError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigurationError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
