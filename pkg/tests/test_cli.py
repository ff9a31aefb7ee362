import filecmp
import os
import time

import pytest

import grawd.autograd as ag
from grawd.cli import ABLATION_ARMS, EXIT_GRADCHECK, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, main
from grawd.data import Dataset, load_bundle, save_bundle


def synth_args(out, **kw):
    base = {
        "k-seen": 4, "k-unseen": 2, "feature-dim": 6, "descriptor-dim": 4,
        "samples-per-class": 20, "seed": 7,
    }
    base.update(kw)
    argv = ["synth", "--out", str(out)]
    for key, value in base.items():
        argv += [f"--{key}", str(value)]
    return argv


def train_args(data, out, **kw):
    base = {
        "epochs": 1, "batch-size": 8, "n-critic": 2, "noise-dim": 8,
        "g-hidden": "16", "d-hidden": "16", "walk-T": 2, "seed": 3,
    }
    base.update(kw)
    argv = ["train", "--data", str(data), "--out", str(out)]
    for key, value in base.items():
        argv += [f"--{key}", str(value)]
    return argv


def _dir_bytes(path):
    return {f: open(os.path.join(path, f), "rb").read() for f in sorted(os.listdir(path))}


def test_synth_default_bundle_loads(tmp_path):
    out = tmp_path / "bundle"
    assert main(synth_args(out)) == 0
    ds = load_bundle(str(out))
    assert len(ds.seen) == 4 and len(ds.unseen) == 2


def test_synth_same_seed_identical_directories(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(synth_args(a, seed=7)) == 0
    assert main(synth_args(b, seed=7)) == 0
    assert _dir_bytes(str(a)) == _dir_bytes(str(b))


def test_synth_rejects_zero_unseen(tmp_path, capsys):
    code = main(synth_args(tmp_path / "x", **{"k-unseen": 0}))
    assert code == EXIT_USAGE
    assert "k_unseen" in capsys.readouterr().err


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "bundle"
    assert main(synth_args(out)) == 0
    return str(out)


def test_train_tiny_under_ten_seconds(bundle, tmp_path):
    start = time.monotonic()
    assert main(train_args(bundle, tmp_path / "run")) == 0
    assert time.monotonic() - start < 10.0
    assert (tmp_path / "run" / "checkpoint.npz").exists()
    assert (tmp_path / "run" / "train_log.csv").exists()


def test_train_best_arm_flags(bundle, tmp_path):
    args = train_args(bundle, tmp_path / "run", **{"deviation": "grawd", "walk-T": 10})
    assert main(args) == 0


def test_train_baseline_arm(bundle, tmp_path):
    args = train_args(bundle, tmp_path / "run", **{"deviation": "none"})
    assert main(args) == 0


def test_train_missing_bundle_is_io_error(tmp_path, capsys):
    code = main(train_args(tmp_path / "nothing", tmp_path / "run"))
    assert code == EXIT_IO
    assert "i/o error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_numeric_overflow_aborts_with_exit_4(bundle, tmp_path, capsys):
    # features at 1e200 overflow the squared norm inside phi of the episodic
    # centers; the step must abort instead of propagating NaN
    ds = load_bundle(bundle)
    huge = Dataset(
        name="huge", features=ds.features * 1e200, labels=ds.labels,
        descriptors=ds.descriptors, class_ids=ds.class_ids,
        seen=ds.seen, unseen=ds.unseen,
    )
    save_bundle(huge, str(tmp_path / "huge"))
    code = main(
        train_args(tmp_path / "huge", tmp_path / "run",
                   **{"center-mode": "episodic", "memory-size": "5"})
    )
    assert code == EXIT_NUMERIC
    assert "numeric abort" in capsys.readouterr().err


def test_train_bad_value_is_usage_error(bundle, tmp_path, capsys):
    code = main(train_args(bundle, tmp_path / "run", epochs="many"))
    assert code == EXIT_USAGE


def test_config_file_with_overrides(bundle, tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text(
        "# tiny training run\n"
        "epochs=1\n"
        "batch_size=8\n"
        "n_critic=2\n"
        "noise_dim=8\n"
        "g_hidden=16\n"
        "d_hidden=16\n"
        "walk_T=2\n"
    )
    code = main(
        ["train", "--config", str(config), "--data", bundle,
         "--out", str(tmp_path / "run"), "--seed", "5"]
    )
    assert code == 0


def test_unknown_config_key_is_fatal(bundle, tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("epochs=1\nwalk_t=2\n")  # lower-case t: not a key
    code = main(["train", "--config", str(config), "--data", bundle, "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE
    assert "walk_t" in capsys.readouterr().err


def test_eval_deterministic_and_curve_rows(bundle, tmp_path):
    run = tmp_path / "run"
    assert main(train_args(bundle, run)) == 0
    ckpt = str(run / "checkpoint.npz")
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    eval_args = ["eval", "--data", bundle, "--checkpoint", ckpt,
                 "--gen-per-class", "6", "--n-offsets", "31", "--seed", "2"]
    assert main(eval_args + ["--out", str(e1)]) == 0
    assert main(eval_args + ["--out", str(e2)]) == 0
    assert filecmp.cmp(e1 / "eval_report.txt", e2 / "eval_report.txt", shallow=False)
    assert filecmp.cmp(e1 / "curve.csv", e2 / "curve.csv", shallow=False)
    assert len((e1 / "curve.csv").read_text().splitlines()) == 32  # header + offsets


def test_eval_dimension_mismatch_reports_both_shapes(bundle, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(train_args(bundle, run)) == 0
    other = tmp_path / "other"
    assert main(synth_args(other, **{"feature-dim": 9})) == 0
    code = main(
        ["eval", "--data", str(other), "--checkpoint", str(run / "checkpoint.npz"),
         "--out", str(tmp_path / "e")]
    )
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert "(4, 6)" in err and "(4, 9)" in err


def test_ablation_arm_table_matches_walk_length_study():
    names = [name for name, _, _ in ABLATION_ARMS]
    assert names == [
        "grawt_T0", "grawt_T3", "extra_class",
        "grawd_T1", "grawd_T3", "grawd_T5", "grawd_T10",
    ]
    modes = {mode for _, mode, _ in ABLATION_ARMS}
    assert modes == {"grawt", "extra_class", "grawd"}


def test_gradcheck_passes_and_lists_every_check(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in (
        "matmul", "row_softmax", "pairwise_neg_sqdist", "scaled_l2_normalize",
        "cross_entropy_rows", "walk_loss_wrt_generations", "walk_loss_wrt_centers",
        "generator_objective_wrt_theta_g", "discriminator_objective_wrt_theta_d",
        "gradient_penalty_double_backward",
    ):
        assert name in out
    assert out.count("threshold=") == 10


def test_gradcheck_detects_injected_vjp_bug(monkeypatch, capsys):
    # flip the sign of the softmax backward rule: the audit must fail
    real = ag.row_softmax

    def broken(m):
        out = real(m)
        out.vjps = tuple((lambda g, f=f: ag.neg(f(g))) for f in out.vjps)
        return out

    monkeypatch.setattr(ag, "row_softmax", broken)
    assert main(["gradcheck"]) == EXIT_GRADCHECK
    assert "FAIL" in capsys.readouterr().out
