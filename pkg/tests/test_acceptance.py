"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from oracles import OP_NAMES, bptt_gradcheck, op_gradcheck
from pcnet.benchmark import compare_models, make_benchmark, skip_experiment, smooth_spec
from pcnet.cli import main
from pcnet.lds import LdsSpec, correlation_stats, generate, generate_dataset, kalman_filter, pseudo_inverse_estimate
from pcnet.metrics import average_precision
from pcnet.model import (
    DynamicSchedule,
    baseline_single_frame,
    correct_frame,
    forward_sequence,
    init_frame,
    init_params,
    mlp,
    top_block,
)
from test_metrics import brute_force_ap, random_instance

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def comparisons():
    return {s: compare_models(make_benchmark(seed=s), seed=s) for s in SEEDS}


def test_criterion_1_gradients(criterion):
    start = time.perf_counter()
    op_errs = [op_gradcheck(op, s, h=1e-5) for op in OP_NAMES for s in range(10)]
    bptt_errs = [bptt_gradcheck(s, h=1e-5) for s in range(100)]
    elapsed = time.perf_counter() - start
    worst = max(op_errs + bptt_errs)
    n = len(op_errs) + len(bptt_errs)
    criterion(
        1,
        "per-op and BPTT gradient checks, rel err < 1e-4 at h=1e-5, >= 100 configs, < 1 min",
        worst < 1e-4 and len(bptt_errs) >= 100 and elapsed < 60,
        f"{n} configs ({len(bptt_errs)} full-model), worst {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_2_kalman(criterion):
    # scalar constant state: the posterior mean is the running Bayesian average
    spec = LdsSpec(np.eye(1), np.eye(1), 0.0, 1.0, np.eye(1), np.zeros(1), 0)
    y = generate(spec, 200, seed=3).frames
    means = kalman_filter(spec, y).posterior_means[:, 0]
    avg_err = float(np.max(np.abs(means - np.cumsum(y[:, 0]) / np.arange(2, 202))))

    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    exact = LdsSpec(Q, rng.standard_normal((4, 4)) + 2 * np.eye(4), 0.0, 0.0, np.eye(2, 4), np.zeros(2), 0)
    b = generate(exact, 25, seed=0)
    rec_err = float(np.max(np.abs(kalman_filter(exact, b.frames).posterior_means - b.states)))

    rng = np.random.default_rng(1)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    noisy = LdsSpec(0.9 * Q, rng.standard_normal((6, 4)), 0.3, 1.0, np.eye(2, 4), np.zeros(2), 1)
    ds = generate_dataset(noisy, 20, 1000, 7)
    mse_kf = np.mean([np.mean((kalman_filter(noisy, s.frames).posterior_means - s.states) ** 2) for s in ds.sequences])
    mse_raw = np.mean([np.mean((pseudo_inverse_estimate(noisy, s.frames) - s.states) ** 2) for s in ds.sequences])
    criterion(
        2,
        "Kalman running average <= 1e-10, noiseless recovery <= 1e-8, filter MSE <= raw MSE over 1000 sequences",
        avg_err <= 1e-10 and rec_err <= 1e-8 and mse_kf <= mse_raw,
        f"avg err {avg_err:.1e}, recovery err {rec_err:.1e}, MSE {mse_kf:.4f} vs {mse_raw:.4f}",
    )


def test_criterion_3_structural_equivalences(criterion):
    reinit_err = tele_err = 0.0
    fixed_point = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = mlp(5, (6,) if seed % 2 else (), 3)
        params = init_params(net, seed, tied_init=False)
        Y = rng.standard_normal((10, 5))
        sf = baseline_single_frame(params, Y)
        for out in (
            forward_sequence(params, Y, top_block(net, 1)).logits,
            forward_sequence(params, Y, top_block(net, 1), DynamicSchedule.dynamic(0.0, max_frames=1)).logits,
        ):
            reinit_err = max(reinit_err, float(np.max(np.abs(out - sf))))
        # telescoping: top output = f(y_0) + sum of per-frame corrections
        out = forward_sequence(params, Y, top_block(net, 100)).logits
        _, state = init_frame(params, Y[0])
        total = state.logits.data[0].copy()
        for t in range(1, 10):
            prev = state.logits.data[0].copy()
            _, state = correct_frame(params, state, Y[t])
            total = total + (state.logits.data[0] - prev)
            tele_err = max(tele_err, float(np.max(np.abs(out[t] - total))))
        # zero difference leaves the memory bit-identical
        before = state.logits.data.copy()
        _, state = correct_frame(params, state, Y[9].copy())
        fixed_point &= bool(np.array_equal(state.logits.data, before))
    ap_err = max(abs(average_precision(*random_instance(s)) - brute_force_ap(*random_instance(s))) for s in range(1000))
    criterion(
        3,
        "reinit-1 == single-frame <= 1e-10, telescoping <= 1e-10, exact fixed point, AP oracle on 1000 instances",
        reinit_err <= 1e-10 and tele_err <= 1e-10 and fixed_point and ap_err <= 1e-12,
        f"reinit err {reinit_err:.1e}, telescoping err {tele_err:.1e}, fixed point {fixed_point}, AP err {ap_err:.1e}",
    )


def test_criterion_4_model_ordering(criterion, comparisons):
    rows, ok = [], True
    for s, c in comparisons.items():
        pc = c.pc_at_train_rate
        ok &= pc - c.single_frame >= 0.02 and c.late_fusion <= pc
        rows.append(f"seed {s}: SF {c.single_frame:.3f} LF {c.late_fusion:.3f} PC {pc:.3f}")
    criterion(4, "PC beats single-frame by >= 2 points and late fusion <= PC, 3 seeds", ok, "; ".join(rows))


def test_criterion_5_test_reinit_sweep(criterion, comparisons):
    rows, ok = [], True
    for s, c in comparisons.items():
        r = c.predictive_corrective
        near_peak = r[4] >= max(r.values()) - 0.01
        ok &= near_peak and r[4] >= r[8] >= r[16] and r[4] - r[16] >= 0.03
        rows.append(f"seed {s}: " + " ".join(f"r{k} {v:.3f}" for k, v in sorted(r.items())))
    criterion(
        5,
        "test reinit 4 within 1 point of the best rate, monotone decline 4->8->16, drop >= 3 points at 16, 3 seeds",
        ok,
        "; ".join(rows),
    )


def test_criterion_6_dynamic_skipping(criterion):
    res = skip_experiment(make_benchmark(seed=0), seed=0)
    frac = res.selection.val_skip_fraction
    criterion(
        6,
        "skip threshold chosen on held-out data skips 40-60% and costs <= 1.5 mAP points",
        0.4 <= frac <= 0.6 and res.drop <= 0.015,
        f"threshold {res.selection.threshold:.4f}, val skip {frac:.3f}, test skip {res.test_skip_fraction:.3f}, "
        f"full {res.full_map:.4f}, dynamic {res.dynamic_map:.4f}, drop {res.drop:.4f}",
    )


def test_criterion_7_difference_decorrelation(criterion):
    ds = generate_dataset(smooth_spec(0), 32, 200, 0)
    raw, diff = correlation_stats(ds.sequences)
    criterion(
        7,
        "smooth data: corr_raw > 0.9 and corr_diff < corr_raw - 0.3",
        raw > 0.9 and diff < raw - 0.3,
        f"corr_raw {raw:.4f}, corr_diff {diff:.4f}",
    )


def test_criterion_8_cli_reproducibility(criterion, tmp_path):
    def cli(*argv):
        assert main([str(a) for a in argv]) == 0

    cli("gen-data", "--preset", "standard", "-T", 32, "-n", 50, "--seed", 11, "--out", tmp_path / "test.pcds")
    cfg = {"dataset": {"preset": "standard", "T": 32, "num_sequences": 200, "seed": 0}, "train": {"epochs": 5, "seed": 4}}
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    outputs = []
    for run, config in (("a", tmp_path / "exp.json"), ("b", tmp_path / "a" / "config.json")):
        cli("train", config, "--out", tmp_path / run)
        ck = tmp_path / run / "checkpoint.pcck"
        cli("eval", "--checkpoint", ck, "--dataset", tmp_path / "test.pcds", "--test-reinit", 4, "--out", tmp_path / f"{run}4.csv")
        cli("eval", "--checkpoint", ck, "--dataset", tmp_path / "test.pcds", "--dynamic", 0.1, "inf",
            "--out", tmp_path / f"{run}d.csv")
        outputs.append([(tmp_path / f"{run}{k}.csv").read_bytes() for k in ("4", "d")] + [ck.read_bytes()])
    same = outputs[0] == outputs[1]
    criterion(
        8,
        "train/eval rerun from the recorded config reproduces metrics bit-identically",
        same,
        "checkpoint and both metric files identical" if same else "outputs differ",
    )
