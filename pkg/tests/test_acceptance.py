"""Acceptance criteria 1-12.

Each test records a one-line PASS/FAIL verdict that the terminal summary
(see conftest.py) prints at the end of the run. Criteria 5-10 train the
desk task from ``auxnet.experiments``; runs are memoized and shared.
"""

import csv
import json
import time

import numpy as np
import pytest

from auxnet import experiments as E
from auxnet import network as N
from auxnet import training as T
from auxnet.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint, CheckpointError
from auxnet.cli import main as cli_main
from auxnet.gradcheck import certify
from auxnet.inference import predictions_from_probs, prediction_ratio
from auxnet import layers as L

VERDICTS = {}


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def flat(model, names=None):
    p = model.parameters()
    return np.concatenate([p[n].ravel() for n in (names or sorted(p))])


def test_criterion_01_kernel_certification():
    t0 = time.perf_counter()
    reports = certify(n_shapes=20, tolerance=1e-5, seed=0)
    secs = time.perf_counter() - t0
    kernels = {r.kernel for r in reports}
    per_kernel = min(sum(r.kernel == k for r in reports) for k in kernels)
    worst = max(r.max_rel_error for r in reports)
    ok = all(r.passed for r in reports) and worst < 1e-5 and per_kernel >= 20 and secs < 60
    verdict(1, ok, f"{len(kernels)} kernels x {per_kernel} shapes, max rel error {worst:.2e}, {secs:.1f}s")


def test_criterion_02_joint_gradient_decomposition():
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        cfg = N.ModelConfig(depth=20, head_positions=[13, 17, 20], stage_channels=[4, 6], input_shape=[2, 5, 5],
                            num_classes=4, dtype="float64", seed=seed, lam=float(rng.uniform(0.5, 1.0)))
        m = N.build_model(cfg)
        x, y = rng.standard_normal((6, 2, 5, 5)), rng.integers(0, 4, 6)
        cache = N.forward(m, x, y, update_stats=False)
        joint = N.backward(m, cache, T.joint_weights(m)).params
        # oracle: each head's gradient from its own truncated network
        total = {n: np.zeros_like(a) for n, a in m.parameters().items()}
        for k in range(m.K + 1):
            t = N.truncate(m, k)
            g = N.backward(t, N.forward(t, x, y, update_stats=False), {0: 1.0}).params
            for n, a in g.items():
                total[n.replace("head1.", f"head{k + 1}.")] += m.gamma[k] * a
        names = sorted(total)
        worst = max(worst, rel_err(np.concatenate([joint.get(n, np.zeros_like(total[n])).ravel() for n in names]),
                                   np.concatenate([total[n].ravel() for n in names])))
    verdict(2, worst < 1e-6, f"max relative error {worst:.2e} over 3 depth-20 K=2 float64 models")


def test_criterion_03_strategy_degeneration():
    cfg = N.ModelConfig(depth=6, head_positions=[6], stage_channels=[4, 6], input_shape=[2, 4, 4], num_classes=3,
                        dtype="float64", seed=11)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((64, 2, 4, 4)), rng.integers(0, 3, 64)
    trajectories = {}
    for s in T.STRATEGIES:
        m = N.build_model(cfg)
        opt = T.SGD(m.parameters(), T.OptimConfig(lr=0.05))
        batches = np.random.default_rng(1)
        traj = []
        for _ in range(50):
            idx = batches.choice(64, 16, replace=False)
            T.STEPS[s](m, x[idx], y[idx], opt)
            traj.append(flat(m).tobytes())
        trajectories[s] = traj
    ref = trajectories["plain"]
    ok = all(trajectories[s] == ref for s in T.STRATEGIES)
    verdict(3, ok, "K=0, 50 iterations: " + ", ".join(
        f"{s} {'identical' if trajectories[s] == ref else 'differs'}" for s in T.STRATEGIES))


def test_criterion_04_first_order_equivalence():
    cfg = N.ModelConfig(depth=8, head_positions=[3, 6, 8], stage_channels=[4, 6], input_shape=[2, 5, 5],
                        num_classes=3, min_head_position=1, dtype="float64", seed=2)
    m = N.build_model(cfg)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((8, 2, 5, 5)), rng.integers(0, 3, 8)
    names = sorted(m.parameters())
    joint = N.backward(m, N.forward(m.clone(), x, y), T.joint_weights(m)).params
    g = np.concatenate([joint[n].ravel() for n in names])
    before = flat(m, names).copy()
    T.step_multipath(m, x, y, T.SGD(m.parameters(), T.OptimConfig(lr=1e-12, momentum=0.0, weight_decay=0.0)))
    disp = before - flat(m, names)
    cos = float(disp @ g / (np.linalg.norm(disp) * np.linalg.norm(g)))
    verdict(4, cos > 1 - 1e-6, f"cosine(displacement, joint gradient) = 1 - {1 - cos:.2e} at lr 1e-12")


# -- desk task ---------------------------------------------------------------------

def test_criterion_05_supervision_ratio_trend():
    t0 = time.perf_counter()
    plain, multi = E.desk_run("plain", 0), E.desk_run("multipath", 0)
    rp, rm = E.final_ratios(plain).as_dict(), E.final_ratios(multi).as_dict()
    secs = plain.seconds + multi.seconds + (time.perf_counter() - t0)
    below = range(1, E.DESK_MODEL["head_positions"][0])
    losing = [l for l in below if not rm[l] > rp[l]]
    ok = not losing and secs < 600
    verdict(5, ok, f"layers 1-{below[-1]}: multipath > plain at {len(below) - len(losing)}/{len(below)} "
                   f"(layer 1: {rm[1]:.3g} vs {rp[1]:.3g}), {secs:.0f}s")


def test_criterion_06_testing_error_ordering():
    t0 = time.perf_counter()
    votes, detail = [], []
    for s in E.SEEDS:
        p, j, m = (E.desk_run(k, s).final_error for k in ("plain", "joint", "multipath"))
        votes.append(m <= j + 0.5 and j <= p + 0.5)
        detail.append(f"{m:.1f}/{j:.1f}/{p:.1f}")
    secs = time.perf_counter() - t0
    ok = E.majority(votes) and secs < 3600
    verdict(6, ok, f"{sum(votes)}/5 seeds multipath<=joint<=plain (+0.5pp); m/j/p: {' '.join(detail)}")


def ordered_with_one_small_inversion(errs):
    inv = [b - a for a, b in zip(errs, errs[1:]) if b > a]
    return not inv or (len(inv) == 1 and inv[0] <= 1.0)


def test_criterion_07_intermediate_model_ordering():
    votes, detail = [], []
    for s in E.SEEDS:
        errs = E.desk_run("multipath", s).report.final_test_err
        base = E.truncated_readout_errors(E.desk_run("plain", s))
        votes.append(ordered_with_one_small_inversion(errs) and all(a < b for a, b in zip(errs, base)))
        detail.append("[" + ",".join(f"{e:.1f}" for e in errs) + "]<[" + ",".join(f"{b:.0f}" for b in base) + "]")
    verdict(7, E.majority(votes), f"{sum(votes)}/5 seeds; multipath heads < truncated plain: {' '.join(detail)}")


def test_criterion_08_shallow_output_degradation():
    votes, detail = [], []
    for s in E.SEEDS:
        shallow = E.desk_run("multipath", s, head_positions=[2, 20], min_head_position=1).final_error
        deep = E.desk_run("multipath", s, head_positions=[17, 20]).final_error
        votes.append(shallow > deep)
        detail.append(f"{shallow:.1f}/{deep:.1f}")
    verdict(8, E.majority(votes), f"{sum(votes)}/5 seeds {{2,20}} worse than {{17,20}}: {' '.join(detail)}")


def test_criterion_09_nu_sweep():
    cfg = E.desk_config(0)
    exact = (N.head_weights(E.desk_config(0, nu=0.0)) == [1.0, 1.0, 1.0]
             and N.head_weights(cfg) == [(13 / 20) ** 2, (17 / 20) ** 2, 1.0]
             and N.head_weights(N.ModelConfig(depth=56, head_positions=[15, 56], stage_channels=[2],
                                              input_shape=[1, 1, 1], nu=5.0))[0] == 0.01)
    votes, detail = [], []
    for s in E.SEEDS:
        e0, e1 = (E.desk_run("multipath", s, nu=v).final_error for v in (0.0, 1.0))
        e2 = E.desk_run("multipath", s).final_error
        votes.append(e0 > e1 and e0 > e2)
        detail.append(f"{e0:.1f}/{e1:.1f}/{e2:.1f}")
    ok = exact and E.majority(votes)
    verdict(9, ok, f"gamma exact: {exact}; {sum(votes)}/5 seeds nu=0 worse than nu=1 and nu=2 "
                   f"(nu0/nu1/nu2: {' '.join(detail)})")


def test_criterion_10_safe_prediction():
    ev = E.head_evaluation(E.desk_run("multipath", 0))
    fixture = predictions_from_probs(np.stack([L.softmax(np.array([[40.0, 0.0, 0.0]])), np.full((1, 3), 1 / 3)]))
    sums = abs(sum(ev.prediction_ratio) - 100.0) < 1e-9 and sum(prediction_ratio([0, 1, 1], 2)) == 100.0
    ok = ev.safe_error <= ev.final_error + 0.2 and sums and fixture.chosen_head[0] == 0
    verdict(10, ok, f"safe {ev.safe_error:.2f}% vs final {ev.final_error:.2f}%, ratio "
                    f"{[round(r, 1) for r in ev.prediction_ratio]}, fixture picks head {fixture.chosen_head[0] + 1}")


# -- cost and I/O ---------------------------------------------------------------

def median_step_seconds(strategy, positions, iters=15):
    cfg = N.ModelConfig(depth=20, head_positions=positions, stage_channels=[8, 16], input_shape=[1, 8, 8],
                        num_classes=3, min_head_position=1, dtype="float32", seed=0)
    m = N.build_model(cfg)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((32, 1, 8, 8)), rng.integers(0, 3, 32)
    opt = T.SGD(m.parameters(), T.OptimConfig(lr=0.01))
    times, res = [], None
    for _ in range(iters):
        t0 = time.perf_counter()
        res = T.STEPS[strategy](m, x, y, opt)
        times.append(time.perf_counter() - t0)
    return float(np.median(times[3:])), res


def test_criterion_11_cost_model():
    positions = [4, 8, 12, 16, 20]
    plain, _ = median_step_seconds("plain", [20])
    multi, res = median_step_seconds("multipath", positions)
    k = len(positions) - 1
    factor = multi / plain
    ok = (res.forwards, res.backwards) == (1, k + 1) and 1.5 <= factor <= 4.0
    verdict(11, ok, f"K={k}: {res.forwards} forward, {res.backwards} backwards per iteration; "
                    f"{factor:.2f}x plain wall-clock ({1e3 * multi:.1f} vs {1e3 * plain:.1f} ms)")


def test_criterion_12_io_exactness(tmp_path):
    checks = {}
    for dtype in ("float32", "float64"):
        m = N.build_model(N.ModelConfig(depth=6, head_positions=[3, 6], stage_channels=[3], input_shape=[2, 4, 4],
                                        min_head_position=1, dtype=dtype, seed=4))
        path = tmp_path / f"{dtype}.ckpt"
        save_checkpoint(m, str(path))
        back = load_checkpoint(str(path))
        checks[f"{dtype} round-trip"] = all(back.state()[n].tobytes() == a.tobytes() for n, a in m.state().items())
        buf = bytearray(checkpoint_bytes(m))
        buf[len(buf) // 3] ^= 0x10
        (tmp_path / "bad.ckpt").write_bytes(bytes(buf))
        try:
            load_checkpoint(str(tmp_path / "bad.ckpt"))
            checks[f"{dtype} CRC"] = False
        except CheckpointError as e:
            checks[f"{dtype} CRC"] = "CRC" in str(e)
    doc = {"model": {"depth": 4, "stage_channels": [6], "kernel_size": 1},
           "heads": {"positions": [2, 4], "min_position": 1},
           "data": {"samples": 200, "seed": 3}, "train": {"epochs": 3, "batch_size": 32, "lr": 0.05}}
    (tmp_path / "run.json").write_text(json.dumps(doc))
    tables = []
    for out in ("a", "b"):
        assert cli_main(["train", "--config", str(tmp_path / "run.json"), "--out-dir", str(tmp_path / out),
                         "--seed", "7"]) == 0
        rows = list(csv.reader(open(tmp_path / out / "metrics.csv")))
        cut = rows[0].index("seconds")
        tables.append([r[:cut] + r[cut + 1:] for r in rows])
    checks["metrics replay"] = tables[0] == tables[1] and len(tables[0]) == 4
    verdict(12, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
