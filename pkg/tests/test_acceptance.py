"""Acceptance criteria, one test per criterion.

Each test records a ``criterion N: PASS|FAIL|SKIP|REPORT`` line that is
repeated in the pytest summary. Run ``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time

import numpy as np
import pytest

from stcsnn import tensor as K
from stcsnn.cli import main
from stcsnn.compress import compress, compress_oracle, window_membership
from stcsnn.datasets import nmnist_root
from stcsnn.events import EventStream
from stcsnn.gradcheck import grad_check, rel_error
from stcsnn.network import class_scores, group_bounds, parse_arch, voting
from stcsnn.neuron import PMLIFState, pmlif_step, pmlif_update, sigmoid, surrogate_grad, synaptic_step

SYNTH_CONFIG = {
    "dataset": {"kind": "synthetic", "width": 16, "height": 16, "limit_train": 200, "limit_test": 100,
                "duration": 10000, "rate": 1e-4, "data_seed": 1},
    "model": {"arch": "8SC3-AP2-16FC-2Voting", "T": 2, "N_r": 8, "desired_count": 15},
    "optim": {"lr": 1e-3, "batch": 16, "epochs": 30, "seed": 0},
}


def _verdict(ok):
    return "PASS" if ok else "FAIL"


def _random_stream(rng, n_max=10_000, size=34):
    n = int(rng.integers(0, n_max + 1))
    # mix long recordings with ones shorter than the number of windows
    t_max = int(rng.choice([int(rng.integers(0, 40)), int(rng.integers(0, 10**6)), 2**31]))
    return EventStream(rng.integers(0, size, n), rng.integers(0, size, n), rng.integers(0, t_max + 1, n),
                       rng.integers(0, 2, n), size, size)


def test_criterion_01_compression_oracle(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = conservation = 0
    for _ in range(1000):
        s = _random_stream(rng)
        T, n_r = int(rng.choice([1, 2, 5])), int(rng.choice([1, 4, 8]))
        mismatches += not np.array_equal(compress(s, T, n_r).data, compress_oracle(s, T, n_r).data)
        conservation += compress(s, T, 1).data.sum() != len(s)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and conservation == 0 and elapsed < 30
    report(1, _verdict(ok), f"1000 streams, {mismatches} oracle mismatches, {conservation} conservation "
                            f"failures, {elapsed:.1f}s (limit 30s)")
    assert ok


def test_criterion_02_event_partition(report):
    rng = np.random.default_rng(102)
    bad = 0
    for _ in range(100):
        s = _random_stream(rng, n_max=2000)
        T, n_r = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        bad += sum(h != 1 for h in window_membership(s, T, n_r))
    report(2, _verdict(bad == 0), f"100 streams, {bad} events outside exactly one window")
    assert bad == 0


def test_criterion_03_synaptic_decay(report):
    rng = np.random.default_rng(103)
    worst = 0.0
    exact = True
    for _ in range(500):
        B, C, H, W = (int(v) for v in rng.integers(1, 6, size=4))
        i_in = rng.normal(size=(B, C, H, W))
        i_in[rng.random((B, C)) < 0.4] = 0.0
        i_prev = rng.normal(size=(B, C, H, W))
        out, d = synaptic_step(i_prev, i_in)
        for b in range(B):
            valid = sum(1 for c in range(C) if any(v != 0.0 for v in i_in[b, c].ravel()))
            exact &= d[b] == valid / C
            expected = (valid / C) * i_prev[b] + i_in[b]
            worst = max(worst, float(np.max(np.abs(out[b] - expected))))
    ok = exact and worst == 0.0
    report(3, _verdict(ok), f"decay == C_valid/C_total on 500 random inputs: {exact}, "
                            f"max |I_syn - expected| = {worst:.1e}")
    assert ok


def test_criterion_04_pmlif(report):
    examples = [((0.0, 0.0), (0, 0.0)), ((20.0, 15.0), (2, 5.0)), ((0.0, 1e4), (15, 1e4 - 150))]
    ex_ok = True
    for (u, i), (s_want, u_want) in examples:
        s, st = pmlif_step(PMLIFState(np.array(u), np.array(0.0)), np.array(i))
        ex_ok &= s == s_want and float(st.u) == u_want
    rng = np.random.default_rng(104)
    u_prev = rng.uniform(-200, 400, 100_000) * rng.choice([1.0, 1e-3, 10.0], 100_000)
    current = rng.uniform(-100, 300, 100_000)
    leak = sigmoid(rng.normal(0, 3, 100_000))
    s, u_new, u_pre = pmlif_update(u_prev, current, leak, 10.0, 15)
    violations = int(np.sum(u_pre - u_new != s * 10.0))
    ok = ex_ok and violations == 0
    report(4, _verdict(ok), f"3 examples ok: {ex_ok}; charge bookkeeping violations in 1e5 states: {violations}")
    assert ok


def test_criterion_05_surrogate(report):
    direct = lambda u: sum(1.0 * math.exp(-((u - 10.0 * i) ** 2) / 20.0) for i in range(1, 16))
    f10, f15 = surrogate_grad(10.0, 10.0, 15, 1.0, 20.0), surrogate_grad(15.0, 10.0, 15, 1.0, 20.0)
    ok = (abs(f10 - 1.006738) <= 1e-5 and abs(f15 - 0.57307) <= 1e-4
          and abs(f10 - direct(10.0)) < 1e-15 and abs(f15 - direct(15.0)) < 1e-15)
    report(5, _verdict(ok), f"f1(10) = {f10:.7f} (1.006738 +- 1e-5), f1(15) = {f15:.7f} (0.57307 +- 1e-4), "
                            f"direct sums {direct(10.0):.7f} / {direct(15.0):.7f}")
    assert ok


def _random_tiny_net(rng):
    tokens = []
    if rng.random() < 0.8:
        tokens.append(f"{int(rng.integers(1, 4))}SC{int(rng.choice([1, 3]))}")
    if rng.random() < 0.4:
        tokens.append(f"{int(rng.integers(1, 3))}C3")
    spatial = bool(tokens)
    if spatial and rng.random() < 0.7:
        tokens.append("AP2")
    if rng.random() < 0.3:
        tokens.append("DP")
    n_class = int(rng.integers(2, 4))
    for _ in range(int(rng.integers(1, 3))):
        tokens.append(f"{int(rng.integers(n_class, 6))}FC")
    tokens.append(f"{n_class}Voting")
    T = int(rng.integers(1, 4))
    cfg = parse_arch("-".join(tokens), T, use_synaptic_block=bool(rng.random() < 0.7),
                     use_learnable_wm=bool(rng.random() < 0.8))
    shape = (2, 4, 4) if spatial else (2, int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    return cfg, shape


def test_criterion_06_gradient_oracle(report):
    rng = np.random.default_rng(106)
    start = time.perf_counter()
    worst, vacuous, archs = 0.0, 0, []
    for k in range(20):
        cfg, shape = _random_tiny_net(rng)
        res = grad_check(cfg, shape, seed=k, desired_count=int(rng.integers(1, 16)))
        oracle = [r for r in res.results if r.method == "oracle"]
        worst = max(worst, max(r.error for r in oracle))
        vacuous += not any(r.scale > 0 for r in oracle if r.block.endswith(".weight"))
        archs.append(f"{cfg.arch}/T{cfg.T}")
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and vacuous == 0 and elapsed < 60
    report(6, _verdict(ok), f"20 nets, max relative error {worst:.2e} (limit 1e-10), {vacuous} with zero "
                            f"gradients, {elapsed:.1f}s (limit 60s)")
    print("  nets: " + ", ".join(archs))
    assert ok


def _fd(f, x, eps=1e-3):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def test_criterion_07_finite_differences(report):
    rng = np.random.default_rng(107)
    errors = {}
    # operator level
    x = rng.normal(size=(2, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    probe = rng.normal(size=(2, 3, 4, 4))
    f = lambda: float(np.sum(probe * K.relu(K.conv2d(x, k, b, padding=1))))
    z = K.conv2d(x, k, b, padding=1)
    gx, gk, gb = K.conv2d_backward(K.relu_backward(probe, z), x, k, padding=1)
    errors["conv+relu"] = max(rel_error(gx, _fd(f, x)), rel_error(gk, _fd(f, k)), rel_error(gb, _fd(f, b)))
    xp = rng.normal(size=(2, 4, 4))
    pp = rng.normal(size=(2, 2, 2))
    errors["avgpool"] = rel_error(K.avgpool2d_backward(pp, 2), _fd(lambda: float(np.sum(pp * K.avgpool2d(xp, 2))), xp))
    xd, w, bd = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)), rng.normal(size=4)
    pd = rng.normal(size=(3, 4))
    fd_dense = lambda: float(np.sum(pd * K.dense(xd, w, bd)))
    gxd, gw, gbd = K.dense_backward(pd, xd, w)
    errors["dense"] = max(rel_error(gxd, _fd(fd_dense, xd)), rel_error(gw, _fd(fd_dense, w)),
                          rel_error(gbd, _fd(fd_dense, bd)))
    # network level: front end under the learning rule
    for arch, syn in [("2SC3-AP2-4FC-2Voting", True), ("2SC3-2C3-AP2-DP-4FC-2Voting", False),
                      ("3C3-AP2-2Voting", True)]:
        res = grad_check(parse_arch(arch, 2, use_synaptic_block=syn), (2, 4, 4), seed=7)
        errors[f"{arch}{'' if syn else ' (no synapse)'}"] = max(r.error for r in res.results if r.method == "fd")
    worst = max(errors.values())
    ok = worst < 1e-4
    report(7, _verdict(ok), f"max relative error {worst:.2e} (limit 1e-4, eps 1e-3): "
                            + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))
    assert ok


def _train(tmp_path, name, data, *extra):
    cfg = tmp_path / f"{name}.json"
    cfg.write_text(json.dumps(data))
    out = tmp_path / name
    start = time.perf_counter()
    code = main(["train", "--config", str(cfg), "--out", str(out), "--threads", "1", *extra])
    elapsed = time.perf_counter() - start
    lines = (out / "train.log").read_text().splitlines()
    return code, elapsed, lines, out


def test_criterion_08_synthetic_task(tmp_path, report):
    code, elapsed, lines, _ = _train(tmp_path, "synthetic", SYNTH_CONFIG)
    acc = float(lines[-1].split("\t")[3])
    ok = code == 0 and len(lines) <= 30 and acc >= 0.99 and elapsed < 120
    report(8, _verdict(ok), f"test accuracy {acc:.4f} after {len(lines)} epochs (need >= 0.99), "
                            f"{elapsed:.1f}s (limit 120s)")
    assert ok


def test_criterion_09_scaled_nmnist(tmp_path, report):
    root = nmnist_root()
    if root is None:
        report(9, "SKIP", "N-MNIST not found (set NMNIST_ROOT to a directory with Train/ and Test/)")
        pytest.skip("N-MNIST not available")
    data = {
        "dataset": {"kind": "nmnist", "path": str(root), "width": 34, "height": 34,
                    "limit_train": 1000, "limit_test": 500, "crop": [32, 32]},
        "model": {"arch": "16SC3-AP2-32C3-AP2-DP-128FC-10Voting", "T": 2, "N_r": 8, "desired_count": 15},
        "optim": {"lr": 1e-3, "batch": 16, "epochs": 20, "seed": 0},
    }
    code, elapsed, lines, _ = _train(tmp_path, "nmnist", data)
    acc = float(lines[-1].split("\t")[3])
    ok = code == 0 and acc >= 0.90 and elapsed < 1800
    report(9, _verdict(ok), f"test accuracy {acc:.4f} (need >= 0.90), {elapsed:.0f}s (limit 1800s)")
    assert ok


def test_criterion_10_ablation_direction(tmp_path, report):
    results, speed = {}, {}
    for label, syn, wm in (("S0", True, True), ("S3", False, False)):
        accs, reach = [], []
        for seed in range(5):
            data = json.loads(json.dumps(SYNTH_CONFIG))
            data["model"].update(use_synaptic_block=syn, use_learnable_wm=wm)
            data["optim"]["seed"] = seed
            code, _, lines, _ = _train(tmp_path, f"{label}_{seed}", data)
            assert code == 0
            test_acc = [float(l.split("\t")[3]) for l in lines]
            accs.append(test_acc[-1])
            reach.append(next((e + 1 for e, a in enumerate(test_acc) if a >= 0.99), len(test_acc) + 1))
        results[label] = np.array(accs)
        speed[label] = reach
    m0, m3 = results["S0"].mean(), results["S3"].mean()
    spread = max(results["S0"].std(), results["S3"].std())
    if m0 >= m3:
        status = "PASS"
    elif m3 - m0 <= spread:
        status = "REPORT"
    else:
        status = "FAIL"
    report(10, status, f"S0 mean {m0:.4f} (std {results['S0'].std():.4f}) vs S3 mean {m3:.4f} "
                       f"(std {results['S3'].std():.4f}) over 5 seeds; per seed S0 {results['S0'].tolist()}, "
                       f"S3 {results['S3'].tolist()}; epochs to 99% S0 {speed['S0']}, S3 {speed['S3']}")
    assert status != "FAIL"


def test_criterion_11_voting_invariance(report):
    rng = np.random.default_rng(111)
    changed = 0
    for _ in range(10_000):
        n_class = int(rng.integers(2, 11))
        n = n_class * int(rng.integers(1, 5)) + int(rng.integers(0, n_class))
        if rng.random() < 0.5:
            counts = rng.integers(0, 31, size=n).astype(float)
        else:
            counts = rng.uniform(0, 30, size=n)
        gm = rng.permutation(n)
        base = voting(counts, gm, n_class)
        # permute neurons within every group
        shuffled = gm.copy()
        for lo, hi in group_bounds(n, n_class):
            shuffled[lo:hi] = rng.permutation(shuffled[lo:hi])
        changed += voting(counts, shuffled, n_class) != base
        # positive rescaling of the class scores
        c = float(np.exp(rng.uniform(-7, 7)))
        changed += int(np.argmax(c * class_scores(counts, gm, n_class))) != base
        # positive rescaling of the counts by a power of two
        changed += voting(counts * 2.0 ** int(rng.integers(-20, 21)), gm, n_class) != base
    report(11, _verdict(changed == 0), f"1e4 vectors, {changed} argmax changes under within-group "
                                       f"permutation or positive rescaling")
    assert changed == 0


def test_criterion_12_determinism(tmp_path, report):
    runs = [_train(tmp_path, f"run{k}", SYNTH_CONFIG) for k in range(2)]
    blobs = [(out / "checkpoint.stck").read_bytes() for *_, out in runs]
    logs = [[l.rsplit("\t", 1)[0] for l in lines] for _, _, lines, _ in runs]
    ok = all(r[0] == 0 for r in runs) and blobs[0] == blobs[1] and logs[0] == logs[1]
    report(12, _verdict(ok), f"checkpoints byte-identical: {blobs[0] == blobs[1]} ({len(blobs[0])} bytes); "
                             f"logs identical apart from wall-clock seconds: {logs[0] == logs[1]}")
    assert ok
