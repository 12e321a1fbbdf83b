"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The learning criteria (7 and 8) train two networks for 2000 steps on a 64^3
phantom; expect roughly half an hour on a single CPU core.  Run this file
alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
are produced; they are also repeated in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest

from nlunet import aggregation as agg
from nlunet import data as dp
from nlunet import nn
from nlunet.gradcheck import CHECKS, run_gradchecks
from nlunet.metrics import dice_ratio, evaluate, mhd_3d, mhd_directional
from nlunet.network import ABLATION_IDS, NetworkConfig, build_network, make_ablation
from nlunet.tensor import Tensor, no_grad, precision
from nlunet.trainer import AdamState, TrainConfig, adam_step, infer, train
from oracles import brute_mhd, double_loop_oracle

# Desk-scale protocol shared by criteria 7 and 8.
PROTOCOL = dict(seed=0, base_width=8, patch_size=16, batch_size=5, steps=2000, overlap_step=8)
TRAIN_SEED, HELD_OUT_SEED = 0, 1


# --- 1. gradient correctness ---------------------------------------------------------------


def test_criterion_1_gradient_correctness(record):
    start = time.perf_counter()
    results = run_gradchecks(seed=0, repeats=20)
    elapsed = time.perf_counter() - start
    worst_name = max(results, key=results.get)
    ok = set(results) == set(CHECKS) and all(v < 1e-4 for v in results.values()) and elapsed < 300
    record("1 gradient correctness", ok,
           f"{len(results)} checks x 20 seeds, worst {worst_name}={results[worst_name]:.2e} (<1e-4), {elapsed:.0f}s (<300s)")
    assert ok, results


# --- 2. attention contract --------------------------------------------------------------------


def _agg_params(seed, kind=agg.CONV1):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        p = agg.AggregationParams.init(rng, 2, 3, kind)
    for conv in (p.query, p.key, p.value, p.out):
        conv.bias.data = 0.1 * rng.standard_normal(conv.bias.shape)
    return p


def test_criterion_2_attention_contract(record):
    worst_rowsum = 0.0
    kinds = [agg.CONV1, agg.DECONV3_S2, agg.CONV3_S2]
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        p = _agg_params(seed, kinds[seed % 3])
        x = Tensor(rng.standard_normal((1, 2, 2, 2, 2)) * rng.uniform(0.5, 5))
        _, a = agg.global_aggregate(x, p, nn.EVAL, return_attention=True)
        worst_rowsum = max(worst_rowsum, float(np.abs(agg.attention_rowsums(a) - 1).max()))

    worst_oracle = 0.0
    for seed in range(20):
        p = _agg_params(seed)
        x = np.random.default_rng(2000 + seed).standard_normal((1, 2, 2, 2, 2))
        with precision(np.float64):
            y = agg.global_aggregate(Tensor(x), p, nn.EVAL).data
        worst_oracle = max(worst_oracle, float(np.abs(y - double_loop_oracle(x, p)).max()))

    ok = worst_rowsum <= 1e-6 and worst_oracle <= 1e-5
    record("2 attention contract", ok,
           f"max |rowsum-1|={worst_rowsum:.1e} (<=1e-6, 50 inputs); max oracle diff={worst_oracle:.1e} (<=1e-5, 20 seeds)")
    assert ok


# --- 3. shape laws ------------------------------------------------------------------------------


def test_criterion_3_shape_laws(record):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 4, 6, 2, 2)))
    same = agg.global_aggregate(x, _agg_params(0, agg.CONV1), nn.EVAL).shape
    up = agg.global_aggregate(x, _agg_params(1, agg.DECONV3_S2), nn.EVAL).shape
    shapes_ok = same == (2, 4, 6, 2, 3) and up == (2, 8, 12, 4, 3)

    batch = Tensor(rng.standard_normal((2, 32, 32, 32, 2)).astype(np.float32))
    net_shapes = {}
    for model in ABLATION_IDS:
        net = build_network(make_ablation(model, NetworkConfig(base_width=8)), 0)
        with no_grad():
            net_shapes[model] = net.forward(batch, nn.EVAL).shape
    nets_ok = all(s == (2, 32, 32, 32, 4) for s in net_shapes.values())
    ok = shapes_ok and nets_ok
    record("3 shape laws", ok,
           f"conv1 query {same}, deconv query {up}; all {len(net_shapes)} variants map 2x32^3x2 -> 2x32^3x4: {nets_ok}")
    assert ok, net_shapes


# --- 4. metric oracles -------------------------------------------------------------------------


def test_criterion_4_metric_oracles(record):
    p = np.zeros((2, 2, 2), bool)
    p[0, 0, :] = True
    l = p.copy()
    l[1, 0, :] = True
    dice_ok = dice_ratio(p, p) == 1.0 and dice_ratio(p, ~p) == 0.0 and abs(dice_ratio(p, l) - 2 / 3) < 1e-15

    worst = 0.0
    perm_worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.random((4, 4, 4)) < rng.uniform(0.2, 0.6)
        b = rng.random((4, 4, 4)) < rng.uniform(0.2, 0.6)
        a[0, 0, 0] = b[3, 3, 3] = True
        per_axis = [brute_mhd(a, b, ax) for ax in range(3)]
        for ax, want in enumerate(per_axis):
            worst = max(worst, abs(mhd_directional(a, b, ax) - want))
        worst = max(worst, abs(mhd_3d(a, b) - sum(per_axis) / 3))
        for perm in itertools.permutations(range(3)):
            perm_worst = max(perm_worst, abs(mhd_3d(a.transpose(perm), b.transpose(perm)) - mhd_3d(a, b)))

    ok = dice_ok and worst < 1e-9 and perm_worst < 1e-9
    record("4 metric oracles", ok,
           f"dice analytic cases {dice_ok}; max MHD oracle diff {worst:.1e} (<1e-9); permutation diff {perm_worst:.1e}")
    assert ok


# --- 5. sliding window ---------------------------------------------------------------------------


def test_criterion_5_sliding_window(record):
    rng = np.random.default_rng(5)
    covered_all = True
    for _ in range(200):
        dims = tuple(int(v) for v in rng.integers(1, 129, 3))
        s = int(rng.integers(1, min(dims) + 1))
        t = int(rng.integers(1, s + 1))
        for d in dims:
            hit = np.zeros(d, bool)
            for o in dp.axis_offsets(d, s, t):
                hit[o : o + s] = True
            covered_all &= bool(hit.all())
    # a few full 3D coverage fields as well
    for dims, s, t in [((20, 17, 9), 8, 3), ((33, 33, 33), 32, 8), ((64, 40, 16), 16, 16)]:
        covered_all &= bool(dp.coverage_counts(dims, s, t).min() >= 1)

    n125 = len(dp.sliding_positions((64, 64, 64), 32, 8))

    corners = dp.sliding_positions((24, 20, 16), 8, 5)
    patches = []
    for _ in corners:
        z = rng.standard_normal((8, 8, 8, 4))
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        patches.append(e / e.sum(axis=-1, keepdims=True))
    sums = dp.stitch(patches, corners, (24, 20, 16), 4).sum(axis=-1)
    sum_err = float(np.abs(sums - 1).max())

    const = np.array([0.1, 0.2, 0.3, 0.4])
    stitched = dp.stitch([np.broadcast_to(const, (8, 8, 8, 4))] * len(corners), corners, (24, 20, 16), 4)
    const_err = float(np.abs(stitched - const).max())

    ok = covered_all and n125 == 125 and sum_err <= 1e-6 and const_err <= 1e-6
    record("5 sliding window", ok,
           f"coverage {covered_all} (200 random triples); (64,32,8) -> {n125} patches; "
           f"max |sum-1|={sum_err:.1e}; constant error {const_err:.1e}")
    assert ok


# --- 6. optimizer oracle --------------------------------------------------------------------------


def test_criterion_6_optimizer_oracle(record):
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 2e-6
    theta_ref, m, v = 2.5, 0.0, 0.0
    with precision(np.float64):
        p = Tensor(np.array(2.5))
    state = AdamState(lr=lr, weight_decay=wd)
    worst = 0.0
    for t in range(1, 11):
        p.grad = np.asarray(float(p.data))  # gradient of theta^2 / 2
        adam_step({"theta": p}, state)
        g = theta_ref + wd * theta_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta_ref -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        worst = max(worst, abs(float(p.data) - theta_ref))

    q = Tensor(np.array([1.25, -3.0, 0.0]))
    before = q.data.copy()
    q.grad = np.zeros(3)
    adam_step({"q": q}, AdamState(weight_decay=0.0))
    noop = np.array_equal(q.data, before)

    ok = worst <= 1e-12 and noop
    record("6 optimizer oracle", ok, f"10-step trajectory max diff {worst:.1e} (<=1e-12); zero-gradient no-op {noop}")
    assert ok


# --- 7 / 8. desk-scale learning and ablation direction --------------------------------------------


@pytest.fixture(scope="module")
def phantoms():
    vol, lab = dp.generate_phantom(TRAIN_SEED)
    hvol, hlab = dp.generate_phantom(HELD_OUT_SEED)
    return (vol.normalized(), lab), (hvol.normalized(), hlab)


def _train_and_score(model, phantoms):
    (vol, lab), (hvol, hlab) = phantoms
    cfg = TrainConfig(model=model, **PROTOCOL)
    start = time.perf_counter()
    res = train(cfg, [(vol, lab)])
    train_seconds = time.perf_counter() - start
    _, pred_train = infer(res.net, vol, cfg.patch_size, cfg.overlap_step)
    _, pred_held = infer(res.net, hvol, cfg.patch_size, cfg.overlap_step)
    return dict(
        losses=res.losses(),
        seconds=train_seconds,
        train_report=evaluate(pred_train, lab.labels),
        held_report=evaluate(pred_held, hlab.labels),
    )


@pytest.fixture(scope="module")
def full_run(phantoms):
    return _train_and_score("full", phantoms)


@pytest.fixture(scope="module")
def model1_run(phantoms):
    return _train_and_score("1", phantoms)


def test_criterion_7_desk_scale_learning(record, full_run):
    losses = full_run["losses"]
    initial = losses[:20].mean()
    at_500 = losses[480:500].mean()
    drop = 1 - at_500 / initial
    report = full_run["train_report"]
    dice = {c.name: c.dice for c in report.classes}
    ok = drop >= 0.5 and report.avg_dice > 0.95 and full_run["seconds"] < 1800
    record("7 desk-scale learning", ok,
           f"loss {initial:.3f} -> {at_500:.3f} by step 500 (drop {drop:.0%}, need >=50%); "
           f"train DR avg {report.avg_dice:.4f} (>0.95) "
           + " ".join(f"{k}={v:.4f}" for k, v in dice.items())
           + f"; training {full_run['seconds'] / 60:.1f} min (<30)")
    assert ok


def test_criterion_8_ablation_direction(record, full_run, model1_run):
    full_dr = full_run["held_report"].avg_dice
    m1_dr = model1_run["held_report"].avg_dice
    ok = full_dr >= m1_dr
    record("8 ablation direction", ok,
           f"held-out avg DR full={full_dr:.4f} vs Model1={m1_dr:.4f} "
           f"(3D-MHD full={full_run['held_report'].avg_mhd3d:.3f}, Model1={model1_run['held_report'].avg_mhd3d:.3f})")
    assert ok


# --- 9. reproducibility -------------------------------------------------------------------------------


def _pipeline(tmp, phantom, eval_phantom):
    cfg = TrainConfig(model="full", base_width=4, patch_size=8, batch_size=3, steps=25, seed=3, overlap_step=4)
    res = train(cfg, [phantom], log_path=tmp / "loss.log", checkpoint_path=tmp / "model")
    _, pred = infer(res.net, eval_phantom[0], cfg.patch_size, cfg.overlap_step)
    (tmp / "report.txt").write_text(evaluate(pred, eval_phantom[1].labels).to_text())
    return res.net


def test_criterion_9_reproducibility(record, tmp_path):
    vol, lab = dp.generate_phantom(7, (24, 24, 24))
    hvol, hlab = dp.generate_phantom(8, (24, 24, 24))
    phantom, eval_phantom = (vol.normalized(), lab), (hvol.normalized(), hlab)
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        runs.append(_pipeline(tmp_path / name, phantom, eval_phantom))
    same = {
        f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("loss.log", "model.json", "model.bin", "report.txt")
    }
    serial, _ = infer(runs[0], eval_phantom[0], 8, 2, batch_size=4, workers=1)
    parallel, _ = infer(runs[0], eval_phantom[0], 8, 2, batch_size=4, workers=4)
    parallel_same = serial.tobytes() == parallel.tobytes()
    ok = all(same.values()) and parallel_same
    record("9 reproducibility", ok,
           "rerun bit-identical: " + ", ".join(f"{k}={v}" for k, v in same.items())
           + f"; parallel stitching bit-identical {parallel_same}")
    assert ok
