"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import json
import math
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import record_acceptance, toy_chain, toy_resnet
from softprune import ops
from softprune.analyzer import layer_reduction, layer_table, model_flops, pruned_ratio, wallclock_bench
from softprune.compactor import compact, derive_keep_plan, equivalence_check, identity_plan
from softprune.data import synthetic_pair
from softprune.experiment import desk_config, run_experiment
from softprune.network import ModelSpec, build_model, forward
from softprune.reference import conv2d_naive, count_macs_naive
from softprune.sfp import (PruneRecord, SfpConfig, filter_norms, num_pruned, prune_step, select_filters,
                           sfp_train)


def _grad_errors(rng):
    """Worst relative error of every differentiable op over random small shapes."""
    errs = {}
    for _ in range(3):
        b, c, o, h = (int(v) for v in rng.integers(1, 4, 4))
        h += 2
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = k // 2
        if (h + 2 * pad - k) % stride:
            stride = 1
        x = rng.standard_normal((b, c, h, h))
        w = rng.standard_normal((o, c, k, k))
        r = rng.standard_normal(ops.conv2d(x, w, stride, pad).shape)
        dx, dw = ops.conv2d_grad(r, x, w, stride, pad)
        e = ops.grad_check(lambda x, w: float((ops.conv2d(x, w, stride, pad) * r).sum()), [x, w], [dx, dw])
        errs["conv2d"] = max(errs.get("conv2d", 0), e)

        xb = rng.standard_normal((b + 1, c, h, h)) * 2 + 0.5
        gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
        y, cache = ops.batch_norm(xb, gamma, beta)
        r = rng.standard_normal(y.shape)
        grads = ops.batch_norm_grad(r, cache)
        e = ops.grad_check(lambda x, g, bb: float((ops.batch_norm(x, g, bb)[0] * r).sum()), [xb, gamma, beta],
                           list(grads))
        errs["batch_norm"] = max(errs.get("batch_norm", 0), e)

        xr = rng.standard_normal((b, c, h))
        xr[np.abs(xr) < 1e-3] = 0.5
        r = rng.standard_normal(xr.shape)
        e = ops.grad_check(lambda x: float((ops.relu(x) * r).sum()), [xr], [ops.relu_grad(r, xr)])
        errs["relu"] = max(errs.get("relu", 0), e)

        xl, wl, bl = rng.standard_normal((b, c + 2)), rng.standard_normal((o, c + 2)), rng.standard_normal(o)
        r = rng.standard_normal((b, o))
        e = ops.grad_check(lambda x, w, bb: float((ops.linear(x, w, bb) * r).sum()), [xl, wl, bl],
                           list(ops.linear_grad(r, xl, wl)))
        errs["linear"] = max(errs.get("linear", 0), e)

        xp = rng.standard_normal((b, c, h, h))
        r = rng.standard_normal((b, c))
        e = ops.grad_check(lambda x: float((ops.avg_pool_global(x) * r).sum()), [xp],
                           [ops.avg_pool_global_grad(r, xp.shape)])
        errs["avg_pool"] = max(errs.get("avg_pool", 0), e)

        logits = rng.standard_normal((b + 2, o + 2))
        labels = rng.integers(0, o + 2, b + 2)
        _, g = ops.softmax_cross_entropy(logits, labels)
        e = ops.grad_check(lambda z: ops.softmax_cross_entropy(z, labels)[0], [logits], [g])
        errs["softmax_cross_entropy"] = max(errs.get("softmax_cross_entropy", 0), e)
    return errs


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    errs = _grad_errors(np.random.default_rng(2024))
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 30
    record_acceptance(1, ok, f"max relative error {worst:.2e} over {sorted(errs)}; {elapsed:.1f} s")
    assert ok


def test_criterion_02_convolution_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        b, c, o = (int(v) for v in rng.integers(1, 5, 3))
        h, w = (int(v) for v in rng.integers(3, 9, 2))
        k = int(rng.choice([1, 3]))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        stride = int(rng.choice([1, 2]))
        if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
            stride = 1
        x = rng.standard_normal((b, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        worst = max(worst, float(np.abs(ops.conv2d(x, wt, stride, pad) - conv2d_naive(x, wt, stride, pad)).max()))
    ok = worst < 1e-10
    record_acceptance(2, ok, f"200 random shapes, max abs diff {worst:.2e}")
    assert ok


def test_criterion_03_selection_arithmetic():
    rng = np.random.default_rng(0)
    cardinality = all(len(select_filters(rng.random(n), p)) == math.floor(n * p + 1e-9) == num_pruned(n, p)
                      for n in (4, 10, 16, 64) for p in (0.0, 0.1, 0.3, 0.5))
    exact_floor = [num_pruned(n, p) for n, p in ((10, 0.3), (64, 0.1), (16, 0.5))] == [3, 6, 8]
    ties = (select_filters([1.0] * 6, 0.5) == (0, 1, 2)
            and all(select_filters([2.0, 1.0, 1.0, 1.0, 1.0], 0.5) == (1, 2) for _ in range(5)))
    layer = toy_chain(widths=(2,), strides=(1,), input_shape=(3, 3, 3)).layer("conv1")
    layer.filters[:] = 0
    layer.filters[0, :, 1, 1] = [0.9, 0.0, 0.0]
    layer.filters[1, :, 1, 1] = [0.5, 0.5, 0.5]
    diverge = select_filters(filter_norms(layer, 2), 0.5) == (1,) and select_filters(filter_norms(layer, 1), 0.5) == (0,)
    ok = cardinality and exact_floor and ties and diverge
    record_acceptance(3, ok, f"cardinality {cardinality}, floor {exact_floor}, ties {ties}, l1/l2 divergence {diverge}")
    assert ok


def test_criterion_04_zero_filter_semantics():
    rng = np.random.default_rng(4)
    train, _ = synthetic_pair(64, 8, (1, 13, 13), seed=4)
    model = toy_chain(seed=4)
    sfp_train(model, train, SfpConfig(pruning_rate=0.3, epoch_max=1, batch_size=32))  # non-trivial BN stats
    x = rng.standard_normal((20, 1, 13, 13)).astype(np.float32)
    worst_norm = worst_map = 0.0
    for rate in (0.1, 0.3, 0.5):
        event = prune_step(model, rate, epoch=2)
        for training in (True, False):
            h = x
            for layer in model.conv_layers():
                z = ops.conv2d(h, layer.filters, layer.stride, layer.pad)
                y, _ = ops.batch_norm(z, layer.bn_gamma, layer.bn_beta, layer.bn_running_mean.copy(),
                                      layer.bn_running_var.copy(), training=training)
                sel = list(event.selections.get(layer.layer_id, ()))
                if sel:
                    worst_norm = max(worst_norm, float(filter_norms(layer)[sel].max()))
                    worst_map = max(worst_map, float(np.abs(y[:, sel]).max()))
                h = ops.relu(y)
    ok = worst_norm == 0.0 and worst_map == 0.0
    record_acceptance(4, ok, f"max selected norm {worst_norm}, max post-BN |value| {worst_map} (train and eval)")
    assert ok


def _trained_pruned(model, shape, seed):
    train, _ = synthetic_pair(128, 8, shape, seed=seed)
    _, record, _ = sfp_train(model, train, SfpConfig(pruning_rate=0.3, epoch_max=2, batch_size=32, lr=0.05))
    model.eval()
    return record


def test_criterion_05_masked_equals_compact():
    diffs = {}
    resnet = toy_resnet(depth=8, seed=5)
    chain = toy_chain(seed=5)
    for name, model, shape in (("resnet8", resnet, (3, 9, 9)), ("chain4", chain, (1, 13, 13))):
        record = _trained_pruned(model, shape, seed=5)
        diffs[name] = equivalence_check(model, compact(model, derive_keep_plan(model, record)), n_inputs=100)
    x = np.random.default_rng(5).standard_normal((8, 1, 13, 13)).astype(np.float32)
    bitwise = np.array_equal(forward(chain, x), forward(compact(chain, identity_plan(chain)), x))
    ok = max(diffs.values()) < 1e-5 and bitwise
    record_acceptance(5, ok, ", ".join(f"{k} max logit diff {v:.2e}" for k, v in diffs.items())
                      + f"; identity plan bitwise {bitwise}")
    assert ok


def test_criterion_06_flops_formula():
    spec = ModelSpec(widths=(8, 16, 16, 32), strides=(1, 2, 1, 2), input_shape=(1, 13, 13))
    exact = all(layer_reduction(spec, p, "conv2") == 1 - (1 - Fraction(p).limit_denominator(10 ** 9)) ** 2
                for p in (0.0, 0.1, 0.3, 0.5))
    toys = [toy_chain(), toy_chain(widths=(3, 5), strides=(2, 1), input_shape=(2, 9, 9)),
            toy_resnet(), toy_resnet(depth=14, stage_widths=(2, 4, 6), input_shape=(1, 9, 9))]
    counts = [(model_flops(m).total_macs, count_macs_naive(m)) for m in toys]
    agree = all(a == b for a, b in counts)
    ok = exact and agree
    record_acceptance(6, ok, f"1-(1-P)^2 exact {exact}; counter vs oracle {counts}")
    assert ok


def test_criterion_07a_resnet20_total():
    start = time.perf_counter()
    macs = model_flops("resnet20").total_macs
    elapsed = time.perf_counter() - start
    rel = macs / 4.06e7 - 1
    ok = abs(rel) <= 0.05 and elapsed < 5
    record_acceptance("7a", ok, f"ResNet-20 MACs {macs:,} ({100 * rel:+.2f}% vs 4.06E7); {elapsed:.2f} s")
    assert ok


def test_criterion_07b_resnet18_pruned_ratio():
    start = time.perf_counter()
    table = layer_table("resnet18")
    rates = {e.layer_id: 0.3 for e in table if e.layer_id != "stem" and "shortcut" not in e.layer_id}
    ratio = 100 * pruned_ratio("resnet18", rates, "alignment-aware")
    elapsed = time.perf_counter() - start
    ok = abs(ratio - 41.8) <= 2 and elapsed < 5
    record_acceptance("7b", ok, f"ResNet-18 P=0.3 pruned FLOPs {ratio:.2f}% (target 41.8 +- 2); {elapsed:.2f} s")
    assert ok


@pytest.fixture(scope="module")
def desk_runs(mnist_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    base = desk_config(mnist_dir, bench=False)
    baseline = run_experiment(base.replace("sfp", pruning_rate=0.0), out / "p0")
    pruned = run_experiment(base, out / "p01")
    return baseline, pruned, time.perf_counter() - start


def test_criterion_08_desk_sfp(desk_runs):
    baseline, pruned, elapsed = desk_runs
    base_acc = baseline.summary["test_acc"]
    compact_acc = pruned.summary["compact_test_acc"]
    recon = [r["reconstruction"] for r in pruned.log.rows if r["reconstruction"] is not None]
    a = base_acc >= 0.95
    b = abs(base_acc - compact_acc) <= 0.015
    c = len(recon) == 9 and min(recon) >= 0.9
    ok = a and b and c and elapsed < 600
    record_acceptance(8, ok, f"(a) baseline {100 * base_acc:.2f}%; (b) P=0.1 compact {100 * compact_acc:.2f}% "
                             f"(gap {100 * (base_acc - compact_acc):.2f} pts); (c) min reconstruction "
                             f"{min(recon):.3f} over {len(recon)} prunes; {elapsed:.0f} s")
    assert ok


def test_criterion_09_determinism(mnist_dir, tmp_path):
    outputs = []
    for name in ("a", "b"):
        cmd = [sys.executable, "-m", "softprune.cli", "reproduce", "--data-dir", str(mnist_dir),
               "--deterministic", "--seed", "0", "--out-dir", str(tmp_path / name), "--json"]
        res = subprocess.run(cmd, capture_output=True, text=True, check=True)
        outputs.append(json.loads(res.stdout)["runs"][0]["log_hash"])
    csv_a = (tmp_path / "a" / "prune_record.csv").read_bytes()
    csv_b = (tmp_path / "b" / "prune_record.csv").read_bytes()
    ok = outputs[0] == outputs[1] and csv_a == csv_b
    record_acceptance(9, ok, f"log hashes {outputs[0][:12]} / {outputs[1][:12]}; prune records identical {csv_a == csv_b}")
    assert ok


def test_criterion_10_realistic_vs_theoretical():
    spec = ModelSpec(widths=(8, 16, 16, 32), strides=(1, 2, 1, 2), input_shape=(1, 29, 29))
    model = build_model(spec, seed=0)
    record = PruneRecord([prune_step(model, 0.3, epoch=1)])
    small = compact(model, derive_keep_plan(model, record))
    report = wallclock_bench(model, small, batch=32, reps=20, warmup=3)
    ok = 0 < report.realistic_speedup <= report.theoretical_speedup
    record_acceptance(10, ok, f"realistic {100 * report.realistic_speedup:.1f}% vs theoretical "
                              f"{100 * report.theoretical_speedup:.1f}% ({report.backend}, {report.threads} thread(s))")
    assert ok
