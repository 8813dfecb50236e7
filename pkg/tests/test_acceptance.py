"""Acceptance criteria 1-8.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured value
and its tolerance; the lines are repeated in the pytest terminal summary.
Criteria 2 and 4-7 share the session MNIST pipeline from conftest.
"""

import gzip
import itertools
import struct
import time
from fractions import Fraction

import numpy as np
import pytest

from dictshot import checkpoint, fewshot
from dictshot.cli import load_config
from dictshot.cost import cost
from dictshot.data import load_mnist_idx
from dictshot.engine import evaluate, train, transform_model
from dictshot.layers import Activation, BatchNorm, Conv2d, DecomposedDense, Dense, Dropout, Flatten, MaxPool2d
from dictshot.numeric import cross_entropy, cross_entropy_grad
from dictshot.subspace import decompose
from dictshot.transform import transform_conv, transform_fc

from conftest import MNIST_DIR, record
from gradcheck import check_layer, numeric_grad, rel_error
from randmodels import random_model

BETAS = (0.0, 0.1, 0.3, 0.5, 0.9)


def brute_force_rank(w, beta):
    # smallest column subset whose least-squares projection meets beta
    wn = np.linalg.norm(w)
    for l in range(1, w.shape[1] + 1):
        for cols in itertools.combinations(range(w.shape[1]), l):
            d = w[:, cols]
            c, *_ = np.linalg.lstsq(d, w, rcond=None)
            if np.linalg.norm(w - d @ c) / wn <= beta:
                return l
    return w.shape[1]


def random_matrix(rng, i):
    m = int(rng.integers(1, 65))
    # every fourth matrix is narrow enough for the exhaustive search
    n = int(rng.integers(1, 9)) if i % 4 == 0 else int(rng.integers(1, 65))
    if rng.random() < 0.5:
        return rng.normal(size=(m, n))
    r = int(rng.integers(1, min(m, n) + 1))
    return rng.normal(size=(m, r)) @ rng.normal(size=(r, n))


def test_criterion_1_decomposition_soundness():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_excess, worst_svd_gap = -np.inf, -np.inf
    failures, brute_checked = [], 0
    for i in range(200):
        w = random_matrix(rng, i)
        wn = np.linalg.norm(w)
        s = np.linalg.svd(w, compute_uv=False)
        ranks = []
        for beta in BETAS:
            dec = decompose(w, beta)
            err = np.linalg.norm(w - dec.dictionary @ dec.coefficients) / wn
            if not dec.rank_exhausted:
                worst_excess = max(worst_excess, err - beta)
                if err > beta + 1e-9:
                    failures.append((i, beta, "error above beta"))
            tail = np.sqrt(np.sum(s[dec.rank :] ** 2)) / wn
            worst_svd_gap = max(worst_svd_gap, tail - err)
            if err < tail - 1e-9:
                failures.append((i, beta, "below SVD bound"))
            if w.shape[1] <= 8 and beta > 0:
                brute_checked += 1
                if dec.rank < brute_force_rank(w, beta):
                    failures.append((i, beta, "beats brute force"))
            ranks.append(dec.rank)
        if ranks != sorted(ranks, reverse=True):
            failures.append((i, None, f"ranks {ranks} not monotone"))
    seconds = time.perf_counter() - start
    passed = not failures and seconds < 60
    record(
        1,
        passed,
        f"200 matrices x {len(BETAS)} betas, {brute_checked} brute-force checks, "
        f"max(err-beta)={worst_excess:.2e} (<=1e-9), max(svd_tail-err)={worst_svd_gap:.2e} (<=1e-9), "
        f"{seconds:.1f}s (<60s)",
    )
    assert not failures, failures[:5]
    assert seconds < 60


def test_criterion_2_zero_threshold_equivalence(mnist_pipeline):
    test = mnist_pipeline["test"]
    x = test.images[:1000]
    dense = mnist_pipeline["dense"]
    start = time.perf_counter()
    dec = transform_model(dense, {"conv": 0.0, "fc": 0.0})
    ref, out = dense.predict(x), dec.predict(x)
    rel = np.max(np.abs(out - ref)) / np.max(np.abs(ref))
    top1_changes = int(np.sum(ref.argmax(1) != out.argmax(1)))
    seconds = time.perf_counter() - start
    passed = rel < 1e-9 and top1_changes == 0 and seconds < 60
    record(
        2,
        passed,
        f"{len(x)} test images, max relative logit change {rel:.2e} (<1e-9), "
        f"top-1 changes {top1_changes} (==0), {seconds:.1f}s (<60s)",
    )
    assert passed


def _kink_free(x, margin=1e-3):
    x[np.abs(x) < margin] = margin * 5
    return x


def _layer_cases(rng):
    """Yield (kind, layer, input, train) for one random shape of every layer kind."""
    n = int(rng.integers(1, 4))
    fan_in, fan_out = int(rng.integers(1, 8)), int(rng.integers(1, 8))
    c, h = int(rng.integers(1, 4)), int(rng.integers(3, 7))
    oc, k = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    beta = float(rng.choice([0.0, 0.3, 0.6]))
    img = rng.normal(size=(n, c, h, h))
    vec = rng.normal(size=(n, fan_in))

    yield "fc", Dense("fc", rng.normal(size=(fan_out, fan_in)), rng.normal(size=fan_out)), vec, False
    yield "decomposed_fc", transform_fc(rng.normal(size=(fan_out, fan_in)), rng.normal(size=fan_out), beta), vec, False
    w = rng.normal(size=(oc, c, k, k))
    yield "conv", Conv2d("conv", w, rng.normal(size=oc), stride, pad), img, False
    dconv = transform_conv(w, rng.normal(size=oc), beta, stride=stride, padding=pad)
    yield "decomposed_conv", dconv, img, False
    pool = int(rng.integers(1, 3))
    yield "maxpool", MaxPool2d("pool", pool, int(rng.integers(1, pool + 1))), img, False
    bn = BatchNorm("bn", c, rng.normal(size=c), rng.normal(size=c))
    bn.track_stats = False
    # batch statistics need more than one value per channel
    yield "batchnorm_train", bn, rng.normal(size=(n + 1, c, h, h)), True
    bn_eval = BatchNorm("bn", c, rng.normal(size=c), rng.normal(size=c))
    bn_eval.buffers["running_mean"] = rng.normal(size=c)
    bn_eval.buffers["running_var"] = rng.uniform(0.5, 2.0, c)
    yield "batchnorm_eval", bn_eval, img, False
    yield "dropout", Dropout("drop", float(rng.uniform(0.1, 0.7))), img, True
    yield "relu", Activation("act", "relu"), _kink_free(img.copy()), False
    yield "leaky_relu", Activation("act", "leaky_relu", float(rng.uniform(0.01, 0.3))), _kink_free(img.copy()), False
    yield "flatten", Flatten("flat"), img, False


def test_criterion_3_gradient_integrity():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for shape_seed in range(20):
        for kind, layer, x, train_mode in _layer_cases(rng):
            errs = check_layer(layer, x.copy(), seed=shape_seed, train=train_mode)
            worst[kind] = max(worst.get(kind, 0.0), max(errs.values()))
        z = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(2, 11))))
        y = rng.integers(0, z.shape[1], z.shape[0])
        err = rel_error(cross_entropy_grad(z, y), numeric_grad(lambda: cross_entropy(z, y), z))
        worst["softmax_cross_entropy"] = max(worst.get("softmax_cross_entropy", 0.0), err)
    seconds = time.perf_counter() - start
    top = max(worst.values())
    passed = top <= 1e-5 and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, passed, f"20 shapes x {len(worst)} kinds, max rel error {top:.2e} (<=1e-5), {seconds:.1f}s (<60s); {detail}")
    assert top <= 1e-5, worst
    assert seconds < 60


def test_criterion_4_mnist_fewshot(mnist_pipeline):
    p = mnist_pipeline
    config = load_config("fewshot", "fewshot")
    spec = fewshot.EpisodeSpec(ways=1, shots=5, old_exemplars_per_class=5)
    start = time.perf_counter()
    reports = fewshot.run_episodes(
        p["decomposed"], p["pool"], spec, fewshot.STANDARD, config, 20,
        p["old_train"], p["old_test"], eval_every=config.max_iterations,
    )
    agg = fewshot.aggregate(reports)
    minutes = (p["seconds"] + time.perf_counter() - start) / 60
    iterations = max(r.iterations for r in reports)
    gates = {
        "train images <= 20000": len(p["old_train"]) <= 20000,
        "epochs <= 5": p["train_config"].epochs <= 5,
        "dense >= 0.97": p["dense_acc"] >= 0.97,
        "fine-tune epochs <= 2": p["finetune_config"].epochs <= 2,
        "fine-tuned within 0.01": p["dense_acc"] - p["dec_acc"] <= 0.01,
        "new >= 0.90": agg.new_mean >= 0.90,
        "old >= 0.95": agg.old_mean >= 0.95,
        "iterations <= 100": iterations <= 100,
        "runtime <= 30 min": minutes <= 30,
    }
    failed = [k for k, ok in gates.items() if not ok]
    record(
        4,
        not failed,
        f"held-out digit {p['held_out']}, dense {p['dense_acc']:.4f} (>=0.97), "
        f"fine-tuned {p['dec_acc']:.4f} (drop<=0.01), 20 episodes x {iterations} it: "
        f"new {agg.new_mean:.4f}+-{agg.new_ci95:.4f} (>=0.90), old {agg.old_mean:.4f}+-{agg.old_ci95:.4f} (>=0.95), "
        f"{minutes:.1f} min (<=30)" + (f"; failed: {', '.join(failed)}" if failed else ""),
    )
    assert not failed, failed


def test_criterion_5_ultralight_preserves_old_logits(mnist_pipeline):
    p = mnist_pipeline
    spec = fewshot.EpisodeSpec(ways=1, shots=5, old_exemplars_per_class=5, seed=11)
    episode = fewshot.sample_episode(p["pool"], spec, p["old_train"])
    model = fewshot.extend_output_layer(p["decomposed"], 1, episode.classes, seed=11)
    x = p["test"].images[:1000]
    old = p["decomposed"].num_outputs
    before = model.predict(x)[:, :old].copy()
    config = load_config("fewshot", "fewshot")
    rep = fewshot.fewshot_update(model, episode, fewshot.ULTRA_LIGHT, config, eval_every=config.max_iterations)
    after = model.predict(x)[:, :old]
    moved = int(np.sum(before != after))
    new_rows_changed = not np.array_equal(
        model.output_layer.dictionary[old:], fewshot.extend_output_layer(p["decomposed"], 1, episode.classes, seed=11)
        .output_layer.dictionary[old:]
    )
    passed = before.tobytes() == after.tobytes() and new_rows_changed
    record(
        5,
        passed,
        f"{len(x)} inputs x {old} old logits after {rep.iterations} ultra-light iterations: "
        f"{moved} values differ (==0, bitwise); new rows trained: {new_rows_changed}",
    )
    assert passed


def test_criterion_6_parameter_reduction_arithmetic(mnist_pipeline):
    p = mnist_pipeline
    dec, dense = p["decomposed"], p["dense"]
    ratios, ok = [], True
    probe = dec.copy()
    fewshot.mode_mask(probe, fewshot.STANDARD, 0).apply(probe)
    for layer in probe.layers:
        if not isinstance(layer, DecomposedDense):
            continue
        m, l = layer.dictionary.shape
        trainable = layer.params["coefficients"].trainable_count()
        dense_count = dense.layer(layer.name).params["weight"].value.size
        ratio = Fraction(trainable, dense_count)
        ok &= ratio == Fraction(l, m)
        ratios.append(f"{layer.name} {trainable}/{dense_count} vs l/m={l}/{m}")
    l_last = dec.output_layer.rank
    for n_new in (1, 2, 3):
        ext = fewshot.extend_output_layer(dec, n_new)
        count = fewshot.trainable_count(ext, fewshot.ULTRA_LIGHT, n_new)["total"]
        ok &= count == n_new * l_last
        ratios.append(f"ultra-light {n_new} new: {count} vs {n_new}*{l_last}")
    record(6, ok, "exact: " + "; ".join(ratios))
    assert ok


SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9, 0.95)


def test_criterion_7_compression_trend(mnist_pipeline):
    p = mnist_pipeline
    params, macs, drops = [], [], {}
    for beta in SWEEP:
        dec = transform_model(p["dense"], {"conv": beta, "fc": beta})
        report = cost(dec)
        params.append(report.totals["params_decomposed"])
        macs.append(report.totals["macs_decomposed"])
        if beta <= 0.7:
            train(dec, p["old_train"], p["finetune_config"])
            drops[beta] = p["dense_acc"] - evaluate(dec, p["old_test"]).top1
    monotone = params == sorted(params, reverse=True) and macs == sorted(macs, reverse=True)
    worst = max(drops.values())
    passed = monotone and worst <= 0.02
    record(
        7,
        passed,
        f"betas {list(SWEEP)}: params {params}, MACs {macs} (non-increasing: {monotone}); "
        f"max old-class drop after fine-tune for beta<=0.7 {worst:.4f} (<=0.02) "
        + ", ".join(f"{b}:{d:+.4f}" for b, d in drops.items()),
    )
    assert passed


def _idx_oracle(path):
    raw = gzip.decompress(path.read_bytes())
    magic, count = struct.unpack(">II", raw[:8])
    if magic == 0x00000803:
        rows, cols = struct.unpack(">II", raw[8:16])
        return np.frombuffer(raw[16:], dtype=np.uint8).reshape(count, 1, rows, cols)
    return np.frombuffer(raw[8:], dtype=np.uint8)


def test_criterion_8_io_exactness(tmp_path):
    mismatched = []
    for seed in range(100):
        model = random_model(seed)
        blob = checkpoint.dumps(model)
        path = tmp_path / f"{seed}.ckpt"
        checkpoint.save_checkpoint(model, path)
        loaded = checkpoint.load_checkpoint(path)
        same = checkpoint.dumps(loaded) == blob == path.read_bytes()
        same &= all(
            a.value.tobytes() == b.value.tobytes() for (_, a), (_, b) in zip(model.named_params(), loaded.named_params())
        )
        if not same:
            mismatched.append(seed)

    idx_ok = True
    for split in ("train", "t10k"):
        images = MNIST_DIR / f"{split}-images-idx3-ubyte.gz"
        labels = MNIST_DIR / f"{split}-labels-idx1-ubyte.gz"
        ds = load_mnist_idx(images, labels)
        pixels = _idx_oracle(images)
        idx_ok &= np.array_equal(ds.images, pixels / 255.0) and ds.images.dtype == np.float64
        idx_ok &= np.array_equal(ds.labels, _idx_oracle(labels))
        # every byte value maps to a distinct float, so rounding back recovers the file exactly
        idx_ok &= np.array_equal(np.rint(ds.images * 255).astype(np.uint8), pixels)
    passed = not mismatched and idx_ok
    record(
        8,
        passed,
        f"100 random checkpoints, {len(mismatched)} not bit-identical (==0); "
        f"bundled IDX train/t10k files parsed bit-exactly: {idx_ok}",
    )
    assert passed
