"""Acceptance criteria 1-9, one PASS/FAIL line each.

Lines are printed as each criterion finishes and repeated in the terminal
summary. Criteria 6 and 7 train 60 models on a 398-participant corpus and
dominate the runtime.
"""

import csv
import math
import os
import re
import time
from dataclasses import replace

import numpy as np
import pytest

from aidetect import cli
from aidetect.agents import AgentConfig, generate_corpus
from aidetect.dataset import build_corpus, kfold, split_80_20, tail_count, trim_corpus, trim_outliers
from aidetect.encoding import classify_moves, sharp_im, smooth_im
from aidetect.experiment import default_hyperparams, emit_report, load_summary, run_protocol, shuffle_labels, table_columns
from aidetect.landscape import MAX_HEIGHT, detect_peaks, generate
from aidetect.models import ModelSpec, build_lstm_branch, build_model, param_count
from aidetect.nn.gradcheck import grad_check, layer_grad_check
from aidetect.nn.layers import (
    LSTM, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Linear, MaxPool2d, ReLU, SoftmaxCrossEntropy,
)
from aidetect.torus import BOX_KERNEL

from oracles import (
    classify, lenet5_count, local_maxima, replay_channels, resnet18_count, sb_resnet18_count,
    widest_path_prominence, wrapped_conv,
)

RESULTS = []
WORKERS = os.cpu_count() or 1


def verdict(capsys, number, ok, detail, elapsed):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail} [{elapsed:.1f} s]"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def world():
    logs, maps = generate_corpus(398, AgentConfig(), master_seed=42)
    return logs, {m.landscape_id: m for m in maps}


def test_criterion_1_parameter_counts(capsys):
    t = time.time()
    published = {
        "lenet5": (58_484, 59_084, 59_684),
        "sb_resnet18": (151_362, 157_634, 163_906),
        "resnet18": (11_683_240, 11_689_512, 11_695_784),
    }
    oracle = {"lenet5": lenet5_count, "sb_resnet18": sb_resnet18_count, "resnet18": lambda c: resnet18_count(c, 1000)}
    ok = True
    for arch, want in published.items():
        head = "thousand_way" if arch == "resnet18" else "two_way"
        got = [param_count(build_model(ModelSpec(arch, c, head=head))) for c in (1, 3, 5)]
        ok &= tuple(got) == want == tuple(oracle[arch](c) for c in (1, 3, 5))
        delta = 5 * 5 * 12 * 2 if arch == "lenet5" else 7 * 7 * 64 * 2
        ok &= got[1] - got[0] == got[2] - got[1] == delta
    elapsed = time.time() - t
    verdict(capsys, 1, ok and elapsed < 1.0, "parameter counts and channel deltas exact", elapsed)


def test_criterion_2_gradient_checks(capsys):
    t = time.time()
    rng = np.random.default_rng(2)
    layers = [
        (Conv2d(2, 3, 3, stride=2, padding=1, rng=rng), (2, 7, 7, 2)),
        (MaxPool2d(2, 2), (2, 6, 6, 3)),
        (GlobalAvgPool(), (2, 3, 3, 4)),
        (BatchNorm2d(3), (4, 3, 3, 3)),
        (Linear(5, 3, rng=rng), (4, 5)),
        (ReLU(), (3, 6)),
        (Dropout(0.3, rng=rng), (3, 6)),
        (LSTM(1, 4, rng=rng), (3, 9)),
    ]
    worst = {}
    for layer, shape in layers:
        x = np.random.default_rng(100).standard_normal(shape)
        worst[layer.kind] = layer_grad_check(layer, x).max_rel_error
    # fused softmax cross-entropy against plain central differences
    z, y = rng.standard_normal((5, 2)), np.array([0, 1, 1, 0, 1])
    ce = SoftmaxCrossEntropy()
    ce.forward(z, y)
    g = ce.backward()
    err = 0.0
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += 1e-5
        zm[i] -= 1e-5
        num = (SoftmaxCrossEntropy().forward(zp, y) - SoftmaxCrossEntropy().forward(zm, y)) / 2e-5
        err = max(err, abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-7))
    worst["softmax_ce"] = err

    img = rng.standard_normal((2, 5, 24, 24))
    ser = np.sign(rng.standard_normal((2, 126)))
    lab = np.array([0, 1])
    worst["lenet5"] = grad_check(build_model(ModelSpec("lenet5", 1), seed=1), img[:1, :1], None, lab[:1], max_entries=20).max_rel_error
    worst["sb_resnet18"] = grad_check(build_model(ModelSpec("sb_resnet18", 5), seed=1), img, None, lab, max_entries=10).max_rel_error
    branch, _ = build_lstm_branch(series_len=126, hidden=32, seed=1)
    worst["lstm_branch"] = layer_grad_check(branch, ser[:1], max_entries=40).max_rel_error
    fusion = build_model(ModelSpec("sb_resnet18_lstm", 5, dropout=0.3), seed=1)
    worst["fusion"] = grad_check(fusion, img, ser, lab, max_entries=8).max_rel_error
    elapsed = time.time() - t
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    verdict(capsys, 2, ok, f"{len(worst)} checks, worst {worst[top]:.2e} ({top}) < 1e-4", elapsed)


def test_criterion_3_encoding_oracles(capsys, world):
    t = time.time()
    logs, maps = world
    hmap = generate(5, 4)
    rng = np.random.default_rng(3)
    smooth_err = 0.0
    for _ in range(100):
        moves = [tuple(p) for p in rng.integers(0, 24, size=(int(rng.integers(1, 126)), 2))]
        want = wrapped_conv(sharp_im(moves, hmap).channels[0], BOX_KERNEL)
        smooth_err = max(smooth_err, float(np.max(np.abs(smooth_im(moves, hmap).channels[0] - want))))
    classify_ok = True
    for _ in range(1000):
        moves = [tuple(p) for p in rng.integers(0, 24, size=(int(rng.integers(1, 60)), 2))]
        classify_ok &= list(classify_moves(moves).labels) == classify(moves)
    corpus = build_corpus(logs, maps, "cmc")
    sv = corpus.series
    series_ok = set(np.unique(sv).tolist()) <= {-1.0, 0.0, 1.0}
    lengths = np.minimum(corpus.interactions, 126)
    series_ok &= all(np.all(sv[i, :k] != 0) and not sv[i, k:].any() for i, k in enumerate(lengths))
    channels_ok = True
    for log, img in zip(logs, corpus.images):
        moves = [(m.x, m.y) for m in log.moves]
        ref = replay_channels(moves, maps[log.landscape_id].values)
        channels_ok &= np.array_equal(img, ref.astype(np.float32))
        channels_ok &= np.array_equal(img[2] != 0, img[1] == 1)
    elapsed = time.time() - t
    ok = smooth_err <= 1e-12 and classify_ok and series_ok and channels_ok and elapsed < 60
    detail = (f"smooth err {smooth_err:.1e}, classify 1000/1000 {'ok' if classify_ok else 'bad'}, "
              f"series {'ok' if series_ok else 'bad'}, cmc channels on {len(logs)} samples {'ok' if channels_ok else 'bad'}")
    verdict(capsys, 3, ok, detail, elapsed)


def test_criterion_4_landscape_invariants(capsys):
    t = time.time()
    ok, checked = True, 0
    for peaks in (1, 4):
        for i in range(500):
            m = generate(10_000 + i, peaks)
            v = m.values
            ok &= v.min() >= 0.0 and v.max() <= MAX_HEIGHT
            maxima = local_maxima(v)
            ok &= len(maxima) == peaks
            if peaks == 4:
                ok &= int((v == v.max()).sum()) == 1
            report = detect_peaks(m)
            for node, prom in zip(report.nodes, report.prominences):
                brute = widest_path_prominence(v, (node.x, node.y))
                ok &= brute > 0 and math.isclose(prom, brute, abs_tol=1e-9)
            checked += 1
    elapsed = time.time() - t
    verdict(capsys, 4, ok and elapsed < 120, f"{checked} maps: range, peak count, unique max, prominence", elapsed)


def test_criterion_5_trim_and_split_arithmetic(capsys, world):
    t = time.time()
    logs, _ = world
    kept = trim_outliers(logs)
    ok = len(logs) == 1592 and tail_count(1592) == 39 and len(kept) == 1514
    for n in (1514, 757, 103, 5):
        sp = split_80_20(n, n)
        ok &= len(sp.test) == int(math.floor(0.2 * n + 0.5))
        ok &= sorted(np.concatenate([sp.train, sp.test]).tolist()) == list(range(n))
        folds = kfold(n, 5 if n == 5 else 10, seed=n)
        sizes = [len(f.test) for f in folds]
        ok &= max(sizes) - min(sizes) <= 1
        ok &= sorted(np.concatenate([f.test for f in folds]).tolist()) == list(range(n))
    elapsed = time.time() - t
    verdict(capsys, 5, ok and elapsed < 10, f"1592 -> {len(kept)} trials, splits and folds partition", elapsed)


def test_criterion_8_determinism(capsys, tmp_path):
    t = time.time()
    ok = True
    outs = {}
    for jobs in ("1", "2"):
        d = tmp_path / f"jobs{jobs}"
        d.mkdir()
        steps = [
            ["simulate", "--participants", "12", "--seed", "11", "--jobs", jobs, "--out", str(d / "c.jsonl")],
            ["encode", "--formulation", "bmc", "--corpus", str(d / "c.jsonl"), "--landscapes", str(d / "c.maps.jsonl"),
             "--seed", "11", "--out", str(d / "raw.aidt")],
            ["trim", "--pack", str(d / "raw.aidt"), "--seed", "11", "--out", str(d / "bmc.aidt")],
            ["train", "--pack", str(d / "bmc.aidt"), "--arch", "sb-resnet18", "--epochs", "2", "--seed", "11",
             "--out", str(d / "train")],
            ["protocol", "--pack", str(d / "bmc.aidt"), "--arch", "lenet5", "--epochs", "2", "--trials", "3",
             "--seed", "11", "--jobs", jobs, "--out", str(d / "protocol")],
        ]
        for argv in steps:
            ok &= cli.run(argv) == 0
        outs[jobs] = d
    artifacts = ["c.jsonl", "c.maps.jsonl", "raw.aidt", "bmc.aidt", "train/model.aidw", "train/trial.json",
                 "protocol/table.csv", "protocol/summary.json", "protocol/curves/lenet5_bmc_all.csv"]
    same = [(outs["1"] / a).read_bytes() == (outs["2"] / a).read_bytes() for a in artifacts]
    elapsed = time.time() - t
    verdict(capsys, 8, ok and all(same) and elapsed < 600,
            f"{sum(same)}/{len(artifacts)} artifacts byte-identical across --jobs 1 and 2", elapsed)


def test_criterion_9_protocol_arithmetic(capsys, tmp_path, world):
    t = time.time()
    logs, maps = world
    corpus = trim_corpus(build_corpus(logs[:48], maps, "sharp"))
    spec = ModelSpec("lenet5", 1)
    rep = run_protocol(spec, corpus, trials=4, seed=1, hp=replace(default_hyperparams(spec), epochs=3))
    paths = emit_report([rep], tmp_path)
    stored = load_summary(paths["summary"])[0]
    curves = stored.acc_curves
    mean_ok = np.array_equal(stored.mean_acc, curves.mean(axis=0))
    mean_ok &= np.array_equal(stored.acc_curves, rep.acc_curves)
    std_ok = True
    with open(paths["curves"] / "lenet5_sharp_all.csv") as fh:
        for row in csv.DictReader(fh):
            e = int(row["epoch"]) - 1
            col = curves[:, e]
            m = math.fsum(col) / len(col)
            s = math.sqrt(math.fsum((c - m) ** 2 for c in col) / (len(col) - 1))
            std_ok &= math.isclose(float(row["mean_acc"]), m, abs_tol=1e-15)
            std_ok &= math.isclose(float(row["std_acc"]), s, abs_tol=1e-15)
            lc = stored.loss_curves[:, e]
            ml = math.fsum(lc) / len(lc)
            std_ok &= math.isclose(float(row["mean_loss"]), ml, rel_tol=1e-14)
    header, *rows = paths["table"].read_text().splitlines()
    cols = header.split(",")[1:]
    cell = rows[0].split(",")[1 + table_columns().index("sharp_all")]
    ok = mean_ok and std_ok and len(cols) == 12 and re.fullmatch(r"\d+\.\d\d \(\d+\.\d\d\)", cell) is not None
    elapsed = time.time() - t
    verdict(capsys, 9, ok and elapsed < 5, f"means/stds recomputed exactly, {len(cols)} columns, cell '{cell}'", elapsed)


@pytest.fixture(scope="module")
def packs(world):
    logs, maps = world
    return {f: trim_corpus(build_corpus(logs, maps, f)) for f in ("cmc", "sharp")}


def test_criterion_6_separability(capsys, packs):
    t = time.time()
    cmc, sharp = packs["cmc"], packs["sharp"]
    fusion = run_protocol(ModelSpec("sb_resnet18_lstm", 5), cmc, "all", trials=20, seed=7, workers=WORKERS)
    lenet = run_protocol(ModelSpec("lenet5", 1), sharp, "all", trials=20, seed=7, workers=WORKERS)
    elapsed = time.time() - t
    ok = fusion.best_acc >= 0.70 and lenet.best_acc >= 0.60
    detail = (f"sb-resnet18+lstm cmc/all {fusion.best_acc:.4f} ({fusion.best_std:.4f}) >= 0.70 at epoch {fusion.best_epoch + 1}; "
              f"lenet5 sharp/all {lenet.best_acc:.4f} ({lenet.best_std:.4f}) >= 0.60 at epoch {lenet.best_epoch + 1}; "
              f"runtime target 60 min {'met' if elapsed < 3600 else 'exceeded'}")
    verdict(capsys, 6, ok, detail, elapsed)


def test_criterion_7_label_shuffled_control(capsys, packs):
    t = time.time()
    shuffled = shuffle_labels(packs["sharp"], 3)
    rep = run_protocol(ModelSpec("lenet5", 1), shuffled, "all", trials=20, seed=7, workers=WORKERS)
    elapsed = time.time() - t
    ok = abs(rep.best_acc - 0.5) <= 0.03 and rep.labels_shuffled
    verdict(capsys, 7, ok, f"lenet5 sharp/all shuffled labels {rep.best_acc:.4f} within 0.5 +/- 0.03", elapsed)
