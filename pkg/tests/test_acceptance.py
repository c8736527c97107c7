"""Acceptance criteria 1-12, one verdict line each.

Every test records ``criterion N: PASS|FAIL <detail>`` before asserting; the
lines are printed together in the pytest terminal summary. Criteria 7 and 8
train real models and are marked ``slow``.
"""

import csv
import json
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import VERDICTS
from incres import weights
from incres.arch import (ModelConfig, apply_freeze, build_model, desk_config, format_shape_table,
                         trainable_scalars)
from incres.cli import best_cell, main
from incres.data import (DatasetManifest, ManifestRow, gen_synthetic, load_manifest,
                         resize_samples, split_train_val, stratified_kfold,
                         threshold_baseline_accuracy, write_manifest)
from incres.metrics import ConfusionMatrix, metrics, roc_auc, trapezoid_auc
from incres.nn import grad_check
from incres.nn import functional as F
from incres.nn.gradcheck import check_model_gradients
from incres.train import TrainConfig, epochs_to_reach, finetune, fit

import test_gradcheck as G
from test_data import check_partition, random_partition_cases
from test_metrics import (_check_against_counting, auc_agreement_cases, metric_oracle_cases,
                          random_auc_mean)

FIXTURES = Path(__file__).parent / "fixtures"


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def _rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*"))
            if p.is_file()}


# ---------------------------------------------------------------- 1

def test_c01_published_reference_documented():
    # not an acceptance gate: the reference numbers are recorded in the
    # README next to the reasons they cannot be reproduced here
    readme = (Path(__file__).parents[1] / "README.md").read_text(encoding="utf-8")
    ok = "8.869E-01" in readme and "9.515E-01" in readme
    verdict(1, ok, "published full-scale results documented as reference only (not reproduced)")


# ---------------------------------------------------------------- 2

def test_c02_gradient_correctness():
    t0 = time.perf_counter()
    worst32, worst64, failed = 0.0, 0.0, []
    for name, op, inputs in G.CASES:
        r = grad_check(op, inputs, G.TOL32, precision="float32", samples=12, seed=1)
        worst32 = max(worst32, max(r.max_rel_error))
        if not r.passed:
            failed.append(f"{name}/32")
        if name.split("-")[0] in ("dense", "relu", "xent"):
            h = 1e-4 if name.startswith("xent") else 1e-5
            r = grad_check(op, inputs, G.TOL64, precision="float64", samples=20, seed=2, h=h)
            worst64 = max(worst64, max(r.max_rel_error))
            if not r.passed:
                failed.append(f"{name}/64")
    per_kind = {}
    for name, _, _ in G.CASES:
        kind = name.rsplit("-", 1)[0]
        per_kind[kind] = per_kind.get(kind, 0) + 1

    m = build_model(desk_config(dropout_rate=0.0, seed=4)).astype(np.float64)
    x = np.random.default_rng(4).random((4, 75, 75, 3))
    names = [p.name for p in m.params]
    errors, skipped = check_model_gradients(m, x, np.array([0, 1, 1, 0]), names, samples=2)
    worst_e2e = max(errors.values())
    elapsed = time.perf_counter() - t0
    ok = (not failed and min(per_kind.values()) >= G.INSTANCES and worst_e2e < 1e-3
          and skipped <= len(names) // 10 and elapsed < 120)
    verdict(2, ok, f"{len(G.CASES)} primitive cases (>= {min(per_kind.values())} per kind), "
                   f"max rel err 32-bit {worst32:.1e}, 64-bit {worst64:.1e}; end-to-end "
                   f"{len(names)} tensors max {worst_e2e:.1e} ({skipped} skipped); "
                   f"{elapsed:.0f}s{'; failed ' + ','.join(failed) if failed else ''}")


# ---------------------------------------------------------------- 3

def test_c03_shape_fidelity():
    canonical = build_model(ModelConfig())
    table = canonical.shape_table(1)
    fixture_ok = format_shape_table(table) == (FIXTURES / "canonical_shapes.txt").read_text()
    pre_pool = "x".join(map(str, next(r for r in table if r[0] == "conv_7b")[2][1:]))
    logits = canonical.forward(np.zeros((2, 299, 299, 3), np.float32), "eval")

    desk = build_model(desk_config(seed=3))
    x = np.random.default_rng(0).random((8, 75, 75, 3)).astype(np.float32)
    y = np.array([0, 1] * 4)
    desk.forward(x, "train", np.random.default_rng(0))
    t = time.perf_counter()
    out = desk.forward(x, "train", np.random.default_rng(0))
    desk.backward(F.softmax_cross_entropy(out, y)[1])
    step = time.perf_counter() - t
    ok = fixture_ok and pre_pool.startswith("8x8x") and logits.shape == (2, 2) and step < 1.0
    verdict(3, ok, f"fixture {'match' if fixture_ok else 'MISMATCH'}, pre-pool {pre_pool}, "
                   f"logits {logits.shape}, desk fwd+bwd {step:.2f}s per 8 images")


# ---------------------------------------------------------------- 4

def test_c04_metric_oracle():
    n = 0
    for y, p in metric_oracle_cases(1000):
        _check_against_counting(y, p)
        n += 1
    r = metrics(ConfusionMatrix(tp=3, tn=2, fp=1, fn=0))
    ok = abs(r.acc - 0.8333) <= 1e-4 and abs(r.f1 - 0.8571) <= 1e-4
    verdict(4, ok and n == 1000, f"{n} random instances exact to 1e-12; worked example "
                                 f"ACC {r.acc:.4f} F1 {r.f1:.4f}")


# ---------------------------------------------------------------- 5

def test_c05_auc_agreement():
    worst = max(abs(roc_auc(y, s) - trapezoid_auc(y, s)) for y, s in auc_agreement_cases(200))
    fixed = [([1, 1, 0, 0], [0.9, 0.8, 0.4, 0.3], 1.0), ([1, 0], [0.3, 0.7], 0.0),
             ([1, 1, 0, 0], [0.9, 0.2, 0.8, 0.1], 0.75), ([1, 0], [0.5, 0.5], 0.5)]
    fixed_ok = all(roc_auc(y, s) == w and trapezoid_auc(y, s) == w for y, s, w in fixed)
    mean = random_auc_mean(1000)
    ok = worst < 1e-9 and fixed_ok and 0.47 <= mean <= 0.53
    verdict(5, ok, f"200 sets max |rank - trapezoid| {worst:.1e}; fixed examples "
                   f"{'exact' if fixed_ok else 'WRONG'}; random-score mean AUC {mean:.4f}")


# ---------------------------------------------------------------- 6

def test_c06_freeze_invariance():
    train, val = split_train_val(resize_samples(gen_synthetic(24, 16, 6), 75), 0.25, 0)
    problems, counts = [], []
    for tl in (0, 5, None):
        m = build_model(desk_config(seed=6))
        apply_freeze(m, tl)
        frozen_units = [u for u in m.units if not u.trainable]
        frozen = {p.name for u in frozen_units for p in u.params()}
        frozen |= {n for u in frozen_units for n, _ in u.buffers()}
        before = {n: v.tobytes() for n, v in weights.model_entries(m) if n in frozen}
        fit(m, train, val, TrainConfig(trainable_layers=tl, epochs=3, batch_size=8,
                                       learning_rate=1e-3))
        after = dict(weights.model_entries(m))
        changed = [n for n in before if after[n].tobytes() != before[n]]
        if changed:
            problems.append(f"TL={tl}: {changed[:3]}")
        counts.append(trainable_scalars(m))
    m = build_model(desk_config())
    sweep = []
    for tl in range(len(m.units) + 1):
        apply_freeze(m, tl)
        sweep.append(trainable_scalars(m))
    monotone = sweep == sorted(sweep) and counts == sorted(counts)
    verdict(6, not problems and monotone,
            f"TL 0/5/all frozen tensors bit-identical after 3 epochs "
            f"({'ok' if not problems else '; '.join(problems)}); trainable scalars {counts}, "
            f"monotone over TL 0..{len(m.units)}: {monotone}")


# ---------------------------------------------------------------- 7

SCRATCH_CAP = 30


def _stop_at(threshold):
    return lambda rec: rec.val_acc < threshold


def _transfer_trial(seed):
    cfg = desk_config(seed=seed)
    a = resize_samples(gen_synthetic(300, 32, 1000 + seed, task="position"), 75)
    a_train, a_val = split_train_val(a, 1 / 3, seed)
    pre = build_model(cfg)
    fit(pre, a_train, a_val, TrainConfig(epochs=20, batch_size=8, learning_rate=1e-3, seed=seed))
    base = weights.checkpoint_from_model(pre)

    b = resize_samples(gen_synthetic(300, 32, 2000 + seed), 75)
    b_train, b_val = split_train_val(b, 1 / 3, seed)
    tcfg = TrainConfig(epochs=SCRATCH_CAP, batch_size=8, learning_rate=1e-3, seed=seed)
    _, ft = finetune(base, cfg, tcfg, b_train, b_val, on_epoch=_stop_at(0.9))
    sc = fit(build_model(cfg), b_train, b_val, tcfg, on_epoch=_stop_at(0.9))
    # a run that never reaches 0.90 counts as the cap (conservative for scratch)
    return (epochs_to_reach(ft, 0.9) or SCRATCH_CAP, epochs_to_reach(sc, 0.9) or SCRATCH_CAP)


@pytest.mark.slow
def test_c07_transfer_benefit():
    t0 = time.perf_counter()
    trials = [_transfer_trial(seed) for seed in range(5)]
    ft = statistics.median(t[0] for t in trials)
    sc = statistics.median(t[1] for t in trials)
    elapsed = time.perf_counter() - t0
    ok = ft <= 0.5 * sc and elapsed < 600
    verdict(7, ok, f"epochs to 0.90 val acc (fine-tune, scratch) per seed {trials}; "
                   f"median {ft} vs {sc}; {elapsed:.0f}s")


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_c08_desk_training_sanity():
    raw = gen_synthetic(2000, 32, 0)
    baseline = threshold_baseline_accuracy(raw)
    train, val = split_train_val(resize_samples(raw, 75), 0.2, 0)
    rec = fit(build_model(desk_config(seed=0)), train, val,
              TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, seed=0),
              on_epoch=_stop_at(0.95))
    reached = epochs_to_reach(rec, 0.95)
    ok = reached is not None and reached <= 15 and baseline < 0.75
    best = max(r.val_acc for r in rec.curve)
    verdict(8, ok, f"val acc >= 0.95 at epoch {reached} (best {best:.4f}); "
                   f"threshold baseline {baseline:.3f}")


# ---------------------------------------------------------------- 9

def test_c09_protocol_fidelity(tmp_path):
    cfg = tmp_path / "cv.json"
    cfg.write_text(json.dumps({"data.synthetic_n": 20, "data.synthetic_size": 16,
                               "train.epochs": 1, "train.batch_size": 8,
                               "train.runs": 10, "train.k": 5}))
    code = main(["crossval", "--desk", "--synthetic", "-q", "--config", str(cfg),
                 "--out", str(tmp_path / "cv")])
    rows = _rows(tmp_path / "cv" / "crossval.csv")
    records, agg = rows[:-1], rows[-1]
    worst = 0.0
    for name in ("acc", "rec", "spf", "tpr", "fpr", "f1", "auc", "loss"):
        vals = [float(r[name]) for r in records if r[name] != "undefined"]
        if vals:
            worst = max(worst, abs(math.fsum(vals) / len(vals) - float(agg[name])))
    folds_ok = sorted({(r["run"], r["fold"]) for r in records}) == sorted(
        {(str(r), str(f)) for r in range(10) for f in range(5)})
    n_cases = 0
    for samples, k, seed in random_partition_cases(100):
        check_partition(samples, stratified_kfold(samples, k, seed), k)
        n_cases += 1
    ok = (code == 0 and len(records) == 50 and folds_ok and agg["run"] == "mean"
          and worst <= 1e-12 and n_cases == 100)
    verdict(9, ok, f"{len(records)} fold records + 1 aggregate; max |recomputed mean - "
                   f"aggregate| {worst:.1e}; {n_cases} random stratified-partition cases ok")


# ---------------------------------------------------------------- 10

def _all_commands(work, out):
    cfg = work / "cfg.json"
    common = ["--desk", "--synthetic", "-q", "--config", str(cfg)]
    base = work / "base.irwt"
    return [
        ["train", *common, "--out", f"{out}/train"],
        ["finetune", *common, "--base", str(base), "--out", f"{out}/finetune"],
        ["crossval", *common, "--out", f"{out}/crossval"],
        ["sweep", *common, "--out", f"{out}/sweep"],
        ["evaluate", *common, "--checkpoint", str(base), "--out", f"{out}/evaluate"],
        ["confusion", *common, "--checkpoint", str(base), "--out", f"{out}/confusion"],
        ["export-curves", "--records", f"{out}/crossval", "--out", f"{out}/export/curves.csv"],
        ["weights", "convert-head", str(base), "--desk", "--num-classes", "3",
         "--out", f"{out}/head3.irwt"],
        ["shape-table", "--desk", "--out", f"{out}/shapes.txt"],
    ]


def test_c10_determinism(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({
        "data.synthetic_n": 20, "data.synthetic_size": 16, "train.epochs": 2,
        "train.batch_size": 8, "train.runs": 1, "train.k": 2,
        "sweep.learning_rates": [1e-3, 1e-4], "sweep.batch_sizes": [8]}))
    base = build_model(desk_config(seed=11))
    weights.save(base, tmp_path / "base.irwt")
    codes, trees = [], []
    for rep in ("a", "b"):
        codes += [main(argv) for argv in _all_commands(tmp_path, tmp_path / rep)]
        trees.append(_tree(tmp_path / rep))
    same = trees[0] == trees[1]
    diff = sorted(k for k in trees[0] if trees[0][k] != trees[1].get(k))

    ck = weights.load(tmp_path / "a" / "train" / "model.irwt")
    m = build_model(desk_config())
    weights.load_partial(m, ck, "strict")
    back = weights.checkpoint_from_model(m, ck.metadata)
    roundtrip = weights.encode(back) == (tmp_path / "a" / "train" / "model.irwt").read_bytes()
    ok = all(c == 0 for c in codes) and same and roundtrip and len(trees[0]) >= 20
    verdict(10, ok, f"{len(codes) // 2} commands rerun, {len(trees[0])} files byte-identical "
                    f"({'all' if same else 'differ: ' + ','.join(diff)}); checkpoint "
                    f"save/load round-trip {'bit-exact' if roundtrip else 'DIFFERS'}")


# ---------------------------------------------------------------- 11

def test_c11_sweep_completeness(tmp_path):
    cfg = tmp_path / "sweep.json"
    # default grid 3 LR x 4 BS x 1 TL; the 1e30 run below shows failure marking
    cfg.write_text(json.dumps({"data.synthetic_n": 20, "data.synthetic_size": 16,
                               "train.epochs": 1}))
    code = main(["sweep", "--desk", "--synthetic", "-q", "--config", str(cfg),
                 "--out", str(tmp_path / "grid")])
    rows = _rows(tmp_path / "grid" / "sweep.csv")
    cells = {(r["lr"], r["bs"], r["tl"]) for r in rows}

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data.synthetic_n": 20, "data.synthetic_size": 16,
                               "train.epochs": 2, "sweep.learning_rates": [1e30, 1e-3],
                               "sweep.batch_sizes": [8]}))
    main(["sweep", "--desk", "--synthetic", "-q", "--config", str(bad),
          "--out", str(tmp_path / "bad")])
    marked = _rows(tmp_path / "bad" / "sweep.csv")

    tie = [{"lr": 1e-3, "bs": 8, "tl": 10, "val_acc": 0.9, "status": "ok"},
           {"lr": 1e-4, "bs": 16, "tl": 10, "val_acc": 0.9, "status": "ok"},
           {"lr": 1e-4, "bs": 8, "tl": 30, "val_acc": 0.9, "status": "ok"},
           {"lr": 1e-4, "bs": 8, "tl": 20, "val_acc": 0.9, "status": "ok"},
           {"lr": 1e-5, "bs": 8, "tl": 10, "val_acc": 0.85, "status": "ok"},
           {"lr": 1e-5, "bs": 4, "tl": 10, "status": "diverged"}]
    best = best_cell(tie)
    ok = (code == 0 and len(rows) == 12 and len(cells) == 12 and all(r["status"] for r in rows)
          and len(marked) == 2 and marked[0]["status"] == "diverged" and marked[0]["val_acc"] == ""
          and best is tie[3])
    verdict(11, ok, f"{len(rows)} rows for 3x4x1 grid (statuses "
                    f"{sorted({r['status'] for r in rows})}); divergent cell marked "
                    f"'{marked[0]['status']}'; tie fixture best lr={best['lr']} bs={best['bs']} "
                    f"tl={best['tl']}")


# ---------------------------------------------------------------- 12

def _dataset_layout_manifest(path):
    """Fixture with the dataset's train/test sizes; per-class counts are not
    given for the split, so roughly three quarters are labelled PNEUMONIA."""
    rows = []
    for split, n in (("train", 4808), ("test", 1048)):
        n_normal = n // 4
        for i in range(n):
            label = "NORMAL" if i < n_normal else "PNEUMONIA"
            rows.append(ManifestRow(f"{split}/{label}/img-{i:05d}.pgm", label, split))
    write_manifest(DatasetManifest(rows, {"NORMAL": 0, "PNEUMONIA": 1}, path.parent), path)


def test_c12_manifest_fidelity(tmp_path):
    path = tmp_path / "manifest.csv"
    _dataset_layout_manifest(path)
    m = load_manifest(path)
    train, test = m.split("train"), m.split("test")
    counts = m.counts()
    ok = len(train) == 4808 and len(test) == 1048 and len(m.rows) == 5856
    verdict(12, ok, f"fixture manifest: {len(train)} train / {len(test)} test rows; "
                    f"per split/class {counts}")
