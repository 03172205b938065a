"""Acceptance criteria 1-10. Each test prints one ``criterion N: PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -s`` (the lines are repeated in the
terminal summary either way).
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from cadlab import tensorcore as tc
from cadlab.bigraph import GrapeModel, build_graph
from cadlab.cbdm import disentangle_loss, gce_loss
from cadlab.harness.analysis import embedding_distance, nce_analysis
from cadlab.harness.benchmark import BenchmarkSpec, make_benchmark
from cadlab.harness.config import TrainConfig
from cadlab.harness.metrics import auc_roc
from cadlab.harness.sweep import grid_cells, run_cells
from cadlab.harness.train import read_csv, train
from cadlab.mdm import ConfounderDictionary, attention_weights, build_dictionary, init_nwgm, kmeanspp_cluster, nwgm_adjust
from cadlab.scmgen import (
    DatasetSchema,
    MaskTemplate,
    MultimodalSample,
    apply_mcar,
    apply_mnar,
    expected_mnar_rate,
    generate_dataset,
    missing_fraction,
    write_dataset,
)
from cadlab.tensorcore import ParameterStore, Tensor
from gradcheck import check_params

SEEDS = range(5)


# -- 1: gradients ---------------------------------------------------------------


def _op_cases(rng):
    """One scalar loss per op in the registry, each contracted with a random probe."""
    leaf = lambda *s, lo=-1.0, hi=1.0: Tensor(rng.uniform(lo, hi, size=s), requires_grad=True)
    a, b, w, row, pos = leaf(3, 4), leaf(3, 4), leaf(4, 2), leaf(1, 4), leaf(3, 4, lo=0.05, hi=1.0)
    idx, seg = np.array([0, 2, 2, 1]), np.array([1, 0, 1, 1])
    probe = rng.normal(size=(3, 4))
    unary = lambda f, x: (lambda: tc.tsum(tc.mul(f(x), np.cos(np.arange(f(x).data.size).reshape(f(x).shape)))), [x])
    return {
        "add": (lambda: tc.tsum(tc.mul(tc.add(a, row), probe)), [a, row]),
        "sub": (lambda: tc.tsum(tc.mul(tc.sub(a, b), probe)), [a, b]),
        "mul": (lambda: tc.tsum(tc.mul(a, b)), [a, b]),
        "scale": unary(lambda x: tc.scale(x, -1.7), a),
        "matmul": (lambda: tc.tsum(tc.mul(tc.matmul(a, w), np.ones((3, 2)) * [1, -2])), [a, w]),
        "transpose": unary(tc.transpose, a),
        "concat": unary(lambda x: tc.concat([x, tc.scale(x, 2.0)]), a),
        "segment_mean": unary(lambda x: tc.segment_mean(tc.gather(x, idx), seg, 3), a),
        "gather": unary(lambda x: tc.gather(x, idx), a),
        "sum": (lambda: tc.tsum(tc.mul(a, a)), [a]),
        "mean": (lambda: tc.mean(tc.mul(a, b)), [a, b]),
        "relu": unary(tc.relu, a),
        "sigmoid": unary(tc.sigmoid, a),
        "softmax": unary(tc.softmax, a),
        "log": unary(tc.log, pos),
        "power": unary(lambda x: tc.power(x, 0.7), pos),
    }


def _dual_model_loss():
    from cadlab.harness.model import CadModel

    samples = _toy([[1, 1], [1, 0], [0, 1]])
    g = build_graph(samples)
    rng = np.random.default_rng(0)
    D = build_dictionary(rng.normal(size=(12, 8)), 3, seed=0)
    model = CadModel([3, 3], 2, TrainConfig(d=8, L=2, dropout=0.0), D)
    y, perm = np.array([0, 1, 1]), np.array([2, 0, 1])
    return (lambda: model.loss(g, y, perm=perm).total), [t for _, t in model.store.trainable()]


def _toy(masks, F=3, seed=0):
    rng = np.random.default_rng(seed)
    return [
        MultimodalSample(i, [rng.normal(size=F) for _ in masks[0]], np.array(m, dtype=np.int8), i % 2, 50.0, 3.0)
        for i, m in enumerate(masks)
    ]


def test_criterion_01_gradients(criterion, monkeypatch):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cases = _op_cases(rng)
    missing = set(tc.OPS) - set(cases) - {"stop_gradient"}
    errors = {name: check_params(f, ts) for name, (f, ts) in cases.items()}
    base = GrapeModel([3, 3], 2, d=8, num_layers=2, seed=0)
    g = build_graph(_toy([[1, 1], [1, 0], [0, 1]]))
    errors["grape stack"] = check_params(lambda: base.loss(g, np.array([0, 1, 1])), [t for _, t in base.store.trainable()])
    # finite differences cannot see a gradient barrier, so the full model is checked with it made transparent
    monkeypatch.setattr(tc, "stop_gradient", lambda x: tc.scale(x, 1.0))
    f, ts = _dual_model_loss()
    errors["dual+mdm stack"] = check_params(f, ts)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = not missing and errors[worst] <= 1e-4 and elapsed < 30
    assert criterion(ok, f"{len(errors)} checks, worst {worst} {errors[worst]:.2e}, {elapsed:.1f}s, uncovered {sorted(missing)}")


# -- 2: routing -------------------------------------------------------------------


def test_criterion_02_routing(criterion):
    from cadlab.harness.model import CadModel

    samples = _toy([[1, 1], [1, 0], [0, 1], [1, 1], [1, 1]])
    g, y = build_graph(samples), np.array([s.y for s in samples])
    D = build_dictionary(np.random.default_rng(1).normal(size=(10, 8)), 2, seed=0)
    norms = {}
    for separate in (False, True):
        model = CadModel([3, 3], 2, TrainConfig(d=8, L=2, separate_gates=separate), D)
        for term, silent in (("ce", "gnn_b."), ("gce", "gnn_c.")):
            for _, t in model.store.items():
                t.grad = None
            Z_c, Z_b = model.branches(g)
            tc.backward(getattr(disentangle_loss(Z_c, Z_b, y, model.store, 0.7), term))
            live = "gnn_c." if silent == "gnn_b." else "gnn_b."
            total = lambda p: sum(float(np.linalg.norm(t.grad)) for k, t in model.store.items() if k.startswith(p) and t.grad is not None)
            norms[(separate, term)] = (total(silent), total(live))
    ok = all(s == 0.0 and l > 0.0 for s, l in norms.values())
    assert criterion(ok, "silent-branch grad norms " + ", ".join(f"{k[1]}{'/sep' if k[0] else ''}={v[0]}" for k, v in norms.items()))


# -- 3: GCE -----------------------------------------------------------------------


def test_criterion_03_gce(criterion):
    p = np.random.default_rng(0).dirichlet([1, 1, 1], size=8)
    y = np.arange(8) % 3
    q1 = gce_loss(Tensor(p), y, 1.0).item() == float(np.mean(1 - p[np.arange(8), y]))
    half = gce_loss(Tensor([[0.5, 0.5]]), [0], 0.7).item()
    derived = (1 - 0.5**0.7) / 0.7
    one = gce_loss(Tensor([[0.0, 1.0]]), [1], 0.7).item() == 0.0
    ok = q1 and abs(half - 0.54918) <= 1e-5 and abs(half - derived) <= 1e-15 and one
    assert criterion(ok, f"q=1 exact {q1}, q=0.7/p=0.5 -> {half:.6f}, p=1 -> 0 {one}")


# -- 4: MDM -----------------------------------------------------------------------


def _two_means_brute_force(points):
    best = None
    for labels in itertools.product((0, 1), repeat=len(points)):
        lab = np.array(labels)
        if len(set(labels)) < 2:
            continue
        sse = sum(((points[lab == k] - points[lab == k].mean()) ** 2).sum() for k in (0, 1))
        if best is None or sse < best[0]:
            best = (sse, sorted(points[lab == k].mean() for k in (0, 1)))
    return best[1]


def test_criterion_04_mdm(criterion):
    rng = np.random.default_rng(0)
    lam_err = prior_err = 0.0
    monotone = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        X = np.vstack([r.normal(loc=c, size=(30, 6)) for c in r.normal(scale=3, size=4)])
        D = build_dictionary(X, 1 + seed % 7, seed=seed, pca_dim=3)
        prior_err = max(prior_err, abs(D.priors.sum() - 1))
        monotone &= all(b <= a + 1e-9 for a, b in zip(D.inertia_history, D.inertia_history[1:]))
        lam = attention_weights(Tensor(r.normal(size=(7, 6))), D, Tensor(r.normal(size=(3, 6))), Tensor(r.normal(size=(3, 6)))).data
        lam_err = max(lam_err, float(np.abs(lam.sum(1) - 1).max()))
    pts = np.array([0.0, 1.0, 9.0, 10.0])
    oracle = _two_means_brute_force(pts)
    recovered = all(sorted(kmeanspp_cluster(pts[:, None], 2, s).prototypes[:, 0].tolist()) == oracle for s in range(10))
    store = ParameterStore()
    init_nwgm(store, 5, 4, 3, rng)
    z1 = rng.normal(size=(1, 5))
    single = ConfounderDictionary(z1, np.array([9.0]), np.zeros(5), np.eye(5))
    Z = rng.normal(size=(6, 5))
    closed = Z @ store["mdm.W_h"].data.T + store["mdm.W_g"].data @ z1[0]
    collapse = float(np.abs(nwgm_adjust(Tensor(Z), single, store).data - closed).max())
    ok = lam_err <= 1e-9 and prior_err <= 1e-9 and monotone and oracle == [0.5, 9.5] and recovered and collapse <= 1e-12
    assert criterion(ok, f"lambda {lam_err:.1e}, priors {prior_err:.1e}, monotone {monotone}, "
                         f"1-D prototypes {[float(v) for v in oracle]} recovered {recovered}, K=1 collapse {collapse:.1e}")


# -- 5: missingness ----------------------------------------------------------------


def _brute_nce(labels, C):
    n = len(labels)
    return -sum(labels.count(k) / n * math.log(labels.count(k) / n) for k in set(labels)) / math.log(C)


def test_criterion_05_missingness(criterion):
    data = generate_dataset(DatasetSchema.default(0), 2000, seed=0)
    trials = 2000 * 4
    sigma = lambda p: 3 * math.sqrt(p * (1 - p) / trials)
    mcar = missing_fraction(apply_mcar(data, 0.3, seed=1))
    t = MaskTemplate.default()
    expected = expected_mnar_rate(data, t, 1.5, [0, 1, 2, 3])
    mnar = missing_fraction(apply_mnar(data, t, 1.5, [0, 1, 2, 3], seed=2))
    clamp = t.probs[0, 3] == 0.35 and t.final_probs(4.0)[0, 3] == 1.0
    rng = np.random.default_rng(3)
    items = [(tuple(rng.integers(0, 2, 3)), int(rng.integers(0, 2))) for _ in range(400)]
    items += [((1, 0, 1), y) for y in [1, 1, 0, 0, 0, 0]] + [((0, 0, 1), 1)] * 5
    samples = [MultimodalSample(i, [np.zeros(1)] * 3, np.array(m, dtype=np.int8), y, 50.0, 3.0) for i, (m, y) in enumerate(items)]
    report = nce_analysis(samples, num_classes=2)
    nce_err = max(abs(p.nce - _brute_nce([y for m, y in items if m == p.pattern], 2)) for p in report.patterns)
    hand = _brute_nce([1, 1, 0, 0, 0, 0], 2)
    ok = abs(mcar - 0.3) <= sigma(0.3) and abs(mnar - expected) <= sigma(expected) and clamp and nce_err <= 1e-9 and abs(hand - 0.91829) < 1e-5
    assert criterion(ok, f"MCAR {mcar:.4f} vs 0.3, MNAR {mnar:.4f} vs {expected:.4f} (3 sigma), clamp {clamp}, "
                         f"NCE max err {nce_err:.1e}, hand case {hand:.5f}")


# -- 6: metrics --------------------------------------------------------------------


def test_criterion_06_metrics(criterion):
    rng = np.random.default_rng(0)
    mismatches = 0
    for trial in range(300):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 1 + trial % 12, size=n) / 7 if trial % 2 else rng.random(n)
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else 0 for p in pos for q in neg)
        mismatches += auc_roc(scores, labels) != float(wins / (len(pos) * len(neg)))
    hand = auc_roc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
    assert criterion(mismatches == 0 and hand == 0.75, f"300 random sets, {mismatches} inexact; hand case {hand}")


# -- 7 and 8: the synthetic debiasing benchmark -----------------------------------


@pytest.fixture(scope="module")
def benchmark_runs():
    start = time.perf_counter()
    rows = []
    for seed in SEEDS:
        b = make_benchmark(seed, BenchmarkSpec())
        row = {"seed": seed, "train_missing": b.train_missing, "test_missing": missing_fraction(b.test, b.maskable)}
        for name, flags in (("baseline", {"cbdm": False, "mdm": False}), ("cad", {})):
            result = train(TrainConfig(seed=seed, **flags), b.train, b.test)
            row[name] = result.metrics.as_row()
            row[name + "_dist"] = embedding_distance(result.model, b.test, mask_rate=0.3, seed=seed)
        rows.append(row)
    return rows, time.perf_counter() - start


def test_criterion_07_directional_debiasing(criterion, benchmark_runs):
    rows, elapsed = benchmark_runs
    base = np.mean([r["baseline"]["auc_roc"] for r in rows])
    cad = np.mean([r["cad"]["auc_roc"] for r in rows])
    miss = np.mean([r["train_missing"] for r in rows])
    test_miss = np.mean([r["test_missing"] for r in rows])
    per_seed = " ".join(f"{r['cad']['auc_roc'] - r['baseline']['auc_roc']:+.3f}" for r in rows)
    ok = cad >= base + 0.02 and elapsed < 15 * 60
    assert criterion(ok, f"AUC baseline {base:.4f}, CaD {cad:.4f}, margin {cad - base:+.4f} (per seed {per_seed}); "
                         f"train missing {miss:.3f}, test missing {test_miss:.3f}; {elapsed:.0f}s")


def test_criterion_08_embedding_robustness(criterion, benchmark_runs):
    rows, _ = benchmark_runs
    base = np.mean([r["baseline_dist"] for r in rows])
    cad = np.mean([r["cad_dist"] for r in rows])
    assert criterion(cad <= base, f"mean full-vs-masked distance: CaD {cad:.4f}, baseline {base:.4f}")


# -- 9: determinism ----------------------------------------------------------------


def test_criterion_09_determinism(criterion, benchmark_runs, tmp_path):
    rows, _ = benchmark_runs
    b = make_benchmark(0, BenchmarkSpec())
    again = train(TrainConfig(seed=0), b.train, b.test).metrics.as_row()
    drift = max(abs(again[k] - rows[0]["cad"][k]) for k in again)
    files = []
    for name in ("a", "b"):
        full = generate_dataset(DatasetSchema.default(3), 300, seed=4)
        write_dataset(apply_mnar(full, MaskTemplate.default(), 1.0, [1, 2, 3], seed=5), tmp_path / f"{name}.tsv")
        files.append((tmp_path / f"{name}.tsv").read_bytes())
    same = files[0] == files[1]
    assert criterion(drift <= 1e-12 and same, f"metric drift {drift:.1e} across two runs, dataset files identical {same}")


# -- 10: ablations and sweeps ------------------------------------------------------


def test_criterion_10_ablation_reachability(criterion, tmp_path):
    spec = BenchmarkSpec(n_train=400, n_test=150, feature_dim=8)
    b = make_benchmark(0, spec)
    base = TrainConfig(d=8, epochs=4, warmup=2, backbone_epochs=2, bootstrap=20, lr=1e-2)
    counts = {}
    for kind, values in (("ablation", ["A1", "A4", "A5", "A6"]), ("alpha", None), ("K", None)):
        out = tmp_path / f"{kind}.csv"
        cells = grid_cells(kind, base, values)
        run_cells(cells, b.train, b.test, out_csv=out)
        got = read_csv(out)
        counts[kind] = [r["value"] for r in got]
    want = {"ablation": ["A1", "A4", "A5", "A6"], "alpha": [0.1, 0.3, 0.5, 0.7], "K": [16, 32, 64, 128]}
    assert criterion(counts == want, f"rows {counts}")
