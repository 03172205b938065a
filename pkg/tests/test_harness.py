import math
import sys

import numpy as np
import pytest

from cadlab import tensorcore as tc
from cadlab.bigraph import GrapeModel, build_graph
from cadlab.harness.analysis import embedding_distance, nce_analysis, subgroup_eval
from cadlab.harness.config import ConfigError, TrainConfig, load_config, parse_config
from cadlab.harness.metrics import auc_roc
from cadlab.harness.model import CadModel
from cadlab.harness.train import (
    TrainingDiverged,
    load_checkpoint,
    read_csv,
    seed_streams,
    train,
    write_csv,
)
from cadlab.scmgen import DatasetSchema, MaskTemplate, MultimodalSample, apply_mnar, assign_group, generate_dataset

SMALL = dict(d=8, L=2, K=4, epochs=4, warmup=2, backbone_epochs=2, bootstrap=10, lr=1e-2)


@pytest.fixture(scope="module")
def data():
    schema = DatasetSchema.default(0, feature_dim=6)
    full = generate_dataset(schema, 160, seed=1)
    train_s = apply_mnar(full[:120], MaskTemplate.default(), 1.5, [1, 2, 3], seed=2)
    test_s = apply_mnar(full[120:], MaskTemplate.default(), 1.0, [1, 2, 3], seed=3)
    return train_s, test_s


# -- config ------------------------------------------------------------------


def test_config_parse_types_and_comments():
    cfg = parse_config("d = 16\nq=0.5  # comment\nmdm = false\nmasking_mode = multi\n", env={})
    assert (cfg.d, cfg.q, cfg.mdm, cfg.masking_mode) == (16, 0.5, False, "multi")
    assert cfg.dm == 16 and cfg.dn == 8


def test_config_defaults_follow_published_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.q, cfg.alpha, cfg.dropout, cfg.warmup, cfg.epochs, cfg.lr) == (0.7, 0.5, 0.1, 15, 100, 1e-3)


def test_config_round_trip_and_env_override(tmp_path):
    cfg = TrainConfig(d=12, alpha=0.3, cbdm=False, seed=4)
    cfg.save(tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg", env={}) == cfg
    assert load_config(tmp_path / "c.cfg", env={"CADLAB_SEED": "99"}).seed == 99


@pytest.mark.parametrize(
    "text", ["warmup = 20\nepochs = 10", "q = 0", "dropout = 1.0", "bogus = 1", "d = x", "mdm = maybe", "novalue"]
)
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


# -- NCE ---------------------------------------------------------------------


def _labelled(patterns_and_labels):
    return [
        MultimodalSample(i, [np.zeros(1)] * len(m), np.array(m, dtype=np.int8), y, 50.0, 3.0)
        for i, (m, y) in enumerate(patterns_and_labels)
    ]


def brute_nce(labels, C):
    n = len(labels)
    h = -sum((labels.count(k) / n) * math.log(labels.count(k) / n) for k in set(labels))
    return h / math.log(C)


def test_nce_examples():
    rep = nce_analysis(_labelled([([1, 0], 1)] * 4 + [([1, 1], 0), ([1, 1], 1)]))
    by = {p.pattern: p for p in rep.patterns}
    assert by[(1, 0)].nce == 0.0 and by[(1, 1)].nce == 1.0
    assert rep.total == 6 and sum(rep.buckets) == 6
    assert rep.buckets[0] == 4 and rep.buckets[-1] == 2


def test_nce_hand_case():
    labels = [1, 1, 0, 0, 0, 0]
    h = -(1 / 3) * math.log(1 / 3) - (2 / 3) * math.log(2 / 3)
    assert abs(h - 0.63651) < 1e-5
    rep = nce_analysis(_labelled([([0, 1], y) for y in labels]))
    assert abs(rep.patterns[0].nce - 0.91829) < 1e-5
    assert abs(rep.patterns[0].nce - brute_nce(labels, 2)) <= 1e-9


def test_nce_matches_brute_force_on_random_patterns():
    rng = np.random.default_rng(0)
    items = [(tuple(rng.integers(0, 2, 3)), int(rng.integers(0, 3))) for _ in range(300)]
    rep = nce_analysis(_labelled(items), num_classes=3)
    for p in rep.patterns:
        labels = [y for m, y in items if m == p.pattern]
        assert abs(p.nce - brute_nce(labels, 3)) <= 1e-9
        assert 0 <= p.nce <= 1
    assert rep.total == 300


# -- model and training ------------------------------------------------------


def test_ablation_identity_matches_baseline(data):
    train_s, _ = data
    cfg = TrainConfig(cbdm=False, mdm=False, **SMALL)
    result = train(cfg, train_s)
    # the same schedule on a stand-alone baseline
    base = GrapeModel([6] * 4, 2, cfg.d, cfg.L, cfg.seed, dropout=cfg.dropout)
    rng = seed_streams(cfg.seed)["dropout"]
    g, y = build_graph(train_s), np.array([s.y for s in train_s])
    for _ in range(cfg.epochs):
        tc.backward(base.loss(g, y, rng))
        tc.optimizer_step(base.store, cfg.lr)
    snap = result.model.store.snapshot()
    for k, v in base.store.snapshot().items():
        assert np.array_equal(v, snap[k])


def test_warmup_equal_total_never_evaluates_counterfactual(data):
    result = train(TrainConfig(**{**SMALL, "warmup": 4, "epochs": 4}), data[0])
    assert result.model.cf_evaluations == 0
    assert all(row["loss_cf"] == "" for row in result.losses)
    result = train(TrainConfig(**SMALL), data[0])
    assert result.model.cf_evaluations == 2


def test_counterfactual_has_no_effect_during_warmup(data):
    snaps = {}
    for alpha in (0.5, 0.0):
        cfg = TrainConfig(**{**SMALL, "alpha": alpha, "epochs": 3, "warmup": 2})
        record = {}
        train(cfg, data[0], on_epoch=lambda e, m: record.__setitem__(e, m.store.snapshot()))
        snaps[alpha] = record
    for k in snaps[0.5][2]:
        assert np.array_equal(snaps[0.5][2][k], snaps[0.0][2][k])
    assert any(not np.array_equal(snaps[0.5][3][k], snaps[0.0][3][k]) for k in snaps[0.5][3])


def test_determinism(data):
    cfg = TrainConfig(**SMALL)
    a = train(cfg, *data).metrics.as_row()
    b = train(cfg, *data).metrics.as_row()
    assert all(abs(a[k] - b[k]) <= 1e-12 for k in a)


def test_nan_aborts_with_epoch(data, monkeypatch):
    tr = sys.modules["cadlab.harness.train"]
    real = tr.tc.optimizer_step

    def poison(store, lr):
        real(store, lr)
        if store.step == 2:
            for _, t in store.trainable():
                t.data = t.data * np.nan

    monkeypatch.setattr(tr.tc, "optimizer_step", poison)
    with pytest.raises(TrainingDiverged) as exc:
        train(TrainConfig(**{**SMALL, "mdm": False}), data[0])
    assert exc.value.epoch == 3 and "epoch 3" in str(exc.value)


def test_minibatches_train(data):
    result = train(TrainConfig(**{**SMALL, "batch_size": 50, "mdm": False}), *data)
    assert 0 <= result.metrics.auc_roc <= 1


def test_run_directory_and_round_trips(data, tmp_path):
    cfg = TrainConfig(**SMALL)
    result = train(cfg, *data, out_dir=tmp_path / "run")
    run = tmp_path / "run"
    for name in ("config.cfg", "seed", "loss.csv", "metrics.csv", "checkpoint.npz", "dictionary.json"):
        assert (run / name).exists(), name
    assert load_config(run / "config.cfg", env={}) == cfg
    rows = read_csv(run / "loss.csv")
    for got, want in zip(rows, result.losses):
        assert abs(got["loss_total"] - want["loss_total"]) <= 1e-12
    metrics = read_csv(run / "metrics.csv")[0]
    for k, v in result.metrics.as_row().items():
        assert abs(metrics[k] - v) <= 1e-12
    model = load_checkpoint(run / "checkpoint.npz")
    g = build_graph(data[1])
    np.testing.assert_array_equal(model.predict_proba(g), result.model.predict_proba(g))


def test_csv_round_trip_exact(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": 1e-17, "name": "x"}]
    write_csv(tmp_path / "r.csv", rows)
    assert read_csv(tmp_path / "r.csv") == rows


def test_inference_ignores_bias_classifier(data):
    model = CadModel([6] * 4, 2, TrainConfig(**{**SMALL, "mdm": False}))
    g = build_graph(data[1])
    before = model.predict_proba(g)
    model.store["f_b.W"].data += 5.0
    assert np.array_equal(before, model.predict_proba(g))


def test_mdm_requires_dictionary():
    with pytest.raises(ValueError):
        CadModel([6] * 4, 2, TrainConfig(**SMALL))


# -- analyses ----------------------------------------------------------------


def test_subgroup_eval_definition(data):
    model = train(TrainConfig(**{**SMALL, "mdm": False}), data[0]).model
    test = data[0]
    report = subgroup_eval(model, test)
    probs = model.predict_proba(build_graph(test))[:, 1]
    for g, v in report.items():
        members = [i for i, s in enumerate(test) if assign_group(s) == g]
        ys = [test[i].y for i in members]
        if len(set(ys)) < 2:
            assert v is None
        else:
            # scored on the full graph, then restricted; modality nodes pool over every patient
            assert abs(v - auc_roc(probs[members], ys)) <= 1e-12


def test_subgroup_single_group_and_single_class():
    model = GrapeModel([1, 1], 2, d=4)
    young_low = _labelled([([1, 1], 0), ([1, 0], 1), ([0, 1], 0)])
    for s in young_low:
        s.age, s.severity = 30.0, 2.0
    report = subgroup_eval(model, young_low)
    assert list(report) == [1] and report[1] is not None
    report = subgroup_eval(model, [s for s in young_low if s.y == 0])
    assert report == {1: None}


def test_embedding_distance_properties(data):
    model = train(TrainConfig(**SMALL), data[0]).model
    assert embedding_distance(model, data[1], mask_rate=0.0) == 0.0
    d = embedding_distance(model, data[1], mask_rate=0.3, seed=1)
    assert d >= 0
    with pytest.raises(ValueError):
        embedding_distance(model, _labelled([([1, 0], 1)]))
