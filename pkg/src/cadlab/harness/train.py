"""Training schedule, backbone pretraining, dictionary construction and run artifacts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensorcore as tc
from ..bigraph import GrapeModel, build_graph
from ..mdm import ConfounderDictionary, build_dictionary, build_masked_corpus, random_dictionary
from .config import TrainConfig, parse_config
from .metrics import MetricsReport, evaluate_probs
from .model import CadModel

STREAMS = ("dropout", "perm", "backbone", "corpus", "kmeans", "bootstrap", "batch")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"{what} became NaN/inf at epoch {epoch}")
        self.epoch = epoch


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose so toggling one feature never shifts another's draws."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def _fill_missing_grads(store: tc.ParameterStore) -> None:
    # a minibatch may lack every edge of some modality; its encoder then sees no loss
    for _, t in store.trainable():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    if batch_size <= 0 or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def pretrain_backbone(samples, config: TrainConfig, rng: np.random.Generator) -> GrapeModel:
    """Baseline GNN trained with CE for ``backbone_epochs`` full-batch epochs."""
    model = GrapeModel(
        [len(v) for v in samples[0].x],
        max(2, max(s.y for s in samples) + 1),
        config.d,
        config.L,
        seed=int(rng.integers(2**31)),
        dropout=config.dropout,
    )
    graph = build_graph(samples)
    labels = np.array([s.y for s in samples])
    for epoch in range(1, config.backbone_epochs + 1):
        loss = model.loss(graph, labels, rng)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(epoch, "backbone loss")
        tc.backward(loss)
        tc.optimizer_step(model.store, config.lr)
    return model


def make_dictionary(samples, config: TrainConfig, streams) -> ConfounderDictionary:
    backbone = pretrain_backbone(samples, config, streams["backbone"])
    corpus = build_masked_corpus(
        samples, backbone, config.masking_mode, seed=int(streams["corpus"].integers(2**31))
    )
    K = min(config.K, len(corpus))
    dictionary = build_dictionary(
        corpus,
        K,
        seed=int(streams["kmeans"].integers(2**31)),
        pca_dim=config.pca_dim or None,
        provenance={"backbone_epochs": config.backbone_epochs, "masking_mode": config.masking_mode},
    )
    if config.dictionary_mode == "random":
        dictionary = random_dictionary(dictionary, seed=int(streams["kmeans"].integers(2**31)))
    return dictionary


@dataclass
class TrainResult:
    model: CadModel
    losses: list[dict]
    metrics: MetricsReport | None = None
    dictionary: ConfounderDictionary | None = None
    extras: dict = field(default_factory=dict)


def train(
    config: TrainConfig,
    train_samples,
    test_samples=None,
    out_dir=None,
    on_epoch: Callable[[int, CadModel], None] | None = None,
) -> TrainResult:
    """Warmup epochs optimise L_dis, the rest L_dis + alpha * L_cf; optionally evaluate and save."""
    streams = seed_streams(config.seed)
    dictionary = make_dictionary(train_samples, config, streams) if config.mdm else None
    feature_dims = [len(v) for v in train_samples[0].x]
    num_classes = max(2, max(s.y for s in train_samples) + 1)
    model = CadModel(feature_dims, num_classes, config, dictionary)
    labels = np.array([s.y for s in train_samples])
    full_graph = build_graph(train_samples)
    losses = []
    for epoch in range(1, config.epochs + 1):
        counterfactual = config.cbdm and epoch > config.warmup and config.alpha > 0
        rows = []
        for idx in _batches(len(train_samples), config.batch_size, streams["batch"]):
            graph = full_graph if len(idx) == len(train_samples) else build_graph([train_samples[i] for i in idx])
            perm = streams["perm"].permutation(len(idx)) if counterfactual else None
            step = model.loss(graph, labels[idx], streams["dropout"], perm)
            if not np.isfinite(step.total.item()):
                raise TrainingDiverged(epoch)
            tc.backward(step.total)
            _fill_missing_grads(model.store)
            tc.optimizer_step(model.store, config.lr)
            rows.append((step.total.item(), step.dis, step.cf))
        cf_vals = [r[2] for r in rows if r[2] is not None]
        losses.append(
            {
                "epoch": epoch,
                "phase": "warmup" if epoch <= config.warmup else "total",
                "loss_total": float(np.mean([r[0] for r in rows])),
                "loss_dis": float(np.mean([r[1] for r in rows])),
                "loss_cf": float(np.mean(cf_vals)) if cf_vals else "",
            }
        )
        if on_epoch is not None:
            on_epoch(epoch, model)
    result = TrainResult(model, losses, dictionary=dictionary)
    if test_samples is not None:
        result.metrics = evaluate(model, test_samples, config.bootstrap, int(streams["bootstrap"].integers(2**31)))
    if out_dir is not None:
        write_run(out_dir, config, result)
    return result


def evaluate(model, samples, B: int = 1000, seed: int = 0) -> MetricsReport:
    probs = model.predict_proba(build_graph(samples))
    return evaluate_probs(probs, [s.y for s in samples], B, seed)


# -- run directory -----------------------------------------------------------


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})


def read_csv(path) -> list[dict]:
    def parse(v: str):
        try:
            return int(v)
        except ValueError:
            pass
        try:
            return float(v)
        except ValueError:
            return v

    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_run(out_dir, config: TrainConfig, result: TrainResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.cfg")
    (out / "seed").write_text(f"{config.seed}\n")
    write_csv(out / "loss.csv", result.losses)
    if result.metrics is not None:
        write_csv(out / "metrics.csv", [result.metrics.as_row()])
    save_checkpoint(out / "checkpoint.npz", result.model)
    if result.dictionary is not None:
        result.dictionary.save(out / "dictionary.json")
    return out


def save_checkpoint(path, model: CadModel) -> None:
    meta = {
        "config": model.config.to_text(),
        "feature_dims": model.feature_dims,
        "num_classes": model.num_classes,
        "dictionary": None if model.dictionary is None else model.dictionary.to_dict(),
    }
    arrays = {f"param/{k}": t.data for k, t in model.store.items()}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> CadModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")}
    config = parse_config(meta["config"], env={})
    dictionary = None if meta["dictionary"] is None else ConfounderDictionary.from_dict(meta["dictionary"])
    model = CadModel(meta["feature_dims"], meta["num_classes"], config, dictionary)
    model.store.load(arrays)
    return model
