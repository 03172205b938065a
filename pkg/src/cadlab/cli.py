"""Command-line entry point: generate, mask, train, evaluate, analyze, sweep."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .harness import analysis
from .harness.config import load_config
from .harness.sweep import grid_cells, rate_cells, run_cells
from .harness.train import evaluate, load_checkpoint, train, write_csv
from .scmgen import (
    DatasetSchema,
    MaskTemplate,
    alpha_for_rate,
    apply_mcar,
    apply_mnar,
    generate_dataset,
    read_dataset,
    write_dataset,
)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _template(path) -> MaskTemplate:
    return MaskTemplate.load(path) if path else MaskTemplate.default()


def _emit(rows: list[dict], out) -> None:
    if out:
        write_csv(out, rows)
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_generate(a) -> None:
    schema = DatasetSchema.load(a.schema) if a.schema else DatasetSchema.default(
        a.seed, num_modalities=a.modalities, feature_dim=a.feature_dim
    )
    if a.schema_out:
        schema.save(a.schema_out)
    write_dataset(generate_dataset(schema, a.n, a.seed), a.out)


def cmd_mask(a) -> None:
    samples = read_dataset(a.data)
    if a.mechanism == "mcar":
        masked = apply_mcar(samples, a.rate, a.seed)
    else:
        maskable = _ints(a.maskable) if a.maskable else list(range(samples[0].num_modalities))
        template = _template(a.template)
        alpha = a.alpha if a.rate is None else alpha_for_rate(samples, template, a.rate, maskable)
        masked = apply_mnar(samples, template, alpha, maskable, a.seed)
    write_dataset(masked, a.out)


def _config(a):
    cfg = load_config(a.config)
    return cfg if a.seed is None else cfg.with_overrides(seed=a.seed)


def cmd_train(a) -> None:
    cfg = _config(a)
    test = read_dataset(a.test) if a.test else None
    result = train(cfg, read_dataset(a.data), test, out_dir=a.out)
    if result.metrics is not None:
        print(f"auc_roc={result.metrics.auc_roc:.6f} auc_prc={result.metrics.auc_prc:.6f}")


def cmd_evaluate(a) -> None:
    model = load_checkpoint(a.checkpoint)
    report = evaluate(model, read_dataset(a.data), a.bootstrap, a.seed or 0)
    _emit([report.as_row()], a.out)


def cmd_analyze(a) -> None:
    samples = read_dataset(a.data)
    if a.what == "nce":
        report = analysis.nce_analysis(samples)
        rows = [
            {
                "pattern": "".join(map(str, p.pattern)),
                "count": p.count,
                "histogram": " ".join(map(str, p.histogram)),
                "nce": p.nce,
            }
            for p in report.patterns
        ]
        _emit(rows, a.out)
        return
    if not a.checkpoint:
        raise ValueError(f"analyze {a.what} needs --checkpoint")
    model = load_checkpoint(a.checkpoint)
    if a.what == "subgroup":
        groups = analysis.subgroup_eval(model, samples)
        _emit([{"group": g, "auc_roc": "undefined" if v is None else v} for g, v in groups.items()], a.out)
    else:
        dist = analysis.embedding_distance(model, samples, a.rate, a.seed or 0)
        _emit([{"mask_rate": a.rate, "distance": dist}], a.out)


def cmd_sweep(a) -> None:
    cfg = _config(a)
    if a.kind == "missing_rate":
        full_train, full_test = read_dataset(a.data), read_dataset(a.test)
        maskable = _ints(a.maskable) if a.maskable else list(range(full_train[0].num_modalities))
        template = _template(a.template)

        def make(rate):
            alpha = alpha_for_rate(full_train, template, rate, maskable)
            return (
                apply_mnar(full_train, template, alpha, maskable, cfg.seed),
                apply_mnar(full_test, template, alpha, maskable, cfg.seed + 1),
            )

        cells = rate_cells(cfg, make, _floats(a.values) if a.values else None)
        rows = run_cells(cells, out_csv=a.out, run_root=a.runs)
    else:
        values = None
        if a.values:
            values = a.values.split(",") if a.kind == "ablation" else (
                _ints(a.values) if a.kind == "K" else _floats(a.values)
            )
        cells = grid_cells(a.kind, cfg, values)
        rows = run_cells(cells, read_dataset(a.data), read_dataset(a.test), out_csv=a.out, run_root=a.runs)
    print(f"{len(rows)} rows written to {a.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--schema", help="schema JSON to sample from (default: drawn from --seed)")
    g.add_argument("--schema-out", help="also write the schema used")
    g.add_argument("--modalities", type=int, default=4)
    g.add_argument("--feature-dim", type=int, default=16)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("mask", help="apply MCAR or MNAR masking")
    m.add_argument("mechanism", choices=("mcar", "mnar"))
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--rate", type=float, help="MCAR rate, or target MNAR rate (solves for alpha)")
    m.add_argument("--alpha", type=float, default=1.0)
    m.add_argument("--template")
    m.add_argument("--maskable", help="comma-separated modality indices (default: all)")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--test")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bootstrap", type=int, default=1000)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    an = sub.add_parser("analyze", help="nce | subgroup | embed-dist")
    an.add_argument("what", choices=("nce", "subgroup", "embed-dist"))
    an.add_argument("--data", required=True)
    an.add_argument("--checkpoint")
    an.add_argument("--rate", type=float, default=0.3)
    an.add_argument("--seed", type=int)
    an.add_argument("--out")
    an.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="K, alpha, missing-rate or ablation grid")
    s.add_argument("kind", choices=("K", "alpha", "missing_rate", "ablation"))
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--values", help="comma-separated grid (default: the standard grid)")
    s.add_argument("--runs", help="directory for per-cell run artifacts")
    s.add_argument("--template")
    s.add_argument("--maskable")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        msg = exc.strerror + f": {exc.filename}" if isinstance(exc, OSError) and exc.filename else str(exc)
        print(f"cadlab {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
