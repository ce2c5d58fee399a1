"""Command-line entry point: data generation, training, evaluation and experiment grids.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 missing data, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .baselines import ABLATION_VARIANTS, METHODS, RESULT_COLUMNS, CellResult, run_grid, seed_rows, summarize, train_method, write_results_csv, write_summary_csv
from .config import ConfigError, RunConfig, load_config
from .data import DataError, generate_benchmark, load_bundle, save_bundle
from .data.io import BundleFormatError
from .evaluation import alignment_probe, evaluate, export_latents
from .networks import init_model, load_checkpoint, save_checkpoint
from .trainer import NumericalError
from .weighting import write_weights_csv

log = logging.getLogger("bwuda")

DATA_ENV = "BWUDA_DATA_DIR"
DEFAULT_DATA_DIR = "bwuda-data"

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    data_digest: str
    tool_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def data_digest(data_dir) -> str:
    """sha256 over the manifest and every domain file, in a fixed order."""
    root = Path(data_dir)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- helpers


def _data_dir(args) -> Path:
    return Path(args.data or os.environ.get(DATA_ENV) or DEFAULT_DATA_DIR)


def _load_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None and not isinstance(args.seed, list):
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_data(data_dir: Path):
    if not (data_dir / "manifest.json").exists():
        raise CliError(f"no dataset at {data_dir} (run gen-data first or set {DATA_ENV})", EXIT_MISSING)
    return load_bundle(data_dir)


def _task(bundle, target: str):
    if bundle.target is not None:
        if bundle.target.domain_id != target:
            raise CliError(f"dataset target is {bundle.target.domain_id!r}, not {target!r}", EXIT_USAGE)
        return bundle
    if target not in bundle.domain_ids:
        raise CliError(f"unknown target domain {target!r}; available: {bundle.domain_ids}", EXIT_USAGE)
    return bundle.leave_out(target)


def _out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"{out} exists and is not empty (use --force to overwrite)", EXIT_IO)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_list(text: str, kind=str) -> list:
    return [kind(t) for t in text.split(",") if t.strip()]


def write_epoch_csv(logs, path) -> None:
    """Per-epoch losses. Wall time is deterministic-unsafe, so it goes to a separate file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "src_risk", "hdisc", "feat_disc", "val_criterion"])
        for e in logs:
            w.writerow([e.epoch, repr(e.src_risk), repr(e.hdisc), repr(e.feat_disc), repr(e.val_criterion)])


def write_timing_csv(logs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_time_s"])
        for e in logs:
            w.writerow([e.epoch, f"{e.wall_time:.4f}"])


def format_delta(value: float, plain: float) -> str:
    """Relative change vs plain regression, in the "(-13.29%)" style.

    The reference tables normalize by the compared method's own value,
    100 * (m - m_plain) / m, which is what reproduces their printed deltas.
    """
    if value == 0:
        return "(+0.00%)" if plain == 0 else "(n/a)"
    return f"({100.0 * (value - plain) / value:+.2f}%)"


TABLE_METRICS = (
    ("euclid3d_mean", "3D Euclidean Distance Error (Mean) (mm)"),
    ("euclid3d_median", "3D Euclidean Distance Error (Median) (mm)"),
    ("mape_vm", "Von Mises MAPE (%)"),
    ("rmse_vm", "Von Mises RMSE (MPa)"),
)


def comparison_table(summary: list[dict]) -> list[list[str]]:
    """Rows of the method-comparison table: seed-mean metrics with deltas vs ``plain``.

    The plain row carries its own (+0.00%) delta so every row has the same shape.
    """
    plain = next((s for s in summary if s["method"] == "plain"), None)
    rows = [["method"] + [label for _, label in TABLE_METRICS]]
    for s in summary:
        row = [s["method"]]
        for key, _ in TABLE_METRICS:
            v = s[f"{key}_mean"]
            cell = f"{v:.3f}"
            if plain is not None:
                cell += " " + format_delta(v, plain[f"{key}_mean"])
            row.append(cell)
        rows.append(row)
    return rows


def _write_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    gen = cfg.generator
    if args.seed is not None:
        gen.seed = args.seed
    try:
        gen.validate()
    except DataError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    out = Path(args.out or _data_dir(args))
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force to overwrite)", EXIT_IO)
    bundle = generate_benchmark(gen, workers=cfg.workers)
    save_bundle(bundle, out, overwrite=True)
    (out / "generator_config.json").write_text(json.dumps(gen.to_dict(), indent=2))
    for d in bundle.sources:
        print(f"{d.domain_id}\t{len(d)}")
    print(f"wrote {sum(len(d) for d in bundle.sources)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data_dir = _data_dir(args)
    task = _task(_load_data(data_dir), args.target)
    out = _out_dir(args.out, args.force)
    manifest = RunManifest(
        command="train",
        config=cfg.to_dict(),
        seeds=[cfg.train.seed],
        data_digest=data_digest(data_dir),
        started_at=_now(),
        extra={"method": args.method, "target": args.target, "sources": [d.domain_id for d in task.sources], "data_dir": str(data_dir)},
    )
    manifest.write(out / "run_manifest.json")
    model = init_model(cfg.feature_extractor, cfg.head, cfg.train.seed)
    res = train_method(args.method, task, model, cfg.train)
    save_checkpoint(res.model, out / "checkpoint", {"method": args.method, "target": args.target, "best_epoch": res.best_epoch, "stopped_epoch": res.stopped_epoch})
    write_epoch_csv(res.logs, out / "epochs.csv")
    write_timing_csv(res.logs, out / "timings.csv")
    outputs = {"checkpoint": "checkpoint", "epochs": "epochs.csv", "timings": "timings.csv"}
    if res.geo_weights is not None and res.eng_weights is not None:
        write_weights_csv(out / "weights.csv", res.source_domain_ids, res.source_indices, res.geo_weights.values, res.eng_weights.values, res.final_weights.values)
        outputs["weights"] = "weights.csv"
    manifest.outputs = outputs
    manifest.finished_at = _now()
    manifest.extra.update(best_epoch=res.best_epoch, stopped_epoch=res.stopped_epoch)
    # the manifest is rewritten once, with outputs filled in, after training completes
    manifest.write(out / "run_manifest.json")
    print(f"{args.method} on target {args.target}: stopped at epoch {res.stopped_epoch}, best {res.best_epoch}")
    return EXIT_OK


def _load_model(path):
    p = Path(path)
    if p.is_dir() and not (p / "spec.json").exists() and (p / "checkpoint" / "spec.json").exists():
        p = p / "checkpoint"
    if not (p / "spec.json").exists():
        raise CliError(f"no checkpoint at {path}", EXIT_MISSING)
    return load_checkpoint(p)


def cmd_eval(args) -> int:
    model, extra = _load_model(args.checkpoint)
    target = args.target or extra.get("target")
    if target is None:
        raise CliError("--target is required", EXIT_USAGE)
    task = _task(_load_data(_data_dir(args)), target)
    if not task.has_target_labels:
        raise CliError(f"target {target!r} has no evaluation labels", EXIT_MISSING)
    report = evaluate(model, task.target.voxels, task.target.masses, task.target_eval_labels)
    out = Path(args.out) if args.out else Path(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv", label=target)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _grid(args, default_methods, kind: str) -> int:
    cfg = load_config(args.config)
    data_dir = _data_dir(args)
    bundle = _load_data(data_dir)
    if bundle.target is not None:
        raise CliError("grids need a dataset without a fixed target (leave-one-domain-out)", EXIT_USAGE)
    methods = _parse_list(args.method) if args.method else list(default_methods)
    for m in methods:
        if m not in METHODS:
            raise CliError(f"unknown method {m!r}; choose from {list(METHODS)}", EXIT_USAGE)
    seeds = args.seed if args.seed else [0, 1, 2, 3, 4]
    targets = _parse_list(args.target) if args.target else bundle.domain_ids
    for t in targets:
        if t not in bundle.domain_ids:
            raise CliError(f"unknown target domain {t!r}; available: {bundle.domain_ids}", EXIT_USAGE)
    out = _out_dir(args.out, args.force)
    manifest = RunManifest(
        command=kind,
        config=cfg.to_dict(),
        seeds=list(seeds),
        data_digest=data_digest(data_dir),
        started_at=_now(),
        extra={"methods": methods, "targets": targets, "data_dir": str(data_dir)},
    )
    manifest.write(out / "run_manifest.json")

    cells_path = out / "cells.csv"
    with open(cells_path, "w", newline="") as fh:
        csv.writer(fh).writerow(["method", "target", "seed"] + list(RESULT_COLUMNS[2:]))

    def flush(cell: CellResult) -> None:
        r = cell.row()
        with open(cells_path, "a", newline="") as fh:
            csv.writer(fh).writerow([r["method"], r["target"], r["seed"]] + [repr(r[c]) for c in RESULT_COLUMNS[2:]])
        print(f"{cell.method}\t{cell.target}\tseed {cell.seed}\tMAPE {r['mape_vm']:.3f}\teuclid3d {r['euclid3d_mean']:.2f}", flush=True)

    t0 = time.perf_counter()
    cells = run_grid(bundle, methods, targets, seeds, cfg.train, cfg.feature_extractor, cfg.head, workers=args.workers or cfg.workers, on_cell=flush)
    rows = seed_rows(cells)
    summary = summarize(rows)
    write_results_csv(rows, out / "results.csv")
    write_summary_csv(summary, out / "summary.csv")
    outputs = {"cells": "cells.csv", "results": "results.csv", "summary": "summary.csv"}
    if kind == "compare":
        _write_rows(comparison_table(summary), out / "comparison.csv")
        outputs["comparison"] = "comparison.csv"
    manifest.outputs = outputs
    manifest.finished_at = _now()
    manifest.extra["elapsed_s"] = round(time.perf_counter() - t0, 1)
    manifest.extra["cell_count"] = len(cells)
    manifest.write(out / "run_manifest.json")
    for s in summary:
        print(f"{s['method']}\tMAPE {s['mape_vm_mean']:.3f} +/- {s['mape_vm_std']:.3f}\teuclid3d {s['euclid3d_mean_mean']:.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    return _grid(args, ("plain", "dann", "ahd_msda", "proposed_both"), "compare")


def cmd_ablate(args) -> int:
    return _grid(args, ABLATION_VARIANTS, "ablate")


def cmd_export_latents(args) -> int:
    model, extra = _load_model(args.checkpoint)
    cfg = load_config(args.config)
    target = args.target or extra.get("target")
    if target is None:
        raise CliError("--target is required", EXIT_USAGE)
    task = _task(_load_data(_data_dir(args)), target)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists (use --force to overwrite)", EXIT_IO)
    out.parent.mkdir(parents=True, exist_ok=True)
    emb = cfg.train.embedding() if args.seed is None else cfg.with_seed(args.seed).train.embedding()
    export_latents(model, task, emb, out, plot_path=args.plot, with_target_labels=task.has_target_labels)
    print(f"alignment probe accuracy: {alignment_probe(model, task, seed=emb.seed):.3f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bwuda", description="Bi-weighted domain adaptation for 3D voxel regression.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_list=False):
        sp.add_argument("--config", help="JSON config file (defaults used for anything missing)")
        sp.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV} or ./{DEFAULT_DATA_DIR})")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output location")
        if seed_list:
            sp.add_argument("--seed", type=lambda s: _parse_list(s, int), help="comma-separated seeds (default 0,1,2,3,4)")
        else:
            sp.add_argument("--seed", type=int, help="root seed override")

    sp = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    common(sp)
    sp.add_argument("--out", help="output directory (default: the data directory)")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one method with one held-out target domain")
    common(sp)
    sp.add_argument("--target", required=True)
    sp.add_argument("--method", required=True, choices=METHODS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on its target domain")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    for name, func, doc in (("compare", cmd_compare, "method comparison grid"), ("ablate", cmd_ablate, "weighting ablation grid")):
        sp = sub.add_parser(name, help=doc)
        common(sp, seed_list=True)
        sp.add_argument("--method", help="comma-separated method ids")
        sp.add_argument("--target", help="comma-separated target domains (default: all)")
        sp.add_argument("--workers", type=int, help="parallel processes")
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("export-latents", help="2D embedding of the latent codes as CSV (+ PNG)")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", help="optional PNG path")
    sp.set_defaults(func=cmd_export_latents)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BundleFormatError, FileExistsError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
