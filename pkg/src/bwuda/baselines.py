"""Comparison methods (plain regression, DANN, AHD-MSDA-lite) and the ablation runner."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import sealing
from .data.types import DatasetBundle
from .evaluation import MetricsReport, evaluate
from .losses import weighted_mse
from .networks import AdaptationModel, FeatureExtractorSpec, HeadSpec, init_model, predict
from .seeding import rng, stream_seed
from .trainer import (
    EpochLog,
    NumericalError,
    PreparedData,
    TrainConfig,
    TrainedResult,
    _check,
    fit,
    prepare,
    run_early_stopping,
)
from .weighting import CombinedWeights

METHODS = (
    "plain",
    "dann",
    "ahd_msda",
    "proposed_no_weights",
    "proposed_geo_only",
    "proposed_eng_only",
    "proposed_both",
)
ABLATION_VARIANTS = ("proposed_no_weights", "proposed_geo_only", "proposed_eng_only", "proposed_both")
_WEIGHTING = {
    "proposed_no_weights": "none",
    "proposed_geo_only": "geo",
    "proposed_eng_only": "eng",
    "proposed_both": "both",
    "ahd_msda": "domain",
}

RESULT_COLUMNS = (
    "method",
    "seed",
    "euclid3d_mean",
    "euclid3d_median",
    "mape_vm",
    "rmse_vm",
    "x_mean",
    "x_median",
    "y_mean",
    "y_median",
    "z_mean",
    "z_median",
)


@dataclass
class _SupervisedState:
    """Minimal state for the single-optimizer baselines, shaped for ``run_early_stopping``."""

    model: AdaptationModel
    data: PreparedData
    config: TrainConfig
    opt: torch.optim.Optimizer
    batch_rng: np.random.Generator
    params: list
    epoch: int = 0
    step: int = 0
    total_steps: int = 1
    logs: list[EpochLog] = field(default_factory=list)
    w_eng: object = None
    omega: object = None
    classifier: nn.Module | None = None
    tgt_rng: np.random.Generator | None = None
    domain_accuracy: list[float] = field(default_factory=list)


@torch.no_grad()
def _val_risk(model: AdaptationModel, data: PreparedData, batch_size: int = 256) -> float:
    was = model.training
    model.eval()
    try:
        vi = data.val_idx
        z = torch.cat([model.theta(data.src_vox[vi[s : s + batch_size]]) for s in range(0, len(vi), batch_size)])
        return float(weighted_mse(data.src_y[vi], predict(model.h, z, data.src_mass[vi])))
    finally:
        model.train(was)


def _ones(n: int) -> CombinedWeights:
    return CombinedWeights(np.ones(n), 0.0, 0.0)


def _result(state: _SupervisedState, best_epoch: int, stopped: int, method: str, history=None) -> TrainedResult:
    d = state.data
    return TrainedResult(
        model=state.model,
        logs=state.logs,
        final_weights=_ones(len(d.src_mass_raw)),
        stopped_epoch=stopped,
        best_epoch=best_epoch,
        method=method,
        source_domain_ids=[d.domain_ids[k] for k in d.src_domain],
        source_indices=d.src_index,
        history=history or {},
    )


def _new_state(bundle, model, config, extra_params=(), extra_lr_scale: float = 1.0) -> _SupervisedState:
    config.validate()
    data = prepare(bundle, model, config)
    base = list(model.theta.parameters()) + list(model.h.parameters())
    extra = list(extra_params)
    groups = [{"params": base}]
    if extra:
        groups.append({"params": extra, "lr": config.learning_rate * extra_lr_scale})
    steps_per_epoch = math.ceil(len(data.train_idx) / config.batch_size)
    return _SupervisedState(
        model=model,
        data=data,
        config=config,
        opt=torch.optim.Adam(groups, lr=config.learning_rate),
        batch_rng=rng(config.seed, "batching"),
        params=base + extra,
        total_steps=max(1, steps_per_epoch * config.max_epochs),
    )


def _plain_epoch(state: _SupervisedState) -> None:
    t0 = time.perf_counter()
    model, d, bs = state.model, state.data, state.config.batch_size
    model.train()
    order = state.batch_rng.permutation(d.train_idx)
    total, steps = 0.0, 0
    for step, s in enumerate(range(0, len(order), bs)):
        si = order[s : s + bs]
        state.opt.zero_grad(set_to_none=True)
        loss = weighted_mse(d.src_y[si], predict(model.h, model.theta(d.src_vox[si]), d.src_mass[si]))
        total += _check(loss, "L_mse", state.epoch + 1, step)
        loss.backward()
        state.opt.step()
        steps += 1
    state.epoch += 1
    val = _val_risk(model, d)
    if not math.isfinite(val):
        raise NumericalError(f"non-finite validation risk at epoch {state.epoch}")
    state.logs.append(EpochLog(state.epoch, total / steps, 0.0, 0.0, val, time.perf_counter() - t0))


def train_plain_regression(bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig) -> TrainedResult:
    """theta + h trained with unweighted MSE on pooled sources; target data is never used."""
    with sealing.sealed("training"):
        state = _new_state(bundle, model, config)
        best, stopped, _ = run_early_stopping(state, _plain_epoch)
    return _result(state, best, stopped, "plain")


# ---------------------------------------------------------------- DANN


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    return _GradReverse.apply(x, lam)


# the freshly initialized domain classifier learns 10x faster than the shared
# networks, otherwise the reversed gradient overpowers it and the domain loss
# climbs far above chance instead of settling near it
DOMAIN_LR_SCALE = 10.0


def dann_lambda(p: float) -> float:
    """Reversal coefficient ramp 2 / (1 + exp(-10 p)) - 1 over training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


class DomainClassifier(nn.Module):
    """Binary pooled-sources vs target classifier on the latent code (one logit)."""

    def __init__(self, latent_dim: int, hidden_dim: int = 32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, 1))

    def forward(self, z):
        return self.net(z).squeeze(1)


@torch.no_grad()
def held_out_domain_accuracy(model: AdaptationModel, classifier: nn.Module, data: PreparedData, batch_size: int = 256) -> float:
    """Balanced accuracy of the domain classifier on validation-source vs all target latents (eval mode)."""
    was, cwas = model.training, classifier.training
    model.eval()
    classifier.eval()
    try:
        def logits(vox):
            return torch.cat([classifier(model.theta(vox[s : s + batch_size])) for s in range(0, len(vox), batch_size)])

        src = logits(data.src_vox[data.val_idx])
        tgt = logits(data.tgt_vox)
    finally:
        model.train(was)
        classifier.train(cwas)
    return 0.5 * (float((src < 0).double().mean()) + float((tgt > 0).double().mean()))


def _dann_epoch(state: _SupervisedState) -> None:
    t0 = time.perf_counter()
    model, d, bs = state.model, state.data, state.config.batch_size
    model.train()
    state.classifier.train()
    order = state.batch_rng.permutation(d.train_idx)
    n_t = len(d.tgt_mass_raw)
    bce = nn.BCEWithLogitsLoss()
    sums = [0.0, 0.0]
    steps = 0
    for step, s in enumerate(range(0, len(order), bs)):
        si = order[s : s + bs]
        ti = state.tgt_rng.integers(0, n_t, size=len(si))
        lam = dann_lambda(state.step / state.total_steps)
        z = model.theta(torch.cat([d.src_vox[si], d.tgt_vox[ti]]))
        zs = z[: len(si)]
        reg = weighted_mse(d.src_y[si], predict(model.h, zs, d.src_mass[si]))
        dom = torch.cat([torch.zeros(len(si)), torch.ones(len(ti))]).to(z.dtype)
        dloss = bce(state.classifier(grad_reverse(z, lam)), dom)
        loss = reg + dloss
        sums[0] += _check(reg, "L_mse", state.epoch + 1, step)
        sums[1] += _check(dloss, "L_domain", state.epoch + 1, step)
        state.opt.zero_grad(set_to_none=True)
        loss.backward()
        state.opt.step()
        state.step += 1
        steps += 1
    state.epoch += 1
    val = _val_risk(model, d)
    if not math.isfinite(val):
        raise NumericalError(f"non-finite validation risk at epoch {state.epoch}")
    state.logs.append(EpochLog(state.epoch, sums[0] / steps, sums[1] / steps, 0.0, val, time.perf_counter() - t0))
    state.domain_accuracy.append(held_out_domain_accuracy(model, state.classifier, d))


def train_dann_regression(bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig) -> TrainedResult:
    """Regression head plus a gradient-reversed binary domain classifier on the latent code.

    Early stopping monitors the validation-source MSE (target labels are unavailable).
    """
    with sealing.sealed("training"):
        torch_state = torch.random.get_rng_state()
        torch.manual_seed(stream_seed(model.rng_seed, "init-domain"))
        classifier = DomainClassifier(model.fe_spec.latent_dim).to(model.dtype)
        torch.random.set_rng_state(torch_state)
        state = _new_state(bundle, model, config, classifier.parameters(), DOMAIN_LR_SCALE)
        state.classifier = classifier
        state.tgt_rng = rng(config.seed, "batching", 1)
        best, stopped, _ = run_early_stopping(state, _dann_epoch)
    return _result(state, best, stopped, "dann", {"classifier": classifier, "domain_accuracy": state.domain_accuracy})


def train_ahd_msda(bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig) -> TrainedResult:
    """Three-network loop with k trainable per-source-domain weights (softmax, summing to k)."""
    return fit(bundle, model, config, weighting="domain", method="ahd_msda")


def train_method(method: str, bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig) -> TrainedResult:
    if method == "plain":
        return train_plain_regression(bundle, model, config)
    if method == "dann":
        return train_dann_regression(bundle, model, config)
    if method == "ahd_msda":
        return train_ahd_msda(bundle, model, config)
    if method in _WEIGHTING:
        return fit(bundle, model, config, weighting=_WEIGHTING[method], method=method)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


# ---------------------------------------------------------------- grids


@dataclass
class CellResult:
    method: str
    target: str
    seed: int
    report: MetricsReport
    result: TrainedResult | None = None

    def row(self) -> dict:
        r = self.report
        return {
            "method": self.method,
            "target": self.target,
            "seed": self.seed,
            "euclid3d_mean": r.euclid3d_mean_mm,
            "euclid3d_median": r.euclid3d_median_mm,
            "mape_vm": r.mape_vm_pct,
            "rmse_vm": r.rmse_vm_mpa,
            "x_mean": r.x_mean_mm,
            "x_median": r.x_median_mm,
            "y_mean": r.y_mean_mm,
            "y_median": r.y_median_mm,
            "z_mean": r.z_mean_mm,
            "z_median": r.z_median_mm,
        }


def run_cell(
    benchmark: DatasetBundle,
    method: str,
    target: str,
    seed: int,
    train_config: TrainConfig,
    fe_spec: FeatureExtractorSpec | None = None,
    head_spec: HeadSpec | None = None,
    keep_result: bool = False,
) -> CellResult:
    """Leave ``target`` out, train ``method`` with root seed ``seed`` and score it on the target."""
    task = benchmark.leave_out(target)
    cfg = TrainConfig.from_dict({**train_config.to_dict(), "seed": seed})
    model = init_model(fe_spec, head_spec, seed)
    res = train_method(method, task, model, cfg)
    report = evaluate(res.model, task.target.voxels, task.target.masses, task.target_eval_labels)
    return CellResult(method, target, seed, report, res if keep_result else None)


def _cell_job(args):
    return run_cell(*args)


def run_grid(benchmark, methods, targets, seeds, train_config, fe_spec=None, head_spec=None, workers: int = 1, on_cell=None):
    """All (method, target, seed) cells; results sorted by (method, target, seed) whatever the completion order."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    jobs = [(benchmark, m, t, s, train_config, fe_spec, head_spec) for m in methods for t in targets for s in seeds]
    cells = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor, as_completed

        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_cell_job, j) for j in jobs]
            for f in as_completed(futures):
                cells.append(f.result())
                if on_cell:
                    on_cell(cells[-1])
    else:
        for j in jobs:
            cells.append(_cell_job(j))
            if on_cell:
                on_cell(cells[-1])
    order = {m: i for i, m in enumerate(methods)}
    cells.sort(key=lambda c: (order[c.method], c.target, c.seed))
    return cells


def seed_rows(cells: list[CellResult]) -> list[dict]:
    """One row per (method, seed): metrics averaged over the leave-one-out targets."""
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c.method, c.seed), []).append(c.row())
    rows = []
    for (method, seed), rs in groups.items():
        row = {"method": method, "seed": seed}
        for col in RESULT_COLUMNS[2:]:
            row[col] = float(np.mean([r[col] for r in rs]))
        rows.append(row)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and population std over seeds for every metric, one entry per method (input order kept)."""
    out = []
    for method in dict.fromkeys(r["method"] for r in rows):
        rs = [r for r in rows if r["method"] == method]
        entry = {"method": method, "n_seeds": len(rs)}
        for col in RESULT_COLUMNS[2:]:
            v = np.array([r[col] for r in rs])
            entry[f"{col}_mean"] = float(v.mean())
            entry[f"{col}_std"] = float(v.std())
        out.append(entry)
    return out


def write_results_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def write_summary_csv(summary: list[dict], path) -> Path:
    path = Path(path)
    cols = ["method", "n_seeds"] + [f"{c}_{s}" for c in RESULT_COLUMNS[2:] for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for e in summary:
            w.writerow(e)
    return path


def run_ablation(
    benchmark: DatasetBundle,
    train_config: TrainConfig,
    seeds=(0, 1, 2, 3, 4),
    targets=None,
    methods=ABLATION_VARIANTS,
    fe_spec=None,
    head_spec=None,
    workers: int = 1,
):
    """Leave-one-domain-out grid over the weighting variants; returns (cells, per-seed rows, summary)."""
    targets = list(targets or benchmark.domain_ids)
    cells = run_grid(benchmark, list(methods), targets, list(seeds), train_config, fe_spec, head_spec, workers)
    rows = seed_rows(cells)
    return cells, rows, summarize(rows)
