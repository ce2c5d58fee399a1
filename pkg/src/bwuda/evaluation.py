"""Error metrics in physical units, latent-space export and a domain-alignment probe."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.linear_model import LinearRegression, LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .networks import AdaptationModel, latents, predict_physical
from .weighting import EmbeddingConfig, embed_points


class MetricError(ValueError):
    pass


def _pair(y, y_hat, ndim: int):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.ndim != ndim or len(y) == 0:
        raise MetricError("metrics need a non-empty input")
    return y, y_hat


def median(v) -> float:
    """Median; for even n the mean of the two central order statistics."""
    return float(np.median(np.asarray(v, dtype=np.float64)))


def rmse_vm(y_vm, y_vm_hat) -> float:
    y, p = _pair(y_vm, y_vm_hat, 1)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def mape_vm(y_vm, y_vm_hat) -> float:
    y, p = _pair(y_vm, y_vm_hat, 1)
    if np.any(y == 0):
        raise MetricError("MAPE undefined: zero ground-truth stress")
    return float(100.0 * np.mean(np.abs((y - p) / y)))


def euclid3d(locations, predictions) -> tuple[float, float, np.ndarray]:
    y, p = _pair(locations, predictions, 2)
    dist = np.sqrt(((y[:, :3] - p[:, :3]) ** 2).sum(axis=1))
    return float(dist.mean()), median(dist), dist


def euclid1d_breakdown(locations, predictions) -> dict[str, tuple[float, float]]:
    """Per-axis (mean, median) absolute error in mm."""
    y, p = _pair(locations, predictions, 2)
    err = np.abs(y[:, :3] - p[:, :3])
    return {axis: (float(err[:, k].mean()), median(err[:, k])) for k, axis in enumerate("xyz")}


@dataclass
class MetricsReport:
    euclid3d_mean_mm: float
    euclid3d_median_mm: float
    mape_vm_pct: float
    rmse_vm_mpa: float
    x_mean_mm: float
    x_median_mm: float
    y_mean_mm: float
    y_median_mm: float
    z_mean_mm: float
    z_median_mm: float
    n: int

    # Table-1 columns first, then the Table-2 per-axis breakdown
    CSV_COLUMNS = (
        "euclid3d_mean_mm",
        "euclid3d_median_mm",
        "mape_vm_pct",
        "rmse_vm_mpa",
        "x_mean_mm",
        "x_median_mm",
        "y_mean_mm",
        "y_median_mm",
        "z_mean_mm",
        "z_median_mm",
        "n",
    )

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path, label: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow((["target_domain"] if label is not None else []) + list(self.CSV_COLUMNS))
            d = self.to_dict()
            w.writerow(([label] if label is not None else []) + [repr(d[c]) if c != "n" else d[c] for c in self.CSV_COLUMNS])


def metrics_from_predictions(y_true, y_pred) -> MetricsReport:
    y, p = _pair(y_true, y_pred, 2)
    mean3, med3, _ = euclid3d(y, p)
    axes = euclid1d_breakdown(y, p)
    return MetricsReport(
        euclid3d_mean_mm=mean3,
        euclid3d_median_mm=med3,
        mape_vm_pct=mape_vm(y[:, 3], p[:, 3]),
        rmse_vm_mpa=rmse_vm(y[:, 3], p[:, 3]),
        x_mean_mm=axes["x"][0],
        x_median_mm=axes["x"][1],
        y_mean_mm=axes["y"][0],
        y_median_mm=axes["y"][1],
        z_mean_mm=axes["z"][0],
        z_median_mm=axes["z"][1],
        n=len(y),
    )


def evaluate(model: AdaptationModel, voxels, masses, true_labels) -> MetricsReport:
    """Predict in eval mode, un-scale to mm/MPa and compute every metric."""
    pred = predict_physical(model, voxels, masses)
    return metrics_from_predictions(true_labels, pred)


def macro_average(reports: list[MetricsReport]) -> MetricsReport:
    d = {c: float(np.mean([getattr(r, c) for r in reports])) for c in MetricsReport.CSV_COLUMNS if c != "n"}
    return MetricsReport(**d, n=int(sum(r.n for r in reports)))


# ---------------------------------------------------------------- latent space


def _bundle_rows(bundle, with_target_labels: bool):
    """(domain_id, index, voxels, vm or nan) over sources then target."""
    ids, idx, vox, vm = [], [], [], []
    for d in bundle.sources:
        ids += [d.domain_id] * len(d)
        idx.append(np.arange(len(d)))
        vox.append(d.voxels)
        vm.append(d.labels[:, 3])
    if bundle.target is not None:
        t = bundle.target
        ids += [t.domain_id] * len(t)
        idx.append(np.arange(len(t)))
        vox.append(t.voxels)
        labels = bundle.target_eval_labels if with_target_labels else None
        vm.append(labels[:, 3] if labels is not None else np.full(len(t), np.nan))
    return ids, np.concatenate(idx), np.concatenate(vox), np.concatenate(vm)


def latent_embedding(model: AdaptationModel, bundle, cfg: EmbeddingConfig, with_target_labels: bool = True):
    ids, idx, vox, vm = _bundle_rows(bundle, with_target_labels)
    codes = embed_points(latents(model, vox), cfg)
    return ids, idx, codes, vm


def export_latents(model: AdaptationModel, bundle, cfg: EmbeddingConfig, path, plot_path=None, with_target_labels: bool = True):
    """Write ``domain_id,index,e1,e2,vm_mpa`` for every sample (vm empty when unknown)."""
    ids, idx, codes, vm = latent_embedding(model, bundle, cfg, with_target_labels)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id", "index", "e1", "e2", "vm_mpa"])
        for row in zip(ids, idx, codes[:, 0], codes[:, 1], vm):
            w.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3])), "" if np.isnan(row[4]) else repr(float(row[4]))])
    if plot_path is not None:
        _scatter(codes, ids, vm, plot_path)
    return {"domain_id": ids, "index": idx, "codes": codes, "vm_mpa": vm}


def _scatter(codes, ids, vm, plot_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for did in dict.fromkeys(ids):
        m = np.array([i == did for i in ids])
        axes[0].scatter(codes[m, 0], codes[m, 1], s=6, label=did)
    axes[0].legend(markerscale=3, fontsize=8)
    axes[0].set_title("by domain")
    known = ~np.isnan(vm)
    sc = axes[1].scatter(codes[known, 0], codes[known, 1], c=vm[known], s=6, cmap="coolwarm")
    fig.colorbar(sc, ax=axes[1], label="max von Mises (MPa)")
    axes[1].set_title("by stress magnitude")
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)


def linear_fit_r2(codes, values) -> float:
    """R^2 of an ordinary least-squares fit of ``values`` on the 2D codes."""
    codes = np.asarray(codes, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    keep = ~np.isnan(values)
    reg = LinearRegression().fit(codes[keep], values[keep])
    return float(reg.score(codes[keep], values[keep]))


def probe_accuracy(features, is_target, seed: int = 0, folds: int = 5) -> float:
    """5-fold cross-validated logistic-regression accuracy of source-vs-target."""
    y = np.asarray(is_target, dtype=int)
    counts = np.bincount(y, minlength=2)
    if counts.min() < folds:
        raise MetricError(f"each class needs at least {folds} samples, got {counts.tolist()}")
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return float(cross_val_score(clf, np.asarray(features, dtype=np.float64), y, cv=cv).mean())


def alignment_probe(model: AdaptationModel, bundle, seed: int = 0) -> float:
    """Source-vs-target separability of the frozen latents; lower means better aligned."""
    src = np.concatenate([d.voxels for d in bundle.sources])
    feats = latents(model, np.concatenate([src, bundle.target.voxels]))
    is_target = np.r_[np.zeros(len(src)), np.ones(len(bundle.target))]
    return probe_accuracy(feats, is_target, seed)
