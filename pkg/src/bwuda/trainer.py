"""Sequential adversarial training of theta, h and hhat with instance weights.

Each mini-batch runs three updates in a fixed order: h minimizes the weighted
source risk, hhat maximizes the hypothesis discrepancy, theta minimizes risk
plus discrepancy. At the end of each epoch the engineering weights are
recomputed from the h/hhat disagreement and recombined with the fixed geometry
weights.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import sealing
from .data.scaling import fit_label_scaler
from .data.types import DatasetBundle, split_indices
from .losses import hdisc_estimate, loss_feat, loss_hhat, loss_src_risk, weighted_mse
from .networks import AdaptationModel, as_voxel_tensor, predict
from .seeding import rng, stream_seed
from .weighting import (
    CombinedWeights,
    EmbeddingConfig,
    EngineeringWeights,
    GeometryWeights,
    combine,
    embed_geometry,
    engineering_weights,
    geometry_weights,
)

log = logging.getLogger(__name__)

WEIGHTING_MODES = ("both", "geo", "eng", "none", "domain")


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 25
    alpha: float = 0.5
    beta: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0
    perplexity: float = 30.0
    pre_reduction_dim: int = 50

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha, beta must be >= 0 and not both zero")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(self.perplexity, self.pre_reduction_dim, stream_seed(self.seed, "embedding"))


@dataclass
class EpochLog:
    epoch: int
    src_risk: float
    hdisc: float
    feat_disc: float
    val_criterion: float
    wall_time: float


@dataclass
class TrainedResult:
    model: AdaptationModel
    logs: list[EpochLog]
    final_weights: CombinedWeights | None
    stopped_epoch: int
    best_epoch: int
    method: str
    source_domain_ids: list[str] = field(default_factory=list)
    source_indices: np.ndarray | None = None
    geo_weights: GeometryWeights | None = None
    eng_weights: EngineeringWeights | None = None
    history: dict = field(default_factory=dict)


@dataclass
class PreparedData:
    """Pooled source arrays (train and validation rows) and target arrays as tensors."""

    src_vox: torch.Tensor
    src_mass_raw: np.ndarray
    src_mass: torch.Tensor
    src_y: torch.Tensor
    src_domain: np.ndarray
    src_index: np.ndarray
    domain_ids: list[str]
    train_idx: np.ndarray
    val_idx: np.ndarray
    tgt_vox: torch.Tensor
    tgt_mass_raw: np.ndarray
    tgt_mass: torch.Tensor
    src_vox_raw: np.ndarray
    tgt_vox_raw: np.ndarray


def prepare(bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig) -> PreparedData:
    """Fit label and mass scaling on the sources and build pooled tensors. Never reads target labels."""
    if bundle.target is None or len(bundle.target) == 0:
        raise ValueError("training needs a target domain with at least one sample")
    if bundle.resolution != model.fe_spec.input_resolution:
        raise ValueError(f"bundle resolution {bundle.resolution} != model input {model.fe_spec.input_resolution}")
    model.label_scaler = fit_label_scaler(bundle.sources)
    all_mass = np.concatenate([d.masses for d in bundle.sources])
    model.mass_mean = float(all_mass.mean())
    model.mass_std = float(all_mass.std()) or 1.0

    train_idx, val_idx, offset = [], [], 0
    for d in bundle.sources:
        tr, va = split_indices(len(d), config.val_fraction, config.seed, d.domain_id)
        train_idx.append(tr + offset)
        val_idx.append(va + offset)
        offset += len(d)
    src_vox_raw = np.concatenate([d.voxels for d in bundle.sources])
    labels = np.concatenate([d.labels for d in bundle.sources])
    dtype = model.dtype
    return PreparedData(
        src_vox=as_voxel_tensor(src_vox_raw, dtype),
        src_mass_raw=all_mass,
        src_mass=model.scale_mass(all_mass),
        src_y=torch.as_tensor(model.label_scaler.apply(labels), dtype=dtype),
        src_domain=np.concatenate([np.full(len(d), k) for k, d in enumerate(bundle.sources)]),
        src_index=np.concatenate([np.arange(len(d)) for d in bundle.sources]),
        domain_ids=[d.domain_id for d in bundle.sources],
        train_idx=np.concatenate(train_idx),
        val_idx=np.concatenate(val_idx),
        tgt_vox=as_voxel_tensor(bundle.target.voxels, dtype),
        tgt_mass_raw=bundle.target.masses.copy(),
        tgt_mass=model.scale_mass(bundle.target.masses),
        src_vox_raw=src_vox_raw,
        tgt_vox_raw=bundle.target.voxels,
    )


_GEO_CACHE: OrderedDict = OrderedDict()


def compute_geometry_weights(data: PreparedData, cfg: EmbeddingConfig) -> GeometryWeights:
    """Joint embedding of all source and target voxels, then reciprocal-distance weights.

    Results are memoized on the voxel bytes and embedding config because the
    embedding is the most expensive part of a short run and several ablation
    variants share it.
    """
    h = hashlib.sha1()
    h.update(data.src_vox_raw.tobytes())
    h.update(data.tgt_vox_raw.tobytes())
    h.update(repr(cfg).encode())
    key = h.hexdigest()
    if key not in _GEO_CACHE:
        src_codes, tgt_codes = embed_geometry(data.src_vox_raw, data.tgt_vox_raw, cfg)
        _GEO_CACHE[key] = geometry_weights(src_codes, tgt_codes, cfg.seed)
        while len(_GEO_CACHE) > 16:
            _GEO_CACHE.popitem(last=False)
    gw = _GEO_CACHE[key]
    return GeometryWeights(gw.values.copy(), gw.embedding_seed)


@dataclass
class TrainState:
    model: AdaptationModel
    data: PreparedData
    config: TrainConfig
    weighting: str
    opt_theta: torch.optim.Optimizer
    opt_h: torch.optim.Optimizer
    opt_hhat: torch.optim.Optimizer
    w_geo: GeometryWeights
    w_eng: EngineeringWeights
    omega: CombinedWeights
    batch_rng: np.random.Generator
    epoch: int = 0
    logs: list[EpochLog] = field(default_factory=list)
    domain_logits: nn.Parameter | None = None
    opt_domain: torch.optim.Optimizer | None = None
    _tgt_order: np.ndarray | None = None
    _tgt_pos: int = 0

    def domain_weights(self) -> torch.Tensor:
        """k * softmax(logits): positive per-domain weights summing to k."""
        k = self.domain_logits.shape[0]
        return k * torch.softmax(self.domain_logits, dim=0)

    def batch_omega(self, src_idx: np.ndarray) -> torch.Tensor:
        if self.domain_logits is not None:
            return self.domain_weights()[torch.as_tensor(self.data.src_domain[src_idx])]
        return torch.as_tensor(self.omega.values[src_idx], dtype=self.model.dtype)

    def omega_values(self) -> np.ndarray:
        if self.domain_logits is not None:
            with torch.no_grad():
                return self.domain_weights().double().numpy()[self.data.src_domain]
        return self.omega.values

    def next_target(self, n: int) -> np.ndarray:
        out = []
        while len(out) < n:
            if self._tgt_order is None or self._tgt_pos >= len(self._tgt_order):
                self._tgt_order = self.batch_rng.permutation(len(self.data.tgt_mass_raw))
                self._tgt_pos = 0
            take = min(n - len(out), len(self._tgt_order) - self._tgt_pos)
            out.extend(self._tgt_order[self._tgt_pos : self._tgt_pos + take])
            self._tgt_pos += take
        return np.asarray(out, dtype=np.int64)


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr)


def init_state(bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig, weighting: str = "both") -> TrainState:
    if weighting not in WEIGHTING_MODES:
        raise ValueError(f"unknown weighting {weighting!r}; choose from {WEIGHTING_MODES}")
    config.validate()
    data = prepare(bundle, model, config)
    n = len(data.src_mass_raw)
    if weighting in ("geo", "both"):
        w_geo = compute_geometry_weights(data, config.embedding())
    else:
        w_geo = GeometryWeights(np.ones(n), -1)
    w_eng = EngineeringWeights(np.ones(n), 0)
    state = TrainState(
        model=model,
        data=data,
        config=config,
        weighting=weighting,
        opt_theta=_adam(model.theta.parameters(), config.learning_rate),
        opt_h=_adam(model.h.parameters(), config.learning_rate),
        opt_hhat=_adam(model.hhat.parameters(), config.learning_rate),
        w_geo=w_geo,
        w_eng=w_eng,
        omega=_omega(weighting, w_geo, w_eng, config),
        batch_rng=rng(config.seed, "batching"),
    )
    if weighting == "domain":
        state.domain_logits = nn.Parameter(torch.zeros(len(data.domain_ids), dtype=model.dtype))
        state.opt_domain = _adam([state.domain_logits], config.learning_rate)
    return state


def _omega(weighting: str, w_geo, w_eng, config: TrainConfig) -> CombinedWeights:
    total = config.alpha + config.beta
    n = len(w_geo.values)
    if weighting == "both":
        return combine(w_geo, w_eng, config.alpha, config.beta)
    if weighting == "geo":
        return combine(w_geo, w_eng, 0.0, total)
    if weighting == "eng":
        return combine(w_geo, w_eng, total, 0.0)
    return CombinedWeights(np.ones(n), 0.0, 0.0)


def _check(value: torch.Tensor, name: str, epoch: int, step: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NumericalError(f"non-finite {name} = {v} at epoch {epoch}, step {step}")
    return v


def sequential_step(state: TrainState, src_idx: np.ndarray, tgt_idx: np.ndarray, stages=("h", "hhat", "theta"), step: int = 0) -> dict:
    """Run the three ordered updates on one paired batch; returns the loss values seen.

    ``stages`` selects a subset (kept in the canonical order) for probing.
    """
    model, d = state.model, state.data
    ns = len(src_idx)
    z = model.theta(torch.cat([d.src_vox[src_idx], d.tgt_vox[tgt_idx]]))
    zs, zt = z[:ns], z[ns:]
    zs_d, zt_d = zs.detach(), zt.detach()
    ms, mt, ys = d.src_mass[src_idx], d.tgt_mass[tgt_idx], d.src_y[src_idx]
    w = state.batch_omega(src_idx)
    w_d = w.detach()
    out = {}
    ep = state.epoch + 1

    if "h" in stages:
        state.opt_h.zero_grad(set_to_none=True)
        loss = loss_src_risk(model, zs_d, ms, ys, w_d)
        out["src_risk"] = _check(loss, "L_src_risk", ep, step)
        loss.backward()
        state.opt_h.step()

    if "hhat" in stages:
        state.opt_hhat.zero_grad(set_to_none=True)
        loss = loss_hhat(model, zs_d, ms, w_d, zt_d, mt)
        out["hdisc"] = -_check(loss, "L_hhat_disc", ep, step)
        loss.backward()
        state.opt_hhat.step()

    if "theta" in stages:
        state.opt_theta.zero_grad(set_to_none=True)
        if state.opt_domain is not None:
            state.opt_domain.zero_grad(set_to_none=True)
        loss = loss_feat(model, zs, ms, ys, w, zt, mt)
        out["feat_disc"] = _check(loss, "L_feat_disc", ep, step)
        loss.backward()
        state.opt_theta.step()
        if state.opt_domain is not None:
            state.opt_domain.step()
    return out


def refresh_weights(state: TrainState) -> None:
    """Recompute W_eng over every source instance (eval mode) and recombine omega."""
    if state.weighting not in ("eng", "both"):
        return
    d = state.data
    state.w_eng = engineering_weights(state.model, d.src_vox, d.src_mass_raw, epoch=state.epoch)
    state.omega = _omega(state.weighting, state.w_geo, state.w_eng, state.config)


@torch.no_grad()
def validation_criterion(state: TrainState, batch_size: int = 256) -> float:
    """Weighted validation-source risk plus HDisc(validation sources, full target), eval mode.

    The validation weights are rescaled to unit mean so the criterion keeps
    one scale across epochs while W_eng, and with it the mean of omega, moves.
    """
    model, d = state.model, state.data
    was = model.training
    model.eval()
    try:
        vi = d.val_idx
        zs = torch.cat([model.theta(d.src_vox[vi[s : s + batch_size]]) for s in range(0, len(vi), batch_size)])
        nt = len(d.tgt_mass_raw)
        zt = torch.cat([model.theta(d.tgt_vox[s : s + batch_size]) for s in range(0, nt, batch_size)])
        w = state.omega_values()[vi]
        w = torch.as_tensor(w / w.mean() if w.mean() > 0 else np.ones_like(w), dtype=model.dtype)
        risk = weighted_mse(d.src_y[vi], predict(model.h, zs, d.src_mass[vi]), w)
        disc = hdisc_estimate(model, zs, d.src_mass[vi], w, zt, d.tgt_mass)
    finally:
        model.train(was)
    return float(risk + disc)


def train_epoch(state: TrainState) -> TrainState:
    """One pass over the training sources, then the engineering-weight refresh and validation."""
    t0 = time.perf_counter()
    model, d, bs = state.model, state.data, state.config.batch_size
    model.train()
    order = state.batch_rng.permutation(d.train_idx)
    sums = {"src_risk": 0.0, "hdisc": 0.0, "feat_disc": 0.0}
    steps = 0
    for step, s in enumerate(range(0, len(order), bs)):
        si = order[s : s + bs]
        ti = state.next_target(len(si))
        for k, v in sequential_step(state, si, ti, step=step).items():
            sums[k] += v
        steps += 1
    state.epoch += 1
    refresh_weights(state)
    val = validation_criterion(state)
    if not math.isfinite(val):
        raise NumericalError(f"non-finite validation criterion at epoch {state.epoch}")
    state.logs.append(
        EpochLog(
            state.epoch,
            sums["src_risk"] / steps,
            sums["hdisc"] / steps,
            sums["feat_disc"] / steps,
            val,
            time.perf_counter() - t0,
        )
    )
    return state


def run_early_stopping(state: TrainState, epoch_fn, criterion=lambda s: s.logs[-1].val_criterion):
    """Drive ``epoch_fn`` until ``patience`` epochs pass without improvement; restore the best model.

    Returns (best_epoch, stopped_epoch, snapshot) where snapshot holds whatever
    ``state`` attributes were current at the best epoch.
    """
    cfg = state.config
    best, best_epoch, best_params, snapshot = math.inf, 0, None, {}
    for _ in range(cfg.max_epochs):
        epoch_fn(state)
        value = criterion(state)
        if value < best:
            best, best_epoch = value, state.epoch
            best_params = copy.deepcopy(state.model.state_dict())
            snapshot = {"w_eng": state.w_eng, "omega": state.omega}
        if state.epoch - best_epoch >= cfg.patience:
            break
    state.model.load_state_dict(best_params)
    state.model.eval()
    return best_epoch, state.epoch, snapshot


def fit(bundle: DatasetBundle, model: AdaptationModel, config: TrainConfig, weighting: str = "both", method: str | None = None) -> TrainedResult:
    """Train with early stopping; returns the model restored to its best validation epoch.

    ``weighting``: ``both`` (alpha*W_eng + beta*W_geo), ``geo``/``eng`` (all of
    alpha+beta on one factor), ``none`` (omega = 1) or ``domain`` (trainable
    per-domain scalars).
    """
    with sealing.sealed("training"):
        state = init_state(bundle, model, config, weighting)
        history: dict = {"domain_weights": []} if weighting == "domain" else {}

        def epoch_fn(s):
            train_epoch(s)
            if s.domain_logits is not None:
                with torch.no_grad():
                    history["domain_weights"].append(s.domain_weights().double().numpy().tolist())
            log.debug("epoch %d: %s", s.epoch, s.logs[-1])

        best_epoch, stopped, snap = run_early_stopping(state, epoch_fn)
    final = CombinedWeights(state.omega_values().copy(), state.omega.alpha, state.omega.beta)
    return TrainedResult(
        model=model,
        logs=state.logs,
        final_weights=final,
        stopped_epoch=stopped,
        best_epoch=best_epoch,
        method=method or f"proposed_{weighting}",
        source_domain_ids=[state.data.domain_ids[k] for k in state.data.src_domain],
        source_indices=state.data.src_index,
        geo_weights=state.w_geo,
        eng_weights=state.w_eng,
        history=history,
    )
