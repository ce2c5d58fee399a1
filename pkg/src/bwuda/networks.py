"""Feature extractor, predictor and discrepancy heads, and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data.scaling import LabelScaler
from .seeding import stream_seed


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureExtractorSpec:
    input_resolution: int = 16
    conv_channels: tuple[int, ...] = (4, 8, 8, 16, 16)
    kernel_size: int = 3
    pool_positions: tuple[int, ...] = (0, 1)  # pool after the 1st and 2nd conv layers
    latent_dim: int = 30
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_positions", tuple(sorted(int(p) for p in self.pool_positions)))
        if len(self.conv_channels) != 5:
            raise SpecError(f"exactly 5 conv layers required, got {len(self.conv_channels)}")
        if len(set(self.pool_positions)) != 2 or not all(0 <= p < 5 for p in self.pool_positions):
            raise SpecError(f"exactly 2 distinct pooling positions in 0..4 required, got {self.pool_positions}")
        if self.latent_dim < 1:
            raise SpecError("latent_dim must be >= 1")
        if self.kernel_size % 2 != 1:
            raise SpecError("kernel_size must be odd (same padding)")
        if self.input_resolution % 4 != 0 or self.input_resolution < 8:
            raise SpecError("input_resolution must be a multiple of 4 and >= 8")

    @property
    def output_resolution(self) -> int:
        return self.input_resolution // 4


@dataclass(frozen=True)
class HeadSpec:
    input_dim: int = 31
    hidden_dim: int = 64
    output_dim: int = 4

    def __post_init__(self):
        if self.output_dim != 4:
            raise SpecError("heads predict exactly 4 outputs (x, y, z, vm)")
        if self.input_dim < 2 or self.hidden_dim < 1:
            raise SpecError("invalid head dimensions")


class FeatureExtractor(nn.Module):
    """Five 3D conv blocks (conv, batch norm, leaky ReLU), two max-pools, linear to the latent."""

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        c_in = 1
        for i, c_out in enumerate(spec.conv_channels):
            layers += [
                nn.Conv3d(c_in, c_out, spec.kernel_size, padding=spec.kernel_size // 2),
                nn.BatchNorm3d(c_out),
                nn.LeakyReLU(spec.leaky_slope),
            ]
            if i in spec.pool_positions:
                layers.append(nn.MaxPool3d(2))
            c_in = c_out
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in * spec.output_resolution**3, spec.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if tuple(x.shape[-3:]) != (self.spec.input_resolution,) * 3:
            raise SpecError(f"expected resolution {self.spec.input_resolution}, got {tuple(x.shape[-3:])}")
        return self.fc(self.conv(x).flatten(1))


class Head(nn.Module):
    """Two fully connected layers with a ReLU in between; linear output."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.input_dim, spec.hidden_dim)
        self.fc2 = nn.Linear(spec.hidden_dim, spec.output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class AdaptationModel(nn.Module):
    """Extractor ``theta``, predictor ``h`` and discrepancy head ``hhat`` plus input/label scaling."""

    def __init__(self, fe_spec: FeatureExtractorSpec, head_spec: HeadSpec, rng_seed: int = 0):
        super().__init__()
        if fe_spec.latent_dim + 1 != head_spec.input_dim:
            raise SpecError(
                f"head input_dim must be latent_dim + 1 = {fe_spec.latent_dim + 1}, got {head_spec.input_dim}"
            )
        self.fe_spec = fe_spec
        self.head_spec = head_spec
        self.rng_seed = rng_seed
        self.label_scaler: LabelScaler | None = None
        self.mass_mean = 0.0
        self.mass_std = 1.0
        self.theta = _seeded(lambda: FeatureExtractor(fe_spec), stream_seed(rng_seed, "init-theta"))
        self.h = _seeded(lambda: Head(head_spec), stream_seed(rng_seed, "init-h"))
        self.hhat = _seeded(lambda: Head(head_spec), stream_seed(rng_seed, "init-hhat"))

    def scale_mass(self, masses) -> torch.Tensor:
        m = torch.as_tensor(np.asarray(masses, dtype=np.float64), dtype=self.dtype)
        return ((m - self.mass_mean) / self.mass_std).reshape(-1, 1)

    @property
    def dtype(self) -> torch.dtype:
        return self.theta.fc.weight.dtype

    def forward(self, voxels: torch.Tensor, mass_scaled: torch.Tensor):
        z = self.theta(voxels)
        return predict(self.h, z, mass_scaled), predict(self.hhat, z, mass_scaled)


def _seeded(factory, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def init_model(fe_spec: FeatureExtractorSpec | None = None, head_spec: HeadSpec | None = None, seed: int = 0) -> AdaptationModel:
    """Fresh model; theta, h and hhat use distinct named sub-seeds of ``seed``."""
    fe_spec = fe_spec or FeatureExtractorSpec()
    head_spec = head_spec or HeadSpec(input_dim=fe_spec.latent_dim + 1)
    return AdaptationModel(fe_spec, head_spec, seed)


def as_voxel_tensor(voxels, dtype=torch.float32) -> torch.Tensor:
    if isinstance(voxels, torch.Tensor):
        t = voxels.to(dtype)
    else:
        t = torch.from_numpy(np.ascontiguousarray(voxels)).to(dtype)
    return t.unsqueeze(1) if t.dim() == 4 else t


def extract(model: AdaptationModel, voxel_batch) -> torch.Tensor:
    """Latent codes (B x latent_dim); respects the model's train/eval mode."""
    return model.theta(as_voxel_tensor(voxel_batch, model.dtype))


def predict(head: Head, latent_batch: torch.Tensor, mass_batch: torch.Tensor) -> torch.Tensor:
    """Head output for ``[latent, scaled mass]``; columns are (x, y, z, vm) in scaled label space."""
    mass_batch = mass_batch.reshape(-1, 1)
    if latent_batch.shape[0] != mass_batch.shape[0]:
        raise SpecError(f"{latent_batch.shape[0]} latent rows but {mass_batch.shape[0]} masses")
    return head(torch.cat([latent_batch, mass_batch.to(latent_batch.dtype)], dim=1))


@torch.no_grad()
def predict_scaled(model: AdaptationModel, voxels, masses, batch_size: int = 256, head="h"):
    """Eval-mode predictions in scaled label space, batched; model mode is restored afterwards.

    ``head`` may also be a tuple of head names, in which case the latents are
    computed once and one array per head is returned.
    """
    heads = (head,) if isinstance(head, str) else tuple(head)
    was_training = model.training
    model.eval()
    out = {k: [] for k in heads}
    try:
        for s in range(0, len(masses), batch_size):
            z = extract(model, voxels[s : s + batch_size])
            m = model.scale_mass(masses[s : s + batch_size])
            for k in heads:
                out[k].append(predict(getattr(model, k), z, m))
    finally:
        model.train(was_training)
    arrays = [torch.cat(out[k]).double().numpy() if out[k] else np.zeros((0, 4)) for k in heads]
    return arrays[0] if isinstance(head, str) else arrays


@torch.no_grad()
def latents(model: AdaptationModel, voxels, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        out = [extract(model, voxels[s : s + batch_size]) for s in range(0, len(voxels), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy()


def predict_physical(model: AdaptationModel, voxels, masses, batch_size: int = 256) -> np.ndarray:
    if model.label_scaler is None:
        raise SpecError("model has no label scaler; it was never fitted")
    return model.label_scaler.invert(predict_scaled(model, voxels, masses, batch_size))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


@dataclass
class CheckpointMeta:
    fe_spec: dict
    head_spec: dict
    rng_seed: int
    label_scaler: dict | None
    mass_mean: float
    mass_std: float
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(model: AdaptationModel, path, extra: dict | None = None) -> Path:
    """Directory with ``spec.json``, ``manifest.json`` (name, shape, dtype, offset) and ``params.bin``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = CheckpointMeta(
        fe_spec=asdict(model.fe_spec),
        head_spec=asdict(model.head_spec),
        rng_seed=model.rng_seed,
        label_scaler=model.label_scaler.to_dict() if model.label_scaler else None,
        mass_mean=float(model.mass_mean),
        mass_std=float(model.mass_std),
        extra=extra or {},
    )
    entries, offset = [], 0
    with open(root / "params.bin", "wb") as fh:
        for name, t in model.state_dict().items():
            code = _DTYPES[t.dtype]
            blob = t.detach().cpu().contiguous().numpy().astype(code, copy=False).tobytes()
            entries.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset, "nbytes": len(blob)})
            fh.write(blob)
            offset += len(blob)
    (root / "spec.json").write_text(json.dumps(asdict(meta), indent=2))
    (root / "manifest.json").write_text(json.dumps({"version": CHECKPOINT_VERSION, "tensors": entries}, indent=2))
    return root


def load_checkpoint(path) -> tuple[AdaptationModel, dict]:
    root = Path(path)
    meta = json.loads((root / "spec.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise SpecError(f"checkpoint version {meta.get('version')} unsupported")
    model = AdaptationModel(FeatureExtractorSpec(**meta["fe_spec"]), HeadSpec(**meta["head_spec"]), meta["rng_seed"])
    if meta["label_scaler"] is not None:
        model.label_scaler = LabelScaler.from_dict(meta["label_scaler"])
    model.mass_mean, model.mass_std = meta["mass_mean"], meta["mass_std"]
    manifest = json.loads((root / "manifest.json").read_text())
    raw = (root / "params.bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("extra", {})
