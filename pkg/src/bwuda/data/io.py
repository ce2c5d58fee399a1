"""Bundle persistence.

Layout of a bundle directory::

    manifest.json            version, resolution, cell size, domains, counts, digest
    <domain_id>/voxels.bin   8-byte magic, 4 x uint32 LE shape (N, R, R, R), uint8 payload
    <domain_id>/labels.csv   index,mass_kg,x_mm,y_mm,z_mm,vm_mpa

The target domain's label columns are left empty when its labels are unknown.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .types import DataError, DatasetBundle, LabeledDomain, TargetDomain

FORMAT_VERSION = 1
MAGIC = b"BWVOXEL1"
_SHAPE = struct.Struct("<4I")
CSV_HEADER = ["index", "mass_kg", "x_mm", "y_mm", "z_mm", "vm_mpa"]


class BundleFormatError(DataError):
    """Base class for on-disk bundle problems."""


class CorruptHeaderError(BundleFormatError):
    pass


class ShapeMismatchError(BundleFormatError):
    pass


class VersionMismatchError(BundleFormatError):
    pass


def write_voxels(path: Path, voxels: np.ndarray) -> None:
    vox = np.ascontiguousarray(voxels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_SHAPE.pack(*vox.shape))
        fh.write(vox.tobytes())


def read_voxels(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = len(MAGIC) + _SHAPE.size
    if len(raw) < head or raw[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError(f"{path}: missing or truncated voxel header")
    shape = _SHAPE.unpack_from(raw, len(MAGIC))
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) - head != n:
        raise CorruptHeaderError(f"{path}: header declares {n} cells but payload holds {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(shape).copy()


def _write_csv(path: Path, masses: np.ndarray, labels: np.ndarray | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i, m in enumerate(masses):
            row = [i, repr(float(m))]
            row += [repr(float(v)) for v in labels[i]] if labels is not None else ["", "", "", ""]
            w.writerow(row)


def _read_csv(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise CorruptHeaderError(f"{path}: expected header {','.join(CSV_HEADER)}")
    body = rows[1:]
    for k, r in enumerate(body):
        if len(r) != len(CSV_HEADER) or int(r[0]) != k:
            raise CorruptHeaderError(f"{path}: malformed row {k + 1}")
    masses = np.array([float(r[1]) for r in body])
    if body and all(v == "" for v in body[0][2:]):
        return masses, None
    labels = np.array([[float(v) for v in r[2:]] for r in body]).reshape(-1, 4)
    return masses, labels


def save_bundle(bundle: DatasetBundle, path, overwrite: bool = False) -> Path:
    root = Path(path)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise FileExistsError(f"{root} exists and is not empty")
    root.mkdir(parents=True, exist_ok=True)
    domains = []
    for d in bundle.sources:
        (root / d.domain_id).mkdir(exist_ok=True)
        write_voxels(root / d.domain_id / "voxels.bin", d.voxels)
        _write_csv(root / d.domain_id / "labels.csv", d.masses, d.labels)
        domains.append({"domain_id": d.domain_id, "role": "source", "count": len(d)})
    if bundle.target is not None:
        t = bundle.target
        (root / t.domain_id).mkdir(exist_ok=True)
        write_voxels(root / t.domain_id / "voxels.bin", t.voxels)
        _write_csv(root / t.domain_id / "labels.csv", t.masses, bundle._target_labels)
        domains.append({"domain_id": t.domain_id, "role": "target", "count": len(t)})
    manifest = {
        "version": FORMAT_VERSION,
        "resolution": bundle.resolution,
        "cell_size_mm": bundle.cell_size_mm,
        "generator_config_digest": bundle.generator_config_digest,
        "domains": domains,
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, root / "manifest.json")
    return root


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeaderError(f"{root}/manifest.json is not valid JSON: {exc}") from exc
    for key in ("version", "resolution", "cell_size_mm", "domains"):
        if key not in manifest:
            raise CorruptHeaderError(f"manifest lacks {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"bundle format version {manifest['version']}, expected {FORMAT_VERSION}")
    return manifest


def load_bundle(path) -> DatasetBundle:
    root = Path(path)
    manifest = read_manifest(root)
    R = int(manifest["resolution"])
    cell = float(manifest["cell_size_mm"])
    sources, target, target_labels = [], None, None
    for entry in manifest["domains"]:
        did = entry["domain_id"]
        vox = read_voxels(root / did / "voxels.bin")
        if vox.shape != (entry["count"], R, R, R):
            raise ShapeMismatchError(f"{did}: voxel tensor {vox.shape} but manifest says ({entry['count']}, {R}, {R}, {R})")
        masses, labels = _read_csv(root / did / "labels.csv")
        if len(masses) != entry["count"]:
            raise ShapeMismatchError(f"{did}: {len(masses)} CSV rows but manifest count is {entry['count']}")
        if entry["role"] == "target":
            target = TargetDomain(did, vox, masses, cell)
            target_labels = labels
        else:
            if labels is None:
                raise CorruptHeaderError(f"source domain {did} has no labels")
            sources.append(LabeledDomain(did, vox, masses, labels, cell))
    return DatasetBundle(sources, target, manifest.get("generator_config_digest", ""), target_labels)
