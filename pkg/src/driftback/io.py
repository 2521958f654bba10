"""Point-cloud files, model checkpoints and run manifests.

Clouds are stored either as ``.xyz`` text (one ``x y z`` row per point, 17
significant digits so values survive the round trip) or as ``.dpc`` binary:
the magic ``DPC1``, a little-endian u32 point count, then ``n*3`` float64.
Checkpoints are DBT1 tensor containers with a JSON sidecar.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tn
from .errors import ConfigError, ParseError
from .geometry import PointCloud
from .models import Model

DPC_MAGIC = b"DPC1"


def _as_points(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an n×3 cloud, got shape {pts.shape}")
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    return pts


def save_cloud(cloud, path) -> None:
    path = Path(path)
    pts = _as_points(cloud)
    if path.suffix == ".dpc":
        data = DPC_MAGIC + struct.pack("<I", len(pts)) + np.ascontiguousarray(pts, "<f8").tobytes()
        path.write_bytes(data)
    elif path.suffix == ".xyz":
        path.write_text("".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts))
    else:
        raise ValueError(f"unknown cloud extension {path.suffix!r} (use .xyz or .dpc)")


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".dpc":
        return PointCloud(_parse_dpc(path.read_bytes(), path))
    if path.suffix == ".xyz":
        return PointCloud(_parse_xyz(path.read_text(), path))
    raise ValueError(f"unknown cloud extension {path.suffix!r} (use .xyz or .dpc)")


def _parse_dpc(data: bytes, path):
    if data[:4] != DPC_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r} at offset 0")
    if len(data) < 8:
        raise ParseError(f"{path}: truncated header at offset {len(data)}")
    (n,) = struct.unpack("<I", data[4:8])
    if n == 0:
        raise ValueError(f"{path}: empty point cloud")
    want = 8 + 24 * n
    if len(data) != want:
        raise ParseError(f"{path}: expected {want} bytes for {n} points, found {len(data)} "
                         f"(offset {min(len(data), want)})")
    return np.frombuffer(data[8:], dtype="<f8").reshape(n, 3).astype(np.float64)


def _parse_xyz(text: str, path):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 values, got {len(tokens)}")
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric token in {line!r}") from None
    if not rows:
        raise ValueError(f"{path}: empty point cloud")
    return np.array(rows, dtype=np.float64)


# --- checkpoints --------------------------------------------------------------

def save_model(model: Model, path, extra: dict | None = None) -> None:
    """Write ``path`` (DBT1 tensors) and ``path.json`` (kind, dims, layout, extra)."""
    path = Path(path)
    arrays = model.arrays()
    tn.save_tensors(path, [a for _, a in arrays])
    meta = {"kind": model.kind, "dims": model.dims,
            "layout": {name: len(layers) for name, layers in sorted(model.params.items())},
            "names": [name for name, _ in arrays], "extra": extra or {}}
    atomic_write_text(sidecar(path), json.dumps(meta, indent=2, sort_keys=True))


def load_model(path) -> tuple:
    """``(model, extra)`` from a checkpoint written by :func:`save_model`."""
    path = Path(path)
    if not path.exists() or not sidecar(path).exists():
        raise ConfigError(f"missing checkpoint {path} (or its .json sidecar)")
    meta = json.loads(sidecar(path).read_text())
    arrays = tn.load_tensors(path)
    if len(arrays) != len(meta["names"]):
        raise ParseError(f"{path}: {len(arrays)} tensors but sidecar lists {len(meta['names'])}")
    skeleton = Model(meta["kind"], meta["dims"],
                     {name: [None] * count for name, count in meta["layout"].items()})
    return skeleton.with_arrays(arrays), meta.get("extra", {})


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# --- manifests ------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)   # path -> sha256
    outputs: list = field(default_factory=list)
    version: str = __version__

    def add_checkpoint(self, path):
        self.checkpoints[str(path)] = file_digest(path)

    def write(self, directory, name: str = "manifest.json") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = directory / name
        body = {"command": self.command, "argv": self.argv, "config": self.config,
                "seeds": self.seeds, "checkpoints": self.checkpoints,
                "outputs": sorted(self.outputs), "version": self.version}
        atomic_write_text(out, json.dumps(body, indent=2, sort_keys=True))
        return out
