"""Seeded generators for fifteen point-cloud corruptions in three families.

Every generator is a pure function of (kind, severity, seed, input points).
Magnitudes follow ``SEVERITY`` unless a :class:`CorruptionSpec` carries an
explicit ``magnitude`` override.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, rotation_matrix

NOISE = ("uni", "gauss", "back", "impu", "ups")
DEFORMATION = ("rbf", "rbf-i", "shear", "rot", "dist")
DENSITY = ("den-d", "den-i", "cut", "occ", "lidar")

# column order of the usual corruption benchmark tables
KINDS = ("uni", "gauss", "back", "impu", "ups", "rbf", "rbf-i", "den-d", "den-i",
         "shear", "rot", "cut", "dist", "occ", "lidar")

SEVERITY = {
    "uni": (0.01, 0.02, 0.03, 0.04, 0.05),          # half-width of U(-a, a)
    "gauss": (0.01, 0.015, 0.02, 0.025, 0.03),       # std
    "back": (0.02, 0.04, 0.06, 0.08, 0.10),          # fraction replaced
    "impu": (0.01, 0.02, 0.03, 0.04, 0.05),          # fraction offset
    "ups": (0.1, 0.2, 0.3, 0.4, 0.5),                # fraction appended
    "rbf": (0.02, 0.04, 0.06, 0.08, 0.10),           # weight norm
    "rbf-i": (0.02, 0.04, 0.06, 0.08, 0.10),
    "den-d": (1, 2, 3, 4, 5),                        # anchors
    "den-i": (1, 2, 3, 4, 5),
    "shear": (0.1, 0.2, 0.3, 0.4, 0.5),              # off-diagonal magnitude
    "rot": (15.0, 30.0, 45.0, 60.0, 75.0),           # degrees
    "cut": (1, 2, 3, 4, 5),                          # clusters of 64
    "dist": (0.02, 0.04, 0.06, 0.08, 0.10),          # lattice displacement
    "occ": (0.1, 0.2, 0.3, 0.4, 0.5),                # fraction removed
    "lidar": (32, 24, 16, 12, 8),                    # scan rings
}

RBF_WIDTH = 0.5
RBF_CENTERS = 5
NEIGHBOURHOOD = 100
CUT_CLUSTER = 64
MIN_KEEP = 8        # deleting corruptions stop before a cloud drops below this


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 3
    seed: int = 0
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be 1..5, got {self.severity}")

    @property
    def level(self):
        if self.magnitude is not None:
            return self.magnitude
        return SEVERITY[self.kind][self.severity - 1]


def corruption_catalog():
    """(kind, family) pairs in table order."""
    family = {k: "noise" for k in NOISE}
    family.update({k: "deformation" for k in DEFORMATION})
    family.update({k: "density" for k in DENSITY})
    return [(k, family[k]) for k in KINDS]


def apply_corruption(spec: CorruptionSpec, cloud) -> PointCloud:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind), spec.severity])
    out = _GENERATORS[spec.kind](pts, spec.level, rng)
    return PointCloud(out)


def _uni(p, a, rng):
    return p + rng.uniform(-a, a, size=p.shape)


def _gauss(p, s, rng):
    return p + rng.normal(0.0, s, size=p.shape)


def _pick(rng, n, frac):
    m = int(round(frac * n))
    return rng.choice(n, size=m, replace=False)


def _back(p, frac, rng):
    out = p.copy()
    idx = _pick(rng, len(p), frac)
    out[idx] = rng.uniform(-1.0, 1.0, size=(len(idx), 3))
    return out


def _impu(p, frac, rng):
    out = p.copy()
    idx = _pick(rng, len(p), frac)
    out[idx] += rng.uniform(-0.3, 0.3, size=(len(idx), 3))
    return out


def _ups(p, frac, rng):
    idx = _pick(rng, len(p), frac)
    extra = p[idx] + rng.normal(0.0, 0.01, size=(len(idx), 3))
    return np.concatenate([p, extra])


def _rbf_field(p, weight, rng, kernel):
    centers = p[rng.choice(len(p), size=min(RBF_CENTERS, len(p)), replace=False)]
    w = rng.standard_normal((len(centers), 3))
    w *= weight / np.linalg.norm(w, axis=1, keepdims=True)
    r = np.linalg.norm(p[:, None, :] - centers[None, :, :], axis=2)
    return p + kernel(r) @ w


def _rbf(p, weight, rng):
    return _rbf_field(p, weight, rng, lambda r: np.exp(-r ** 2 / (2 * RBF_WIDTH ** 2)))


def _rbf_inv(p, weight, rng):
    return _rbf_field(p, weight, rng, lambda r: 1.0 / np.sqrt(1.0 + (r / RBF_WIDTH) ** 2))


def _knn(p, anchor, k):
    d = ((p - anchor) ** 2).sum(axis=1)
    return np.argsort(d, kind="stable")[:k]


def _den_d(p, anchors, rng):
    drop = np.zeros(len(p), dtype=bool)
    for a in rng.choice(len(p), size=min(int(anchors), len(p)), replace=False):
        nn = _knn(p, p[a], NEIGHBOURHOOD)
        trial = drop.copy()
        trial[rng.choice(nn, size=int(0.75 * len(nn)), replace=False)] = True
        if len(p) - trial.sum() < MIN_KEEP:
            break
        drop = trial
    return p[~drop]


def _den_i(p, anchors, rng):
    extra = []
    for a in rng.choice(len(p), size=min(int(anchors), len(p)), replace=False):
        nn = _knn(p, p[a], NEIGHBOURHOOD)
        extra.append(p[nn] + rng.normal(0.0, 0.005, size=(len(nn), 3)))
    return np.concatenate([p] + extra)


def _shear(p, s, rng):
    i, j = rng.choice(3, size=2, replace=False)
    m = np.eye(3)
    m[i, j] = s * rng.choice([-1.0, 1.0])
    return p @ m.T


def _rot(p, degrees, rng):
    axis = rng.standard_normal(3)
    if degrees == 0:
        return p.copy()
    return p @ rotation_matrix(axis, np.deg2rad(degrees)).T


def _cut(p, clusters, rng):
    keep = np.ones(len(p), dtype=bool)
    for _ in range(int(clusters)):
        alive = np.flatnonzero(keep)
        if len(alive) - CUT_CLUSTER < MIN_KEEP:
            break
        anchor = p[rng.choice(alive)]
        nn = alive[_knn(p[alive], anchor, CUT_CLUSTER)]
        keep[nn] = False
    return p[keep]


def _dist(p, mag, rng, grid=8):
    lattice = rng.uniform(-mag, mag, size=(grid, grid, grid, 3))
    # lattice spans [-1, 1]^3; clip so slightly-outside points use the border cells
    u = np.clip((p + 1.0) / 2.0 * (grid - 1), 0.0, grid - 1 - 1e-9)
    i0 = np.floor(u).astype(int)
    f = u - i0
    disp = np.zeros_like(p)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
                disp += w[:, None] * lattice[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return p + disp


def _occ(p, frac, rng):
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    proj = p @ v
    m = min(int(round(frac * len(p))), len(p) - min(MIN_KEEP, len(p)))
    order = np.argsort(-proj, kind="stable")
    keep = np.ones(len(p), dtype=bool)
    keep[order[:m]] = False
    return p[keep]


def _lidar(p, rings, rng):
    sensor_dir = rng.standard_normal(3)
    sensor_dir /= np.linalg.norm(sensor_dir)
    sensor = 3.0 * sensor_dir
    # sensor frame: "up" is any unit vector orthogonal to the viewing direction
    up = np.cross(sensor_dir, rng.standard_normal(3))
    up /= np.linalg.norm(up)
    rel = p - sensor
    elev = np.arcsin(np.clip(rel @ up / np.linalg.norm(rel, axis=1), -1.0, 1.0))
    lo, hi = elev.min(), elev.max()
    span = max(hi - lo, 1e-12)
    ring_elev = lo + (np.arange(int(rings)) + 0.5) * span / rings
    half_width = span / (32 * 6)
    gap = np.abs(elev[:, None] - ring_elev[None, :]).min(axis=1)
    keep = gap <= half_width
    if keep.sum() < 8:
        keep[np.argsort(gap, kind="stable")[:8]] = True
    out = p[keep]
    return out + rng.normal(0.0, 0.005, size=out.shape)


_GENERATORS = {
    "uni": _uni, "gauss": _gauss, "back": _back, "impu": _impu, "ups": _ups,
    "rbf": _rbf, "rbf-i": _rbf_inv, "den-d": _den_d, "den-i": _den_i,
    "shear": _shear, "rot": _rot, "cut": _cut, "dist": _dist, "occ": _occ,
    "lidar": _lidar,
}
