"""Synthetic labelled shape corpus (eight parametric surface families)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import normalize, rotation_matrix

FAMILIES = ("sphere", "box", "cylinder", "cone", "torus", "plane", "helix", "two_sphere")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere(rng, n):
    return _unit(rng.standard_normal((n, 3)))


def _box(rng, n):
    dims = rng.uniform(0.5, 1.0, size=3)
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    side = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = side
    return pts * dims


def _cylinder(rng, n):
    r, h = 0.5, 1.0
    lateral = 2 * np.pi * r * 2 * h
    caps = 2 * np.pi * r * r
    on_side = rng.random(n) < lateral / (lateral + caps)
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(-h, h, n)
    rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, z, rng.choice([-h, h], size=n))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n):
    r, h = 0.8, 1.6
    slant = np.hypot(r, h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_side = rng.random(n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    u = np.sqrt(rng.random(n))  # area-uniform along the slant
    rad = np.where(on_side, r * u, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, h * (1 - u), 0.0) - h / 2
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(rng, n):
    big, small = 0.8, 0.3
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        # area element is proportional to big + small*cos(v)
        keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u),
                                             small * np.sin(v)], axis=1)])
    return out[:n]


def _plane(rng, n):
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def _helix(rng, n):
    turns, radius, height, tube = 3.0, 0.6, 2.0, 0.06
    s = rng.random(n)
    theta = 2 * np.pi * turns * s
    centre = np.stack([radius * np.cos(theta), radius * np.sin(theta), height * (s - 0.5)], axis=1)
    tangent = _unit(np.stack([-radius * np.sin(theta) * 2 * np.pi * turns,
                              radius * np.cos(theta) * 2 * np.pi * turns,
                              np.full(n, height)], axis=1))
    normal = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
    binormal = np.cross(tangent, normal)
    phi = rng.uniform(0, 2 * np.pi, n)
    return centre + tube * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)


def _two_sphere(rng, n):
    pts = _sphere(rng, n) * 0.45
    pts[:, 0] += np.where(rng.random(n) < 0.5, -0.55, 0.55)
    return pts


_SAMPLERS = dict(zip(FAMILIES, (_sphere, _box, _cylinder, _cone, _torus, _plane,
                                _helix, _two_sphere)))


def sample_shape(family: str, n: int, rng: np.random.Generator,
                 max_tilt_deg: float = 20.0, scale_jitter: float = 0.2) -> np.ndarray:
    """One normalized cloud with random anisotropic scale and a small random tilt."""
    pts = _SAMPLERS[family](rng, n)
    pts = pts * rng.uniform(1 - scale_jitter, 1 + scale_jitter, size=3)
    angle = np.deg2rad(rng.uniform(-max_tilt_deg, max_tilt_deg))
    pts = pts @ rotation_matrix(rng.standard_normal(3), angle).T
    return normalize(pts).points


@dataclass
class Corpus:
    clouds: list          # normalized n×3 arrays
    labels: np.ndarray    # family index per cloud
    families: tuple

    def __len__(self):
        return len(self.clouds)

    def subset(self, idx):
        return Corpus([self.clouds[i] for i in idx], self.labels[np.asarray(idx)], self.families)

    def split(self, test_fraction: float, seed: int):
        """Per-class deterministic train/test split."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for c in range(len(self.families)):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(test_fraction * len(idx)))
            test.extend(idx[:k])
            train.extend(idx[k:])
        return self.subset(sorted(train)), self.subset(sorted(test))


def make_corpus(families: int | tuple = 8, per_class: int = 200, n: int = 1024,
                seed: int = 0) -> Corpus:
    if isinstance(families, int):
        if not 1 <= families <= len(FAMILIES):
            raise ValueError(f"families must be in 1..{len(FAMILIES)}")
        families = FAMILIES[:families]
    families = tuple(families)
    clouds, labels = [], []
    for c, fam in enumerate(families):
        for i in range(per_class):
            rng = np.random.default_rng([seed, FAMILIES.index(fam), i])
            clouds.append(sample_shape(fam, n, rng))
            labels.append(c)
    return Corpus(clouds, np.array(labels, dtype=np.int64), families)
