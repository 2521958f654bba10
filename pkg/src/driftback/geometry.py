"""Point-set metrics: brute-force nearest neighbours, Chamfer and Selective Chamfer distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointCloud", "ScdResult", "normalize", "nearest", "min_sq_dists",
    "keep_count", "scd", "scd_grad", "chamfer", "rotation_matrix",
]

_CHUNK = 1024


@dataclass
class PointCloud:
    """An n×3 cloud plus the translation/scale that produced it."""

    points: np.ndarray
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"expected an n×3 array, got shape {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("empty point cloud")
        self.centroid = np.asarray(self.centroid, dtype=np.float64)

    def __len__(self):
        return len(self.points)


@dataclass
class ScdResult:
    value: float
    selected_ab: np.ndarray  # (k, 2) pairs (i in a, nn(i) in b), ascending distance
    selected_ba: np.ndarray  # (k, 2) pairs (j in b, nn(j) in a)


def normalize(cloud) -> PointCloud:
    """Center at the origin and scale so the farthest point has norm 1.

    A cloud whose points all coincide is centered and left with scale 1.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 1:
        raise ValueError("empty point cloud")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    scale = radius if radius > 1e-12 else 1.0
    return PointCloud(centered / scale, centroid, scale)


def _as_set(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ValueError(f"expected a non-empty k×d point set, got shape {a.shape}")
    return a


def _nn_both(a, b):
    return nearest(a, b)[1], nearest(b, a)[1]


def _sq(a, b):
    diff = a - b
    return np.einsum("ij,ij->i", diff, diff)


def nearest(a, b):
    """Squared distance from each row of ``a`` to its nearest row of ``b``, and that row's index.

    Ties go to the lowest index in ``b``.
    """
    a, b = _as_set(a), _as_set(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    # rank candidates by ||b||^2 - 2<a, b> (one matmul on augmented rows), then
    # recompute the winning distances exactly
    a_aug = np.hstack([a, np.ones((len(a), 1))])
    b_aug = np.hstack([-2.0 * b, np.einsum("ij,ij->i", b, b)[:, None]])
    idx = np.empty(len(a), dtype=np.int64)
    for lo in range(0, len(a), _CHUNK):
        idx[lo:lo + _CHUNK] = np.argmin(a_aug[lo:lo + _CHUNK] @ b_aug.T, axis=1)
    return _sq(a, b[idx]), idx


def min_sq_dists(a, b) -> np.ndarray:
    return nearest(a, b)[0]


def keep_count(lam: float, n: int) -> int:
    """Number of smallest distances retained: max(1, floor(lam*n))."""
    # the 1e-9 guards against 0.29*100 == 28.999999999999996
    return max(1, int(math.floor(lam * n + 1e-9)))


def _check_lambda(lam):
    if not (0.0 < lam <= 1.0):
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")


def _select(d, lam):
    k = keep_count(lam, len(d))
    return np.argsort(d, kind="stable")[:k]


def scd(h0, hbar0, lam: float = 1.0) -> ScdResult:
    """Selective Chamfer distance.

    Each side keeps the lowest ``keep_count(lam, n)`` nearest-neighbour squared
    distances, but the sum is divided by the full set size.
    """
    _check_lambda(lam)
    a, b = _as_set(h0), _as_set(hbar0)
    ab, ba = _nn_both(a, b)
    da, db = _sq(a, b[ab]), _sq(b, a[ba])
    ia, ib = _select(da, lam), _select(db, lam)
    value = da[ia].sum() / len(a) + db[ib].sum() / len(b)
    return ScdResult(float(value), np.stack([ia, ab[ia]], axis=1),
                     np.stack([ib, ba[ib]], axis=1))


def scd_grad(h0, hbar0, lam: float = 1.0, wrt: str = "b"):
    """Subgradient of :func:`scd` w.r.t. ``h0`` (``wrt="a"``) or ``hbar0`` (``wrt="b"``).

    Nearest-neighbour assignments and the selection are held fixed.  Passing
    ``wrt="both"`` returns the pair ``(grad_a, grad_b)``.
    """
    _check_lambda(lam)
    a, b = _as_set(h0), _as_set(hbar0)
    res = scd(a, b, lam)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    i, j = res.selected_ab[:, 0], res.selected_ab[:, 1]
    diff = 2.0 * (a[i] - b[j]) / len(a)
    np.add.at(ga, i, diff)
    np.add.at(gb, j, -diff)
    p, q = res.selected_ba[:, 0], res.selected_ba[:, 1]
    diff = 2.0 * (b[p] - a[q]) / len(b)
    np.add.at(gb, p, diff)
    np.add.at(ga, q, -diff)
    if wrt == "a":
        return ga
    if wrt == "b":
        return gb
    if wrt == "both":
        return ga, gb
    raise ValueError(f"wrt must be 'a', 'b' or 'both', got {wrt!r}")


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance (mean squared NN distance, both directions)."""
    a, b = _as_set(a), _as_set(b)
    ab, ba = _nn_both(a, b)
    return float(_sq(a, b[ab]).mean() + _sq(b, a[ba]).mean())


def rotation_matrix(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (need not be unit length)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)
