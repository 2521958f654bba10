"""Toy hierarchical point-cloud VAE, latent denoisers and a max-pool classifier.

Every network is a stack of tanh MLPs applied per point, with mean- or
max-pooling where a global vector is needed.  Forward functions accept plain
arrays or tape variables (see :mod:`driftback.tensor`) and batch over a
leading axis: clouds are ``(B, n, 3)``, latent points ``(B, n, 4)``, shape
latents ``(B, Dz)``.  The single-cloud helpers at the bottom take and return
unbatched arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as tn
from .errors import DimensionError, NumericError
from .geometry import PointCloud

LATENT_CHANNELS = 4
TIME_EMBED = 16


@dataclass
class Model:
    """Named MLP parameter sets plus the integer dims needed to rebuild them."""

    kind: str
    dims: dict
    params: dict = field(default_factory=dict)  # name -> [(W, b), ...]

    def arrays(self):
        """(name, array) pairs in a fixed order, used for checkpoints and tapes."""
        out = []
        for name in sorted(self.params):
            for k, (w, b) in enumerate(self.params[name]):
                out.append((f"{name}.{k}.W", w))
                out.append((f"{name}.{k}.b", b))
        return out

    def with_arrays(self, arrays) -> "Model":
        arrays = list(arrays)
        params = {}
        i = 0
        for name in sorted(self.params):
            layers = []
            for _ in self.params[name]:
                layers.append((arrays[i], arrays[i + 1]))
                i += 2
            params[name] = layers
        if i != len(arrays):
            raise DimensionError(f"expected {i} arrays, got {len(arrays)}")
        return Model(self.kind, dict(self.dims), params)

    def on_tape(self, tape: tn.Tape):
        """Parameters re-registered as tape leaves (named like :meth:`arrays`)."""
        return {name: [(tape.leaf(w, f"{name}.{k}.W"), tape.leaf(b, f"{name}.{k}.b"))
                       for k, (w, b) in enumerate(layers)]
                for name, layers in self.params.items()}

    def scaled(self, factor: float) -> "Model":
        return self.with_arrays([a * factor for _, a in self.arrays()])


def _mlp(layers, x):
    return tn.mlp_apply(layers, x)[0]


def _init(sizes, rng, last_gain=1.0):
    layers = tn.init_mlp(sizes, rng)
    w, b = layers[-1]
    layers[-1] = (w * last_gain, b)
    return layers


def _n_points(x):
    return x.shape[1]


def _zeros_like_batch(x, width):
    return np.zeros(x.shape[:-1] + (width,))


# --- VAE -------------------------------------------------------------------

def init_vae(rng: np.random.Generator, dz: int = 32, hidden: int = 64) -> Model:
    c = LATENT_CHANNELS
    return Model("vae", {"dz": dz, "hidden": hidden}, {
        "qz_point": _init([3, hidden, hidden], rng),
        "qz_head": _init([hidden, 2 * dz], rng, 0.1),
        "qh": _init([3 + dz, hidden, hidden, 2 * c], rng, 0.1),
        "pd": _init([c + dz, hidden, 3], rng, 0.1),
    })


def qz_forward(p, x, dz):
    """Mean and log-variance of q(z0 | x)."""
    feat = tn.tanh(_mlp(p["qz_point"], x))
    out = _mlp(p["qz_head"], tn.mean(feat, axis=1))
    return tn.columns(out, 0, dz), tn.columns(out, dz, 2 * dz)


def qh_forward(p, x, z0):
    """Mean and log-variance of q(h0 | z0, x); xyz channels are a residual on x."""
    n = _n_points(x)
    out = _mlp(p["qh"], tn.concat([x, tn.expand(z0, 1, n)], axis=-1))
    base = np.concatenate([np.asarray(x.value if isinstance(x, tn.Var) else x),
                           _zeros_like_batch(x, 1)], axis=-1)
    c = LATENT_CHANNELS
    return tn.add(base, tn.columns(out, 0, c)), tn.columns(out, c, 2 * c)


def pd_forward(p, z0, h):
    """Decoder: per-point offset added to the xyz channels of the latent points."""
    n = _n_points(h)
    out = _mlp(p["pd"], tn.concat([h, tn.expand(z0, 1, n)], axis=-1))
    return tn.add(tn.columns(h, 0, 3), out)


# --- latent denoisers -------------------------------------------------------

def time_embedding(t, T: int = 1000, width: int = TIME_EMBED):
    """Sinusoidal embedding of integer timesteps, shape (len(t), width)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(T) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_denoiser(rng: np.random.Generator, dz: int = 32, hidden: int = 128,
                  context: int = 32, T: int = 1000, local_k=(8, 32)) -> Model:
    c = LATENT_CHANNELS
    local_k = [int(k) for k in (local_k or ())]
    return Model("denoiser", {"dz": dz, "hidden": hidden, "context": context, "T": T,
                              "local_k": local_k}, {
        "ctx": _init([c + TIME_EMBED, 64, context], rng),
        "eps_h": _init([c * (1 + len(local_k)) + dz + TIME_EMBED + context,
                        hidden, hidden, hidden, c], rng),
        "eps_z": _init([dz + TIME_EMBED, hidden, hidden, dz], rng),
    })


def neighbour_count(local_k: int, n: int) -> int:
    """``local_k`` is quoted at 1024 points; scale it so the neighbourhood radius is density-free."""
    return int(min(n - 1, max(2, round(local_k * n / 1024))))


def knn_indices(h, k: int) -> np.ndarray:
    """(B, n, k) indices of each point's k nearest others by xyz channels, ascending index order."""
    h = np.asarray(h.value if isinstance(h, tn.Var) else h)
    n = h.shape[1]
    out = np.empty(h.shape[:2] + (k,), dtype=np.int64)
    for b, pts in enumerate(h[..., :3]):
        _, nn = cKDTree(pts).query(pts, k=k + 1, workers=1)
        nn = nn.reshape(n, k + 1)
        # drop each point itself (normally column 0, but duplicates can reorder)
        own = nn == np.arange(n)[:, None]
        own[~own.any(axis=1), -1] = True
        out[b] = np.sort(nn[~own].reshape(n, k), axis=1)
    return out


def eps_h_forward(p, h_t, z0, temb, local_k=()):
    """Noise prediction for latent points.

    Per-point MLP on (h_t row, local offsets, z0, time embedding, pooled
    context).  The context is the mean over points of a small per-point
    network; each local offset is the mean displacement to the k nearest
    neighbours at one scale.  Both keep the map permutation-equivariant.
    """
    n = _n_points(h_t)
    te = tn.expand(temb, 1, n)
    ctx = tn.mean(tn.tanh(_mlp(p["ctx"], tn.concat([h_t, te], axis=-1))), axis=1)
    parts = [h_t]
    for k in local_k or ():
        idx = knn_indices(h_t, neighbour_count(k, n))
        parts.append(tn.sub(tn.neighbor_mean(h_t, idx), h_t))
    parts += [tn.expand(z0, 1, n), te, tn.expand(ctx, 1, n)]
    return _mlp(p["eps_h"], tn.concat(parts, axis=-1))


def eps_z_forward(p, z_t, temb):
    return _mlp(p["eps_z"], tn.concat([z_t, temb], axis=-1))


# --- classifier --------------------------------------------------------------

def init_classifier(rng: np.random.Generator, classes: int, hidden: int = 64,
                    width: int = 128) -> Model:
    return Model("classifier", {"classes": classes, "hidden": hidden, "width": width}, {
        "point": _init([3, hidden, width], rng),
        "head": _init([width, hidden, classes], rng),
    })


def classifier_forward(p, x):
    feat = tn.tanh(_mlp(p["point"], x))
    return _mlp(p["head"], tn.max(feat, axis=1))


# --- single-cloud API ---------------------------------------------------------

def _points(x):
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected an n×3 cloud, got {pts.shape}")
    return pts


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def encode_shape(vae: Model, x, seed=None):
    """Shape latent z0 (Dz,).  ``seed=None`` returns the posterior mean."""
    pts = _points(x)
    mu, logvar = qz_forward(vae.params, pts[None], vae.dims["dz"])
    mu, logvar = _finite(mu[0], "q_z"), _finite(logvar[0], "q_z")
    if seed is None:
        return mu
    eps = np.random.default_rng(seed).standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def encode_points(vae: Model, z0, x, seed=None):
    """Latent points h0 (n, 4) conditioned on z0.  ``seed=None`` returns the mean."""
    pts = _points(x)
    mean, logvar = qh_forward(vae.params, pts[None], np.asarray(z0)[None])
    mean, logvar = _finite(mean[0], "q_h"), _finite(logvar[0], "q_h")
    if seed is None:
        return mean
    eps = np.random.default_rng(seed).standard_normal(mean.shape)
    return mean + np.exp(0.5 * logvar) * eps


def decode(vae: Model, z0, h0) -> PointCloud:
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim != 2 or h0.shape[1] != LATENT_CHANNELS:
        raise DimensionError(f"expected n×{LATENT_CHANNELS} latent points, got {h0.shape}")
    out = pd_forward(vae.params, np.asarray(z0)[None], h0[None])[0]
    return PointCloud(_finite(out, "decoder"))


def denoise_eps_h(model: Model, h_t, z0, t: int, record: bool = False):
    """Predicted noise (n, 4) for latent points at timestep ``t``.

    With ``record`` set, returns ``(eps, tape)`` where the tape has leaves
    ``"h_t"`` and ``"z0"`` and its last node is the prediction; otherwise
    ``(eps, None)``.
    """
    h_t = np.asarray(h_t, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if h_t.ndim != 2 or h_t.shape[1] != LATENT_CHANNELS:
        raise DimensionError(f"expected n×{LATENT_CHANNELS} latent points, got {h_t.shape}")
    if z0.shape != (model.dims["dz"],):
        raise DimensionError(f"expected z0 of shape ({model.dims['dz']},), got {z0.shape}")
    if not 0 <= t <= model.dims["T"]:
        raise ValueError(f"timestep {t} outside 0..{model.dims['T']}")
    temb = time_embedding([t], model.dims["T"])
    k = model.dims.get("local_k", ())
    if not record:
        return eps_h_forward(model.params, h_t[None], z0[None], temb, k)[0], None
    tape = tn.Tape()
    hv = tn.reshape(tape.leaf(h_t, "h_t"), (1,) + h_t.shape)
    zv = tn.reshape(tape.leaf(z0, "z0"), (1,) + z0.shape)
    out = tn.reshape(eps_h_forward(model.params, hv, zv, temb, k), h_t.shape)
    return out.value, tape


def classify(clf: Model, x):
    """(label, logits); ties go to the lowest class index."""
    logits = _finite(classifier_forward(clf.params, _points(x)[None])[0], "classifier logits")
    return int(np.argmax(logits)), logits


def oracle_gaussian_eps(mu, var: float, x_t, t: int, sched):
    """Bayes-optimal noise prediction E[eps | x_t] when x0 ~ N(mu, var*I)."""
    if var < 0:
        raise ValueError("var must be nonnegative")
    ab = sched.alpha_bar[t]
    denom = ab * var + (1.0 - ab)
    if denom < 1e-300 or 1.0 - ab <= 0.0:
        raise NumericError(f"degenerate oracle denominator at t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = (np.sqrt(ab) * var * x_t + (1.0 - ab) * np.asarray(mu)) / denom
    return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def oracle_gaussian_x0(mu, var: float, x_t, t: int, sched):
    ab = sched.alpha_bar[t]
    return (np.sqrt(ab) * var * np.asarray(x_t) + (1.0 - ab) * np.asarray(mu)) / (ab * var + 1.0 - ab)
