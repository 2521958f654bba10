"""Training loops: VAE (ELBO), latent denoisers (noise regression) and the classifier."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models as M
from . import tensor as tn
from .errors import TrainingError
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    gamma_z: float = 1e-3
    gamma_h: float = 1e-3
    seed: int = 0
    points: int | None = None   # random per-cloud subsample per step; None keeps all
    optimizer: str = "momentum"  # "momentum" or "adam"
    momentum: float = 0.9
    train_prior: bool = True    # also fit the shape-latent denoiser
    t_max: int | None = None    # denoiser timesteps drawn from 1..t_max (None: 1..T)
    sample_latents: bool = False  # stage 2 on posterior samples instead of posterior means

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.gamma_z < 0 or self.gamma_h < 0:
            raise ValueError("KL weights must be nonnegative")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self):
        return asdict(self)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)   # one dict of mean stats per epoch

    def series(self, key):
        return [e[key] for e in self.epochs]


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.k += 1
        c1 = 1 - self.b1 ** self.k
        c2 = 1 - self.b2 ** self.k
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


class Momentum:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.mu = lr, momentum
        self.vel = None

    def step(self, params, grads):
        if self.vel is None:
            self.vel = [np.zeros_like(p) for p in params]
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.vel[i] = self.mu * self.vel[i] - self.lr * g
            out.append(p + self.vel[i])
        return out


def _optimizer(cfg):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr)
    return Momentum(cfg.lr, cfg.momentum)


def _stack(clouds):
    n = {len(c) for c in clouds}
    if len(n) != 1:
        raise ValueError("training clouds must share a point count")
    return np.stack(clouds)


def _subsample(arrs, k, rng):
    """Same random point subset (per cloud) applied to each (B, n, ...) array."""
    if k is None or k >= arrs[0].shape[1]:
        return arrs
    b, n = arrs[0].shape[:2]
    idx = np.stack([rng.choice(n, size=k, replace=False) for _ in range(b)])
    rows = np.arange(b)[:, None]
    return [a[rows, idx] for a in arrs]


def _fit(model, n_items, loss_fn, cfg, what, callback=None):
    """Generic minibatch loop.  ``loss_fn(params, batch_idx, rng)`` -> (loss Var, stats).

    ``callback(model, record)`` runs after every epoch.
    """
    opt = _optimizer(cfg)
    names = [name for name, _ in model.arrays()]
    history = TrainLog()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n_items)
        totals = {}
        batches = 0
        for lo in range(0, n_items, cfg.batch_size):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            tape = tn.Tape()
            loss, stats = loss_fn(model.on_tape(tape), idx, rng)
            if not np.isfinite(loss.value):
                raise TrainingError(f"{what} loss is not finite", epoch)
            grads = tape.vjp(loss, 1.0, names)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"{what} gradient is not finite", epoch)
            model = model.with_arrays(opt.step([a for _, a in model.arrays()], grads))
            stats["loss"] = float(loss.value)
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            batches += 1
        record = {key: val / batches for key, val in totals.items()}
        record["epoch"] = epoch
        history.epochs.append(record)
        if callback is not None:
            callback(model, record)
        log.debug("%s epoch %d: %s", what, epoch, record)
    return model, history


# --- stage 1: VAE ----------------------------------------------------------

def kl_standard_normal(mu, logvar):
    """Sum of KL(N(mu, exp(logvar)) || N(0, 1)) over all entries (tape-aware)."""
    ones = np.ones(mu.shape)
    inner = tn.sub(tn.sub(tn.add(tn.exp(logvar), tn.square(mu)), ones), logvar)
    return tn.scale(tn.sum(inner), 0.5)


def vae_loss(p, x, dz, gamma_z, gamma_h, rng):
    """Negative ELBO per point, averaged over the batch, plus its parts."""
    b, n = x.shape[:2]
    # with both KL weights at zero the variances are unconstrained, so the model
    # is trained as a plain autoencoder on the posterior means
    sample = gamma_z > 0 or gamma_h > 0
    mu, logvar = M.qz_forward(p, x, dz)
    z0 = mu
    if sample:
        z0 = tn.add(mu, tn.mul(tn.exp(tn.scale(logvar, 0.5)), rng.standard_normal((b, dz))))
    hm, hlv = M.qh_forward(p, x, z0)
    h = hm
    if sample:
        h = tn.add(hm, tn.mul(tn.exp(tn.scale(hlv, 0.5)), rng.standard_normal(hm.shape)))
    xr = M.pd_forward(p, z0, h)
    rec = tn.sum(tn.square(tn.sub(xr, x)))
    kl_z = kl_standard_normal(mu, logvar)
    kl_h = kl_standard_normal(hm, hlv)
    total = tn.add(rec, tn.add(tn.scale(kl_z, gamma_z), tn.scale(kl_h, gamma_h)))
    loss = tn.scale(total, 1.0 / (b * n))
    stats = {"mse": float(rec.value) / (b * n * 3),
             "kl_z": float(kl_z.value) / b, "kl_h": float(kl_h.value) / b}
    if stats["kl_z"] < 0 or stats["kl_h"] < 0:
        raise AssertionError("negative KL divergence")
    return loss, stats


def train_vae(corpus, cfg: TrainConfig, dz: int = 32, hidden: int = 64, callback=None):
    """Returns ``(vae, log)``."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    data = _stack(corpus.clouds)
    vae = M.init_vae(np.random.default_rng([cfg.seed, 1]), dz=dz, hidden=hidden)

    def loss_fn(p, idx, rng):
        (x,) = _subsample([data[idx]], cfg.points, rng)
        return vae_loss(p, x, dz, cfg.gamma_z, cfg.gamma_h, rng)

    return _fit(vae, len(data), loss_fn, cfg, "vae", callback)


def reconstruction_mse(vae, clouds) -> np.ndarray:
    """Per-cloud MSE of decode(encode(x)) against x in deterministic mode."""
    out = []
    for x in clouds:
        z0 = M.encode_shape(vae, x)
        xr = M.decode(vae, z0, M.encode_points(vae, z0, x)).points
        out.append(float(np.mean((xr - x) ** 2)))
    return np.array(out)


# --- stage 2: latent denoisers ----------------------------------------------

def encode_corpus(vae, clouds):
    """Posterior means and log-variances of both latents for every cloud."""
    x = _stack(clouds)
    dz = vae.dims["dz"]
    mu_z, lv_z, mu_h, lv_h = [], [], [], []
    for lo in range(0, len(x), 64):
        a, b = M.qz_forward(vae.params, x[lo:lo + 64], dz)
        c, d = M.qh_forward(vae.params, x[lo:lo + 64], a)
        mu_z.append(a), lv_z.append(b), mu_h.append(c), lv_h.append(d)
    return (np.concatenate(mu_z), np.concatenate(lv_z),
            np.concatenate(mu_h), np.concatenate(lv_h))


def diffusion_loss(p, h0, z0, t, eps, sched, prior=False, zeps=None, local_k=()):
    temb = M.time_embedding(t, sched.T)
    ab = sched.alpha_bar[t]
    h_t = np.sqrt(ab)[:, None, None] * h0 + np.sqrt(1 - ab)[:, None, None] * eps
    pred = M.eps_h_forward(p, h_t, z0, temb, local_k)
    loss = tn.mean(tn.square(tn.sub(pred, eps)))
    stats = {"sm_h": float(loss.value)}
    if prior:
        z_t = np.sqrt(ab)[:, None] * z0 + np.sqrt(1 - ab)[:, None] * zeps
        lz = tn.mean(tn.square(tn.sub(M.eps_z_forward(p, z_t, temb), zeps)))
        stats["sm_z"] = float(lz.value)
        loss = tn.add(loss, lz)
    return loss, stats


def train_diffusion(vae, corpus, cfg: TrainConfig, sched: NoiseSchedule | None = None,
                    hidden: int = 128, context: int = 32, local_k=(8, 32), callback=None):
    """Fit the latent-point denoiser (and optionally the shape prior).  Returns ``(model, log)``."""
    mu_z, lv_z, mu_h, lv_h = encode_corpus(vae, corpus.clouds)
    return fit_denoiser(mu_z, mu_h, cfg, sched, lv_z, lv_h, hidden, context, local_k, callback)


def fit_denoiser(mu_z, mu_h, cfg: TrainConfig, sched: NoiseSchedule | None = None,
                 lv_z=None, lv_h=None, hidden: int = 128, context: int = 32, local_k=(8, 32),
                 callback=None):
    """Stage 2 on precomputed latents: ``mu_z`` is (N, dz), ``mu_h`` is (N, n, 4).

    Log-variances are only needed with ``cfg.sample_latents``.
    """
    sched = sched or build_schedule()
    if cfg.sample_latents and (lv_z is None or lv_h is None):
        raise ValueError("sample_latents needs the posterior log-variances")
    lv_h = np.zeros_like(mu_h) if lv_h is None else lv_h
    dz = mu_z.shape[1]
    t_hi = sched.T if cfg.t_max is None else min(cfg.t_max, sched.T)
    model = M.init_denoiser(np.random.default_rng([cfg.seed, 2]), dz=dz, hidden=hidden,
                            context=context, T=sched.T, local_k=local_k)

    def loss_fn(p, idx, rng):
        b = len(idx)
        hm, hs = _subsample([mu_h[idx], np.exp(0.5 * lv_h[idx])], cfg.points, rng)
        if cfg.sample_latents:
            z0 = mu_z[idx] + np.exp(0.5 * lv_z[idx]) * rng.standard_normal((b, dz))
            h0 = hm + hs * rng.standard_normal(hm.shape)
        else:
            z0, h0 = mu_z[idx], hm
        t = rng.integers(1, t_hi + 1, size=b)
        eps = rng.standard_normal(h0.shape)
        zeps = rng.standard_normal(z0.shape) if cfg.train_prior else None
        return diffusion_loss(p, h0, z0, t, eps, sched, cfg.train_prior, zeps, local_k)

    return _fit(model, len(mu_z), loss_fn, cfg, "diffusion", callback)


def heldout_denoising_error(model, vae, clouds, sched, seed=0, t_max=None):
    """Mean per-cloud ‖eps - eps_h‖² on fresh noise, and the zero-predictor baseline ‖eps‖²."""
    rng = np.random.default_rng(seed)
    errs, base = [], []
    t_max = t_max or sched.T
    for x in clouds:
        z0 = M.encode_shape(vae, x)
        h0 = M.encode_points(vae, z0, x)
        t = int(rng.integers(1, t_max + 1))
        eps = rng.standard_normal(h0.shape)
        ab = sched.alpha_bar[t]
        pred, _ = M.denoise_eps_h(model, np.sqrt(ab) * h0 + np.sqrt(1 - ab) * eps, z0, t)
        errs.append(float(np.sum((eps - pred) ** 2)))
        base.append(float(np.sum(eps ** 2)))
    return float(np.mean(errs)), float(np.mean(base))


# --- classifier ----------------------------------------------------------------

def classifier_loss(p, x, labels, classes):
    logp = tn.log_softmax(M.classifier_forward(p, x))
    onehot = np.eye(classes)[labels]
    nll = tn.scale(tn.sum(tn.mul(logp, onehot)), -1.0 / len(labels))
    acc = float(np.mean(np.argmax(logp.value, axis=1) == labels))
    return nll, {"acc": acc}


def train_classifier(corpus, cfg: TrainConfig, hidden: int = 64, width: int = 128,
                     callback=None):
    """Returns ``(classifier, log)``."""
    classes = len(corpus.families)
    if classes < 2:
        raise ValueError("need at least two classes")
    data = _stack(corpus.clouds)
    labels = np.asarray(corpus.labels)
    clf = M.init_classifier(np.random.default_rng([cfg.seed, 3]), classes, hidden, width)

    def loss_fn(p, idx, rng):
        (x,) = _subsample([data[idx]], cfg.points, rng)
        return classifier_loss(p, x, labels[idx], classes)

    return _fit(clf, len(data), loss_fn, cfg, "classifier", callback)


def accuracy(clf, clouds, labels) -> float:
    """Percentage of clouds classified correctly."""
    pred = [M.classify(clf, x)[0] for x in clouds]
    return 100.0 * float(np.mean(np.asarray(pred) == np.asarray(labels)))
