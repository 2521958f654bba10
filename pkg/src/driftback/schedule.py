"""Linear-beta noise schedule, forward diffusion and deterministic DDIM stepping.

Timesteps are 1-based; ``alpha_bar[0] == 1`` so that ``t_prev == 0`` is an
ordinary terminal step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

__all__ = [
    "NoiseSchedule", "build_schedule", "forward_diffuse", "estimate_x0",
    "ddim_step", "posterior_mean",
]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray        # beta[t-1] is beta_t
    alpha_bar: np.ndarray   # length T+1, alpha_bar[0] == 1
    sigma: np.ndarray       # posterior std, sigma[t-1] is sigma_t
    ddim_steps: np.ndarray  # increasing, ends at T
    beta_start: float
    beta_end: float

    @property
    def S(self) -> int:
        return len(self.ddim_steps)

    @property
    def stride(self) -> int:
        return int(self.ddim_steps[0])

    def timestep(self, k: int) -> int:
        """Training timestep of DDIM index ``k`` (0 maps to 0)."""
        if not 0 <= k <= self.S:
            raise ValueError(f"DDIM index {k} outside 0..{self.S}")
        return 0 if k == 0 else int(self.ddim_steps[k - 1])

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "S": self.S}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(d["T"], d["beta_start"], d["beta_end"], d["S"])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   S: int = 100) -> NoiseSchedule:
    if T < 1 or S < 1 or S > T:
        raise ValueError(f"need 1 <= S <= T, got T={T}, S={S}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    # sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
    sigma = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta)
    stride = int(round(T / S))
    steps = np.arange(1, S + 1) * stride
    steps[-1] = T
    if np.any(np.diff(steps) <= 0):
        raise ValueError(f"S={S} does not yield an increasing subsequence of 1..{T}")
    return NoiseSchedule(T, beta, alpha_bar, sigma, steps, float(beta_start), float(beta_end))


def _check_t(t, sched, allow_zero=False):
    lo = 0 if allow_zero else 1
    if not (lo <= t <= sched.T):
        raise ValueError(f"timestep {t} outside {lo}..{sched.T}")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_t(t, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def estimate_x0(xt, eps_pred, t: int, sched: NoiseSchedule):
    _check_t(t, sched, allow_zero=True)
    ab = sched.alpha_bar[t]
    if ab < 1e-12:
        raise NumericError(f"alpha_bar[{t}] = {ab:.3e} underflows")
    return (xt - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddim_step(xt, eps_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic (zero-stochasticity) DDIM update from ``t`` to ``t_prev``."""
    if not t_prev < t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    _check_t(t_prev, sched, allow_zero=True)
    x0_hat = estimate_x0(xt, eps_pred, t, sched)
    ab_prev = sched.alpha_bar[t_prev]
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_pred


def posterior_mean(xt, eps_pred, t: int, sched: NoiseSchedule):
    """Ancestral DDPM mean (1/sqrt(alpha_t))(x_t - beta_t/sqrt(1-abar_t) eps)."""
    _check_t(t, sched)
    alpha = 1.0 - sched.beta[t - 1]
    ab = sched.alpha_bar[t]
    return (xt - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(alpha)
