"""
Deterministic sampling with an exact denoiser
=============================================

If the data is a single Gaussian the optimal noise predictor is known in
closed form.  Running the adaptation loop with that predictor (and guidance
switched off) must reproduce the DDIM trajectory exactly, which is a cheap
end-to-end check of the schedule and the step arithmetic.
"""

import numpy as np

from driftback import models as M
from driftback.adapt import AdaptationConfig, Models, guided_loop
from driftback.schedule import build_schedule

sched = build_schedule()          # T=1000, linear betas, 100 DDIM steps
mu, var = np.array([0.3, -0.2, 0.1, 0.5]), 0.04


def oracle(h_t, z0, t):
    return M.oracle_gaussian_eps(mu, var, h_t, t, sched)


vae = M.init_vae(np.random.default_rng(0), dz=8, hidden=8)   # only the shapes matter here
models = Models(vae, oracle, sched=sched)
cfg = AdaptationConfig(t_w=100, gamma=0.0, eta=0.0)

h_T = np.random.default_rng(1).standard_normal((2048, 4))
h0, _, trace = guided_loop(h_T, np.zeros(8), 100, cfg, models, h_T)

# every step shrinks the offset from sqrt(abar)*mu by a known factor
steps = [0] + list(sched.ddim_steps)
factor = 1.0
for t, tp in zip(steps[:0:-1], steps[-2::-1]):
    a, ap = sched.alpha_bar[t], sched.alpha_bar[tp]
    factor *= (np.sqrt(ap * a) * var + np.sqrt((1 - ap) * (1 - a))) / (a * var + 1 - a)
expected = mu + factor * (h_T - np.sqrt(sched.alpha_bar[-1]) * mu)

print("max deviation from the closed form:", np.abs(h0 - expected).max())
print("sample mean ", h0.mean(axis=0).round(3), " target", mu)
print("sample std  ", h0.std(axis=0).round(3), " target", round(np.sqrt(var), 3))
