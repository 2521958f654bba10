"""
Training toy models and adapting corrupted clouds
=================================================

A small version of the full pipeline: generate the synthetic corpus, train
the latent VAE, the latent-point denoiser and a classifier, then adapt
corrupted clouds and compare accuracies.  Takes about four minutes on one
core.

Background noise is where adaptation pays off.  A denoiser this small also
blurs clouds that were barely corrupted, so gauss noise loses accuracy here;
the acceptance recipe trains on about 7x more data.
"""

import time

from driftback.adapt import AdaptationConfig, Models
from driftback.evaluation import eval_accuracy
from driftback.shapes import make_corpus
from driftback.training import TrainConfig, train_classifier, train_diffusion, train_vae

t0 = time.time()
corpus = make_corpus(families=4, per_class=60, n=1024, seed=0)
train, test = corpus.split(0.25, seed=0)
print(f"{len(train)} training and {len(test)} test clouds from {corpus.families}")

vae, log = train_vae(train, TrainConfig(epochs=60, points=256, optimizer="adam"))
print(f"VAE reconstruction MSE {log.epochs[-1]['mse']:.5f}")
clf, _ = train_classifier(train, TrainConfig(epochs=10, points=256, optimizer="adam"))
den, log = train_diffusion(vae, train, TrainConfig(epochs=60, points=512, optimizer="adam",
                                                   t_max=400, train_prior=False))
print(f"denoiser loss {log.epochs[-1]['sm_h']:.4f}   ({time.time() - t0:.0f}s so far)")

models = Models(vae, den, clf)
sub = test.subset(range(0, len(test), 2))
report = eval_accuracy(sub, ["back", "impu", "gauss"], AdaptationConfig(), models)
for row in report.rows:
    print(f"{row.kind:6s} clean {row.clean:5.1f}  corrupted {row.corrupted:5.1f}  "
          f"adapted {row.adapted:5.1f}")
print(f"done in {time.time() - t0:.0f}s")
