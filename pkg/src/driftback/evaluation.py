"""Experiment harness: accuracy tables, corruption-independence statistics,
parameter sweeps and the latency benchmark.  Charts are hand-written SVG."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from html import escape
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import linregress, wasserstein_distance

from . import models as M
from .adapt import AdaptationConfig, Models, adapt_batch, adapt_cloud
from .corruptions import CorruptionSpec, apply_corruption
from .errors import ConfigError
from .geometry import chamfer, normalize

log = logging.getLogger(__name__)

IDENTITY = "identity"   # pseudo-corruption that returns its input
HIST_BINS = 64
MIN_CD_SAMPLES = 100


def cloud_seed(seed: int, index: int) -> int:
    """Per-cloud corruption seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def corrupt(kind: str, severity: int, seed: int, index: int, cloud) -> np.ndarray:
    """Corrupted and re-normalized cloud; ``identity`` returns the input unchanged."""
    if kind == IDENTITY:
        return np.array(cloud, dtype=np.float64)
    out = apply_corruption(CorruptionSpec(kind, severity, cloud_seed(seed, index)), cloud)
    return normalize(out).points


# --- accuracy table -----------------------------------------------------------

@dataclass
class EvalRow:
    kind: str
    clean: float
    corrupted: float
    adapted: float
    chamfer_corrupted: float = float("nan")
    chamfer_adapted: float = float("nan")
    failed: int = 0


@dataclass
class EvalReport:
    rows: list
    meta: dict = field(default_factory=dict)

    COLUMNS = ("kind", "clean", "corrupted", "adapted", "chamfer_corrupted",
               "chamfer_adapted", "failed")

    def mean_row(self) -> EvalRow:
        def avg(key):
            return float(np.mean([getattr(r, key) for r in self.rows]))
        return EvalRow("mean", avg("clean"), avg("corrupted"), avg("adapted"),
                       avg("chamfer_corrupted"), avg("chamfer_adapted"),
                       int(sum(r.failed for r in self.rows)))

    def row(self, kind) -> EvalRow:
        for r in self.rows:
            if r.kind == kind:
                return r
        raise KeyError(kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows + [self.mean_row()]:
            w.writerow([r.kind] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:-1]]
                       + [r.failed])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "mean": asdict(self.mean_row()),
                "meta": self.meta}

    def write(self, out_dir) -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(self.to_csv())
        (out_dir / "report.json").write_text(json.dumps(self.to_json(), indent=2))
        return [out_dir / "report.csv", out_dir / "report.json"]


def _accuracy(clf, clouds, labels) -> float:
    hits = [M.classify(clf, x)[0] == int(y) for x, y in zip(clouds, labels)]
    return 100.0 * float(np.mean(hits))


def _require(models: Models, classifier=True):
    if models.vae is None or models.denoiser is None or (classifier and models.classifier is None):
        raise ConfigError("evaluation needs vae, denoiser and classifier checkpoints")


def eval_accuracy(corpus, kinds, cfg: AdaptationConfig, models: Models, severity: int = 3,
                  seed: int = 0) -> EvalReport:
    """Clean / corrupted / adapted classifier accuracy per corruption kind."""
    _require(models)
    clean = _accuracy(models.classifier, corpus.clouds, corpus.labels)
    rows = []
    for kind in kinds:
        t0 = time.perf_counter()
        bad = [corrupt(kind, severity, seed, i, x) for i, x in enumerate(corpus.clouds)]
        res = adapt_batch(bad, cfg, models, labels=corpus.labels, references=corpus.clouds)
        row = EvalRow(kind, clean, _accuracy(models.classifier, bad, corpus.labels),
                      res.summary["accuracy"],
                      float(np.mean([chamfer(b, x) for b, x in zip(bad, corpus.clouds)])),
                      res.summary.get("mean_chamfer", float("nan")), res.summary["failed"])
        log.info("%s: corrupted %.1f adapted %.1f (%.1fs)", kind, row.corrupted, row.adapted,
                 time.perf_counter() - t0)
        rows.append(row)
    meta = {"severity": severity, "seed": seed, "clouds": len(corpus),
            "adaptation": cfg.to_json(), "schedule": models.sched.to_json()}
    return EvalReport(rows, meta)


# --- corruption independence ------------------------------------------------------

@dataclass
class CdDistribution:
    kind: str
    stage: str            # "before_perturb" or "after_perturb"
    samples: np.ndarray


@dataclass
class IndependenceResult:
    distributions: list
    before: dict          # (kind_a, kind_b) -> W1 between before-stage samples
    after: dict

    def ratio(self, a, b) -> float:
        return self.after[(a, b)] / self.before[(a, b)]

    def weak_ok(self) -> bool:
        return all(self.after[p] <= self.before[p] for p in self.before)

    def to_json(self) -> dict:
        return {"pairs": [{"a": a, "b": b, "before": self.before[(a, b)],
                           "after": self.after[(a, b)]} for a, b in self.before],
                "distributions": [{"kind": d.kind, "stage": d.stage,
                                   "samples": d.samples.tolist()} for d in self.distributions]}


def _latents(vae, cloud):
    z0 = M.encode_shape(vae, cloud)
    return z0, M.encode_points(vae, z0, cloud)


def cd_independence(corpus, kinds, t_w: int, models: Models, seed: int = 0, severity: int = 3,
                    draws: int = 4, space: str = "latent") -> IndependenceResult:
    """Chamfer distributions to the clean shape before and after forward diffusion.

    Before: Chamfer between the clean and corrupted latent points (xyz channels).
    After: both latents are diffused to DDIM index ``t_w`` with independent noise
    and compared; each cloud's value is the mean over ``draws`` noise draws.  The
    noise of draw ``d`` for cloud ``i`` is shared across corruption kinds.
    ``space="decoded"`` compares decoded clouds instead of latent points.
    """
    if len(corpus) < MIN_CD_SAMPLES:
        raise ValueError(f"need at least {MIN_CD_SAMPLES} clouds, got {len(corpus)}")
    if len(kinds) < 2:
        raise ValueError("need at least two corruption kinds")
    if space not in ("latent", "decoded"):
        raise ValueError(f"space must be 'latent' or 'decoded', got {space!r}")
    sched = models.sched
    if not 0 <= t_w <= sched.S:
        raise ValueError(f"t_w must lie in 0..{sched.S}")
    ab = sched.alpha_bar[sched.timestep(t_w)]

    def view(z0, h):
        return M.decode(models.vae, z0, h).points if space == "decoded" else h[:, :3]

    before = {k: np.empty(len(corpus)) for k in kinds}
    after = {k: np.empty(len(corpus)) for k in kinds}
    for i, x in enumerate(corpus.clouds):
        zc, hc = _latents(models.vae, x)
        clean_noise = [np.random.default_rng([seed, i, d, 0]).standard_normal(hc.shape)
                       for d in range(draws)]
        for k in kinds:
            zk, hk = _latents(models.vae, corrupt(k, severity, seed, i, x))
            before[k][i] = chamfer(view(zc, hc), view(zk, hk))
            if t_w == 0:
                after[k][i] = before[k][i]
                continue
            vals = []
            for d in range(draws):
                # same key for every kind, so equal-size kinds see identical noise
                e_bad = np.random.default_rng([seed, i, d, 1]).standard_normal(hk.shape)
                pc = np.sqrt(ab) * hc + np.sqrt(1 - ab) * clean_noise[d]
                pk = np.sqrt(ab) * hk + np.sqrt(1 - ab) * e_bad
                vals.append(chamfer(view(zc, pc), view(zk, pk)))
            after[k][i] = float(np.mean(vals))
    dists = [CdDistribution(k, "before_perturb", before[k]) for k in kinds] + \
            [CdDistribution(k, "after_perturb", after[k]) for k in kinds]
    pairs = list(combinations(kinds, 2))
    w_before = {(a, b): float(wasserstein_distance(before[a], before[b])) for a, b in pairs}
    w_after = {(a, b): float(wasserstein_distance(after[a], after[b])) for a, b in pairs}
    return IndependenceResult(dists, w_before, w_after)


def histograms(result: IndependenceResult, bins: int = HIST_BINS):
    """Per (stage, kind) normalized counts over shared uniform bins spanning all samples."""
    pooled = np.concatenate([d.samples for d in result.distributions])
    edges = np.linspace(pooled.min(), pooled.max(), bins + 1)
    if edges[0] == edges[-1]:
        edges = np.linspace(edges[0] - 0.5, edges[0] + 0.5, bins + 1)
    out = {}
    for d in result.distributions:
        counts, _ = np.histogram(d.samples, bins=edges)
        out[(d.stage, d.kind)] = counts / max(1, len(d.samples))
    return edges, out


def independence_svg(result: IndependenceResult) -> str:
    edges, hist = histograms(result)
    centers = 0.5 * (edges[:-1] + edges[1:])
    panels = []
    for stage in ("before_perturb", "after_perturb"):
        series = {kind: (centers, h) for (st, kind), h in hist.items() if st == stage}
        panels.append((stage.replace("_", " "), series))
    return svg_panels(panels, "Chamfer distance", "fraction of clouds")


# --- sweeps ---------------------------------------------------------------------------

SWEEPABLE = {"t_w": "t_w", "S": "S", "lambda": "lam", "gamma": "gamma", "eta": "eta"}


def sweep_configs(param: str, values, base: AdaptationConfig, proportional: bool = True):
    """One config per value; an ``S`` sweep rescales ``t_w`` with S unless told otherwise."""
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    if len(values) == 0:
        raise ValueError("empty sweep")
    out = []
    for v in values:
        if param == "S":
            v = int(v)
            t_w = max(1, int(round(base.t_w * v / base.S))) if proportional else min(base.t_w, v)
            out.append(replace(base, S=v, t_w=t_w))
        elif param == "t_w":
            out.append(replace(base, t_w=int(v)))
        else:
            out.append(replace(base, **{SWEEPABLE[param]: float(v)}))
    return out


@dataclass
class AblationRow:
    kind: str
    param: str
    value: float
    t_w: int
    accuracy: float
    mean_chamfer: float


def ablate(param: str, values, base: AdaptationConfig, corpus, kinds, models: Models,
           severity: int = 3, seed: int = 0, proportional: bool = True) -> list:
    """Adapted accuracy and mean Chamfer for every (kind, swept value)."""
    _require(models)
    cfgs = sweep_configs(param, values, base, proportional)
    rows = []
    for kind in kinds:
        bad = [corrupt(kind, severity, seed, i, x) for i, x in enumerate(corpus.clouds)]
        for v, cfg in zip(values, cfgs):
            res = adapt_batch(bad, cfg, models, labels=corpus.labels, references=corpus.clouds)
            rows.append(AblationRow(kind, param, float(v), cfg.t_w, res.summary["accuracy"],
                                    res.summary.get("mean_chamfer", float("nan"))))
            log.info("%s %s=%s: %.1f", kind, param, v, rows[-1].accuracy)
    return rows


def best_value(rows, kind):
    """Swept value with the highest accuracy for ``kind`` (ties: smallest value)."""
    sel = sorted((r for r in rows if r.kind == kind), key=lambda r: (-r.accuracy, r.value))
    return sel[0].value


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "param", "value", "t_w", "accuracy", "mean_chamfer"])
    for r in rows:
        w.writerow([r.kind, r.param, repr(r.value), r.t_w, repr(r.accuracy), repr(r.mean_chamfer)])
    return buf.getvalue()


def ablation_svg(rows) -> str:
    series = {}
    for r in rows:
        xs, ys = series.setdefault(r.kind, ([], []))
        xs.append(r.value)
        ys.append(r.accuracy)
    param = rows[0].param if rows else "value"
    return svg_panels([(f"sweep over {param}", series)], param, "accuracy (%)")


# --- timing -------------------------------------------------------------------------

@dataclass
class TimingResult:
    steps: list
    millis: list
    slope: float
    intercept: float
    r2: float


def bench_timing(steps_list, cfg: AdaptationConfig, models: Models, cloud,
                 repeats: int = 5) -> TimingResult:
    """Median wall-clock latency of :func:`adapt_cloud` per number of denoising steps."""
    cfgs = [replace(cfg, t_w=int(s), S=max(cfg.S, int(s))) for s in steps_list]
    adapt_cloud(cloud, cfgs[0], models)  # warm-up
    millis = []
    for c in cfgs:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            adapt_cloud(cloud, c, models)
            times.append(1000.0 * (time.perf_counter() - t0))
        millis.append(float(np.median(times)))
    fit = linregress(np.asarray(steps_list, dtype=float), millis)
    return TimingResult(list(map(int, steps_list)), millis, float(fit.slope),
                        float(fit.intercept), float(fit.rvalue ** 2))


# --- SVG -------------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
            "#7f7f7f", "#bcbd22", "#e377c2")


def svg_panels(panels, xlabel: str, ylabel: str, width: int = 420, height: int = 300) -> str:
    """Side-by-side polyline charts.  ``panels`` is a list of (title, {name: (xs, ys)})."""
    pad_l, pad_r, pad_t, pad_b = 56, 16, 28, 44
    total_w = width * len(panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{height}" '
             f'viewBox="0 0 {total_w} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{total_w}" height="{height}" fill="white"/>']
    for p, (title, series) in enumerate(panels):
        ox = p * width
        xs = np.concatenate([np.asarray(s[0], float) for s in series.values()]) if series else np.zeros(1)
        ys = np.concatenate([np.asarray(s[1], float) for s in series.values()]) if series else np.zeros(1)
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = min(0.0, float(ys.min())), float(ys.max())
        x1 = x1 if x1 > x0 else x0 + 1.0
        y1 = y1 if y1 > y0 else y0 + 1.0
        pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

        def sx(v):
            return ox + pad_l + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return pad_t + ph - (v - y0) / (y1 - y0) * ph

        parts.append(f'<text x="{ox + width / 2:.1f}" y="16" text-anchor="middle">{escape(title)}</text>')
        parts.append(f'<rect x="{ox + pad_l}" y="{pad_t}" width="{pw}" height="{ph}" '
                     'fill="none" stroke="#444"/>')
        for frac in (0.0, 0.5, 1.0):
            xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
            parts.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
            parts.append(f'<text x="{ox + pad_l - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        parts.append(f'<text x="{ox + pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">'
                     f'{escape(xlabel)}</text>')
        parts.append(f'<text x="{ox + 12}" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
                     f'transform="rotate(-90 {ox + 12} {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>')
        for j, (name, (sxs, sys_)) in enumerate(series.items()):
            colour = _PALETTE[j % len(_PALETTE)]
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(sxs, sys_))
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
            parts.append(f'<text x="{ox + width - pad_r - 4}" y="{pad_t + 14 + 13 * j}" '
                         f'text-anchor="end" fill="{colour}">{escape(str(name))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
