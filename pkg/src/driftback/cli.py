"""Command-line entry point: one subcommand per pipeline stage.

Every command writes ``manifest-<command>.json`` next to its outputs.  Exit
status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .adapt import AdaptationConfig, Models, adapt_batch
from .corruptions import KINDS
from .errors import ConfigError, NumericError, ParseError, TrainingError
from .evaluation import (IDENTITY, ablate, ablation_csv, ablation_svg, bench_timing,
                         cd_independence, corrupt, eval_accuracy, independence_svg)
from .io import RunManifest, atomic_write_text, load_cloud, load_model, save_cloud, save_model
from .schedule import NoiseSchedule, build_schedule
from .shapes import FAMILIES, Corpus, make_corpus
from .training import TrainConfig, train_classifier, train_diffusion, train_vae

log = logging.getLogger("driftback")

LABELS = "labels.json"
CKPT = {"vae": "vae.dbt", "denoiser": "denoiser.dbt", "classifier": "classifier.dbt"}


class UsageError(Exception):
    pass


# --- corpus on disk ---------------------------------------------------------------

def write_corpus(corpus: Corpus, out: Path, fmt: str = "dpc", ids=None) -> list:
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    ids = ids or [f"{i:06d}" for i in range(len(corpus))]
    paths = []
    for cid, cloud in zip(ids, corpus.clouds):
        path = out / "clouds" / f"{cid}.{fmt}"
        save_cloud(cloud, path)
        paths.append(path)
    labels = {"families": list(corpus.families), "ids": ids,
              "labels": [int(v) for v in corpus.labels]}
    atomic_write_text(out / LABELS, json.dumps(labels, indent=1))
    return paths


def read_corpus(root: Path) -> tuple:
    """``(corpus, ids)`` from a directory written by ``gen``."""
    meta_path = root / LABELS
    if not meta_path.exists():
        raise ConfigError(f"{root} has no {LABELS}; was it written by `gen`?")
    meta = json.loads(meta_path.read_text())
    clouds = []
    for cid in meta["ids"]:
        hits = sorted((root / "clouds").glob(f"{cid}.*"))
        if not hits:
            raise ConfigError(f"missing cloud {cid} under {root / 'clouds'}")
        clouds.append(load_cloud(hits[0]).points)
    return Corpus(clouds, np.array(meta["labels"], dtype=np.int64), tuple(meta["families"])), \
        list(meta["ids"])


def select(corpus: Corpus, ids, args) -> tuple:
    """Apply ``--split`` and ``--limit`` (clouds per class) to a corpus."""
    idx = np.arange(len(corpus))
    if args.split != "all":
        train, test = _split_indices(corpus, args.test_fraction, args.split_seed)
        idx = train if args.split == "train" else test
    if args.limit:
        keep = []
        for c in range(len(corpus.families)):
            keep.extend([i for i in idx if corpus.labels[i] == c][:args.limit])
        idx = np.array(sorted(keep), dtype=np.int64)
    return corpus.subset(idx), [ids[i] for i in idx]


def _split_indices(corpus, fraction, seed):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(len(corpus.families)):
        idx = np.flatnonzero(corpus.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        test.extend(idx[:k])
        train.extend(idx[k:])
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def load_models(ckpt: Path, need=("vae", "denoiser", "classifier")) -> tuple:
    loaded, used = {}, []
    for name in need:
        path = ckpt / CKPT[name]
        loaded[name], extra = load_model(path)
        used.append(path)
        if name == "denoiser" and "schedule" in extra:
            loaded["sched"] = NoiseSchedule.from_json(extra["schedule"])
    models = Models(loaded.get("vae"), loaded.get("denoiser"), loaded.get("classifier"),
                    loaded.get("sched", build_schedule()))
    return models, used


def read_config(path) -> AdaptationConfig:
    if path is None:
        return AdaptationConfig()
    try:
        return AdaptationConfig.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _kinds(text):
    if text in (None, "all"):
        return list(KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS and k != IDENTITY]
    if bad:
        raise UsageError(f"unknown corruption kinds: {', '.join(bad)}")
    return kinds


def _numbers(text, cast=float):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def _severities(text):
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return _numbers(text, int)


# --- commands ------------------------------------------------------------------------

def cmd_gen(args, manifest):
    corpus = make_corpus(args.families, args.per_class, args.n, args.seed)
    paths = write_corpus(corpus, args.out, args.format)
    manifest.seeds["corpus"] = args.seed
    manifest.outputs += [str(p) for p in paths] + [str(args.out / LABELS)]
    print(f"wrote {len(paths)} clouds to {args.out}")


def cmd_corrupt(args, manifest):
    corpus, ids = select(*read_corpus(args.data), args)
    count = 0
    for kind in _kinds(args.kinds):
        for sev in _severities(args.severity):
            d = args.out / kind / str(sev)
            d.mkdir(parents=True, exist_ok=True)
            for i, (cid, x) in enumerate(zip(ids, corpus.clouds)):
                path = d / f"{cid}.{args.format}"
                save_cloud(corrupt(kind, sev, args.seed, i, x), path)
                count += 1
    labels = {"families": list(corpus.families), "ids": ids,
              "labels": [int(v) for v in corpus.labels]}
    atomic_write_text(args.out / LABELS, json.dumps(labels, indent=1))
    manifest.seeds["corruption"] = args.seed
    manifest.outputs.append(str(args.out))
    print(f"wrote {count} corrupted clouds to {args.out}")


def _train_cfg(args):
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       gamma_z=args.gamma_z, gamma_h=args.gamma_h, seed=args.seed,
                       points=args.points or None, optimizer=args.optimizer,
                       t_max=getattr(args, "t_max", None) or None,
                       train_prior=not getattr(args, "no_prior", False),
                       sample_latents=getattr(args, "sample_latents", False))


def _finish_training(args, manifest, name, model, history, cfg, extra=None):
    args.ckpt.mkdir(parents=True, exist_ok=True)
    path = args.ckpt / CKPT[name]
    save_model(model, path, {"train": cfg.to_json(), **(extra or {})})
    log_path = args.ckpt / f"{name}_log.json"
    atomic_write_text(log_path, json.dumps(history.epochs, indent=1))
    manifest.config = {"train": cfg.to_json(), **(extra or {})}
    manifest.seeds["train"] = cfg.seed
    manifest.add_checkpoint(path)
    manifest.outputs += [str(path), str(log_path)]
    last = history.epochs[-1]
    print(f"{name}: " + ", ".join(f"{k}={v:.6g}" for k, v in last.items() if k != "epoch"))


def cmd_train_vae(args, manifest):
    corpus, _ = select(*read_corpus(args.data), args)
    cfg = _train_cfg(args)
    vae, history = train_vae(corpus, cfg, dz=args.dz)
    _finish_training(args, manifest, "vae", vae, history, cfg)


def cmd_train_diffusion(args, manifest):
    corpus, _ = select(*read_corpus(args.data), args)
    models, used = load_models(args.ckpt, need=("vae",))
    for p in used:
        manifest.add_checkpoint(p)
    cfg = _train_cfg(args)
    sched = build_schedule(args.T, args.beta_start, args.beta_end, args.S)
    den, history = train_diffusion(models.vae, corpus, cfg, sched,
                                   local_k=tuple(_numbers(args.local_k, int)))
    _finish_training(args, manifest, "denoiser", den, history, cfg,
                     {"schedule": sched.to_json()})


def cmd_train_classifier(args, manifest):
    corpus, _ = select(*read_corpus(args.data), args)
    cfg = _train_cfg(args)
    clf, history = train_classifier(corpus, cfg)
    _finish_training(args, manifest, "classifier", clf, history, cfg,
                     {"families": list(corpus.families)})


def _input_clouds(root: Path):
    files = sorted(p for p in root.rglob("*") if p.suffix in (".dpc", ".xyz"))
    if not files:
        raise ConfigError(f"no .dpc or .xyz clouds under {root}")
    return files


def cmd_adapt(args, manifest):
    cfg = read_config(args.config)
    models, used = load_models(args.ckpt)
    files = _input_clouds(args.input)
    clouds = [load_cloud(f) for f in files]
    labels = _labels_for(args.input, files)
    res = adapt_batch(clouds, cfg, models, labels=labels)
    for f, y, tr in zip(files, res.clouds, res.traces):
        rel = f.relative_to(args.input)
        if y is not None:
            dest = args.out / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_cloud(y, dest)
            manifest.outputs.append(str(dest))
        if args.trace is not None and tr is not None:
            tpath = (args.trace / rel).with_suffix(".json")
            tpath.parent.mkdir(parents=True, exist_ok=True)
            tpath.write_text(json.dumps(tr.to_json(), indent=1))
            manifest.outputs.append(str(tpath))
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(args.out / "summary.json", json.dumps(
        {"summary": res.summary, "errors": {str(files[i]): m for i, m in res.errors.items()}},
        indent=2))
    manifest.config = cfg.to_json()
    manifest.seeds["adaptation"] = cfg.seed
    for p in used:
        manifest.add_checkpoint(p)
    print(json.dumps(res.summary))
    return 1 if len(res.errors) == len(files) else 0


def _labels_for(root: Path, files):
    """Labels from the nearest labels.json above ``root`` (matched by file stem), if any."""
    for d in [root, *root.parents]:
        if (d / LABELS).exists():
            meta = json.loads((d / LABELS).read_text())
            table = dict(zip(meta["ids"], meta["labels"]))
            if all(f.stem in table for f in files):
                return [table[f.stem] for f in files]
            return None
    return None


def _eval_setup(args, manifest):
    corpus, _ = select(*read_corpus(args.data), args)
    models, used = load_models(args.ckpt)
    for p in used:
        manifest.add_checkpoint(p)
    cfg = read_config(args.config)
    manifest.config = {"adaptation": cfg.to_json(), "split": args.split, "limit": args.limit,
                       "severity": args.severity}
    manifest.seeds["corruption"] = args.seed
    return corpus, models, cfg


def cmd_eval(args, manifest):
    corpus, models, cfg = _eval_setup(args, manifest)
    report = eval_accuracy(corpus, _kinds(args.kinds), cfg, models, int(args.severity), args.seed)
    manifest.outputs += [str(p) for p in report.write(args.out)]
    print(report.to_csv(), end="")


def cmd_analyze(args, manifest):
    corpus, models, _ = _eval_setup(args, manifest)
    kinds = _kinds(args.kinds or "uni,gauss,rbf")
    res = cd_independence(corpus, kinds, args.t_w, models, args.seed,
                          int(args.severity), args.draws, args.space)
    args.out.mkdir(parents=True, exist_ok=True)
    svg, js = args.out / "independence.svg", args.out / "independence.json"
    svg.write_text(independence_svg(res))
    js.write_text(json.dumps(res.to_json(), indent=1))
    manifest.outputs += [str(svg), str(js)]
    for (a, b), w in res.before.items():
        print(f"{a}-{b}: before {w:.6g} after {res.after[(a, b)]:.6g} "
              f"ratio {res.ratio(a, b):.3f}")


def cmd_ablate(args, manifest):
    corpus, models, cfg = _eval_setup(args, manifest)
    cast = int if args.param in ("t_w", "S") else float
    values = _numbers(args.values, cast)
    rows = ablate(args.param, values, cfg, corpus, _kinds(args.kinds), models,
                  int(args.severity), args.seed, proportional=not args.fixed_t_w)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = args.out / f"ablation_{args.param}.csv"
    svg_path = args.out / f"ablation_{args.param}.svg"
    csv_path.write_text(ablation_csv(rows))
    svg_path.write_text(ablation_svg(rows))
    manifest.outputs += [str(csv_path), str(svg_path)]
    print(ablation_csv(rows), end="")


def cmd_bench(args, manifest):
    models, used = load_models(args.ckpt, need=("vae", "denoiser"))
    for p in used:
        manifest.add_checkpoint(p)
    cfg = read_config(args.config)
    steps = _numbers(args.steps, int)
    if args.cloud is not None:
        cloud = load_cloud(args.cloud).points
    else:
        cloud = make_corpus(1, 1, args.n, args.seed).clouds[0]
    res = bench_timing(steps, cfg, models, cloud, args.repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / "timing.json"
    out.write_text(json.dumps({"steps": res.steps, "ms": res.millis, "slope": res.slope,
                               "intercept": res.intercept, "r2": res.r2}, indent=1))
    manifest.config = {"adaptation": cfg.to_json(), "repeats": args.repeats}
    manifest.outputs.append(str(out))
    for s, ms in zip(res.steps, res.millis):
        print(f"{s:4d} steps  {ms:9.2f} ms")
    print(f"slope {res.slope:.3f} ms/step, R^2 {res.r2:.4f}")


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: $DRIFTBACK_THREADS or all cores); "
                             "1 gives bit-reproducible output")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, required=True, help="corpus written by `gen`")
    data.add_argument("--split", choices=("train", "test", "all"), default="all")
    data.add_argument("--test-fraction", type=float, default=0.2)
    data.add_argument("--split-seed", type=int, default=0)
    data.add_argument("--limit", type=int, default=0, help="clouds per class (0 keeps all)")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    train.add_argument("--epochs", type=int, default=200)
    train.add_argument("--batch-size", type=int, default=16)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--gamma-z", type=float, default=1e-3)
    train.add_argument("--gamma-h", type=float, default=1e-3)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--points", type=int, default=0, help="points per cloud per step (0: all)")
    train.add_argument("--optimizer", choices=("momentum", "adam"), default="momentum")

    evals = argparse.ArgumentParser(add_help=False)
    evals.add_argument("--ckpt", type=Path, required=True)
    evals.add_argument("--config", type=Path, default=None, help="adaptation config JSON")
    evals.add_argument("--kinds", default=None,
                       help="comma-separated kinds or 'all' (analyze defaults to uni,gauss,rbf)")
    evals.add_argument("--severity", default="3")
    evals.add_argument("--seed", type=int, default=0)
    evals.add_argument("--out", type=Path, required=True)

    p = argparse.ArgumentParser(prog="driftback", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"driftback {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("gen", parents=[common], help="generate the synthetic shape corpus")
    s.add_argument("--families", type=int, default=len(FAMILIES))
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--n", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("dpc", "xyz"), default="dpc")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("corrupt", parents=[common, data], help="write <kind>/<severity>/<id> clouds")
    s.add_argument("--kinds", default="all")
    s.add_argument("--severity", default="3", help="level, list, or range such as 1-5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("dpc", "xyz"), default="dpc")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_corrupt, split="all")

    s = sub.add_parser("train-vae", parents=[common, data, train], help="stage 1: VAE")
    s.add_argument("--dz", type=int, default=32)
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("train-diffusion", parents=[common, data, train],
                       help="stage 2: latent denoisers (needs vae.dbt in --ckpt)")
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--S", type=int, default=100)
    s.add_argument("--beta-start", type=float, default=1e-4)
    s.add_argument("--beta-end", type=float, default=0.02)
    s.add_argument("--t-max", type=int, default=0, help="largest training timestep (0: T)")
    s.add_argument("--local-k", default="8,32",
                   help="neighbourhood sizes (quoted at 1024 points) for the local features")
    s.add_argument("--no-prior", action="store_true",
                   help="skip the shape-latent denoiser (unused by adaptation)")
    s.add_argument("--sample-latents", action="store_true",
                   help="train on posterior samples instead of posterior means")
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("train-classifier", parents=[common, data, train], help="source classifier")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("adapt", parents=[common], help="adapt every cloud under a directory")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--trace", type=Path, default=None)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", parents=[common, data, evals], help="accuracy table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", parents=[common, data, evals],
                       help="corruption-independence statistics")
    s.add_argument("--t-w", type=int, default=5)
    s.add_argument("--draws", type=int, default=4)
    s.add_argument("--space", choices=("latent", "decoded"), default="latent")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("ablate", parents=[common, data, evals], help="parameter sweep")
    s.add_argument("--param", choices=("t_w", "S", "lambda", "gamma", "eta"), required=True)
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--fixed-t-w", action="store_true", help="do not rescale t_w in an S sweep")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", parents=[common], help="latency per denoising-step count")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--config", type=Path, default=None)
    s.add_argument("--steps", default="1,5,10,20,30,40")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--cloud", type=Path, default=None, help="defaults to a generated sphere")
    s.add_argument("--n", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_bench)
    return p


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DRIFTBACK_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DRIFTBACK_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _manifest_dir(args) -> Path:
    if args.command.startswith("train-"):
        return args.ckpt
    return args.out


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args)
        if threads < 1:
            raise UsageError("--threads must be at least 1")
        manifest = RunManifest(args.command, argv)
        with threadpool_limits(limits=threads):
            status = args.func(args, manifest) or 0
        manifest.config.setdefault("threads", threads)
        manifest.write(_manifest_dir(args), f"manifest-{args.command}.json")
        return status
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"driftback: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, NumericError, TrainingError, OSError, ValueError) as exc:
        print(f"driftback: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
